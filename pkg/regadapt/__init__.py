"""regadapt - deformable 3D registration with instance-optimized refinement."""

from .config import FORMAT_VERSION, IO_DEFAULTS, UNET_DEFAULTS
from .grids import DisplacementField, LabelMap, LandmarkSet, Volume3D
from .cascade import RefineCascade, UNet3DConfig, init_cascade
from .pipeline import IOConfig, gated_preprocess, instance_optimize

__all__ = [
    'FORMAT_VERSION', 'IO_DEFAULTS', 'UNET_DEFAULTS',
    'Volume3D', 'LabelMap', 'DisplacementField', 'LandmarkSet',
    'UNet3DConfig', 'RefineCascade', 'init_cascade',
    'IOConfig', 'gated_preprocess', 'instance_optimize',
]
__version__ = '1.0.0'
