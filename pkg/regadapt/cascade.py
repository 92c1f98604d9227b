"""
Multi-scale residual refinement cascade.

Three 3D U-Nets predict residual fields at scales 1/4, 1/2 and 1. Stage t sees
the source warped by phi_{t-1} (warped at full resolution, then pooled) and
the pooled target; its residual is upsampled to full resolution and composed
onto (or added to) phi_{t-1}. The single variant runs one net at full
resolution.
"""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .config import IO_DEFAULTS, UNET_DEFAULTS
from .errors import ConfigError, ShapeError, VolumeFormatError
from .fields import add_fields, compose, field_tensor, upsample_field, volume_tensor

logger = logging.getLogger(__name__)

CASCADE_SCALES = (0.25, 0.5, 1.0)
VARIANTS = ("cascade", "single")
UPDATE_MODES = ("compose", "add")
SCALE_MODES = ("finest_residual", "all_residuals")


# =============================================================================
# Configuration
# =============================================================================

@dataclass
class UNet3DConfig:
    """Architecture of one refinement U-Net."""
    in_channels: int = UNET_DEFAULTS["in_channels"]
    out_channels: int = UNET_DEFAULTS["out_channels"]
    base_channels: int = UNET_DEFAULTS["base_channels"]
    depth: int = UNET_DEFAULTS["depth"]
    negative_slope: float = UNET_DEFAULTS["negative_slope"]
    zero_init_final: bool = UNET_DEFAULTS["zero_init_final"]
    instance_norm: bool = UNET_DEFAULTS["instance_norm"]

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"U-Net depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @classmethod
    def from_dict(cls, data: dict) -> "UNet3DConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def layer_list(config: UNet3DConfig) -> List[Tuple[str, int, int, int]]:
    """(name, c_in, c_out, kernel) for every conv in forward order."""
    layers = []
    c_in = config.in_channels
    for level in range(config.depth):
        c = config.channels(level)
        layers.append((f"enc{level}.conv1", c_in, c, 3))
        layers.append((f"enc{level}.conv2", c, c, 3))
        layers.append((f"enc{level}.down", c, config.channels(level + 1), 3))
        c_in = config.channels(level + 1)
    c = config.channels(config.depth)
    layers.append(("bottleneck.conv1", c, c, 3))
    layers.append(("bottleneck.conv2", c, c, 3))
    for level in reversed(range(config.depth)):
        c = config.channels(level)
        layers.append((f"dec{level}.conv1", config.channels(level + 1) + c, c, 3))
        layers.append((f"dec{level}.conv2", c, c, 3))
    layers.append(("final", config.base_channels, config.out_channels, 1))
    return layers


def parameter_count(config: UNet3DConfig) -> int:
    return sum(c_out * c_in * k ** 3 + c_out for _, c_in, c_out, k in layer_list(config))


# =============================================================================
# U-Net
# =============================================================================

def init_unet(config: UNet3DConfig, rng: np.random.Generator, prefix: str = "") -> "OrderedDict[str, DiffTensor]":
    """He fan-in normal init for hidden convs; the final conv is zero when zero_init_final is set."""
    params: "OrderedDict[str, DiffTensor]" = OrderedDict()
    for name, c_in, c_out, k in layer_list(config):
        if name == "final" and config.zero_init_final:
            weight = np.zeros((c_out, c_in, k, k, k), dtype=np.float32)
        else:
            std = np.sqrt(2.0 / (c_in * k ** 3))
            weight = (rng.standard_normal((c_out, c_in, k, k, k)) * std).astype(np.float32)
        params[f"{prefix}{name}.weight"] = ad.parameter(weight, name=f"{prefix}{name}.weight")
        params[f"{prefix}{name}.bias"] = ad.parameter(
            np.zeros((1, c_out, 1, 1, 1), dtype=np.float32), name=f"{prefix}{name}.bias")
    return params


def _symmetric_pads(dims, multiple: int) -> List[Tuple[int, int]]:
    pads = []
    for s in dims:
        extra = (-s) % multiple
        pads.append((extra // 2, extra - extra // 2))
    return pads


def unet_forward(theta: Dict[str, DiffTensor], warped: DiffTensor, target: DiffTensor,
                 config: UNet3DConfig, prefix: str = "") -> DiffTensor:
    """3-channel residual with the same spatial dims as the inputs."""
    if warped.shape != target.shape or warped.shape[1] != 1:
        raise ShapeError(f"unet_forward: expected two matching 1-channel inputs, got {warped.shape} and {target.shape}")

    def conv(x, name, stride=1):
        weight = theta[f"{prefix}{name}.weight"]
        k = weight.shape[2]
        y = ad.conv3d(x, weight, theta[f"{prefix}{name}.bias"], stride=stride, padding=k // 2)
        if config.instance_norm and name != "final":
            y = ad.instance_norm(y)
        return y

    def act(x):
        return ad.leaky_relu(x, config.negative_slope)

    pads = _symmetric_pads(warped.spatial, 2 ** config.depth)
    x = ad.pad3d(ad.concat([warped, target]), pads)

    skips = []
    for level in range(config.depth):
        x = act(conv(x, f"enc{level}.conv1"))
        x = act(conv(x, f"enc{level}.conv2"))
        skips.append(x)
        x = act(conv(x, f"enc{level}.down", stride=2))
    x = act(conv(x, "bottleneck.conv1"))
    x = act(conv(x, "bottleneck.conv2"))
    for level in reversed(range(config.depth)):
        skip = skips[level]
        x = ad.trilinear_resize(x, size=skip.spatial)
        x = ad.concat([x, skip])
        x = act(conv(x, f"dec{level}.conv1"))
        x = act(conv(x, f"dec{level}.conv2"))
    x = conv(x, "final")
    return ad.crop3d(x, pads)


# =============================================================================
# Cascade
# =============================================================================

@dataclass
class RefineCascade:
    """Refinement nets theta_1..theta_T plus the variant flags."""
    config: UNet3DConfig
    nets: List["OrderedDict[str, DiffTensor]"]
    scales: Tuple[float, ...]
    update_mode: str = IO_DEFAULTS["update_mode"]
    variant: str = IO_DEFAULTS["variant"]
    output_scale: float = IO_DEFAULTS["output_scale"]
    scale_mode: str = IO_DEFAULTS["scale_mode"]
    seed: int = 0

    def __post_init__(self):
        expected = 3 if self.variant == "cascade" else 1
        if len(self.nets) != expected or len(self.scales) != expected:
            raise ConfigError(f"{self.variant} variant needs {expected} nets and scales")
        if list(self.scales) != sorted(set(self.scales)) or self.scales[-1] != 1.0:
            raise ConfigError(f"scales must be strictly increasing to 1, got {self.scales}")

    def parameters(self) -> List[DiffTensor]:
        return [p for net in self.nets for p in net.values()]

    def named_parameters(self) -> "OrderedDict[str, DiffTensor]":
        named = OrderedDict()
        for net in self.nets:
            named.update(net)
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def tags(self) -> dict:
        return {
            "variant": self.variant,
            "update_mode": self.update_mode,
            "scales": list(self.scales),
            "scale_mode": self.scale_mode,
            "output_scale": self.output_scale,
        }


def _check_flags(variant: str, update_mode: str, scale_mode: str) -> None:
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if update_mode not in UPDATE_MODES:
        raise ConfigError(f"update_mode must be one of {UPDATE_MODES}, got {update_mode!r}")
    if scale_mode not in SCALE_MODES:
        raise ConfigError(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")


def init_cascade(config: UNet3DConfig, seed: int, variant: str = IO_DEFAULTS["variant"],
                 update_mode: str = IO_DEFAULTS["update_mode"],
                 output_scale: float = IO_DEFAULTS["output_scale"],
                 scale_mode: str = IO_DEFAULTS["scale_mode"]) -> RefineCascade:
    """Fresh cascade, deterministic in seed."""
    _check_flags(variant, update_mode, scale_mode)
    rng = np.random.default_rng(seed)
    scales = CASCADE_SCALES if variant == "cascade" else (1.0,)
    nets = [init_unet(config, rng, prefix=f"stage{t}.") for t in range(len(scales))]
    cascade = RefineCascade(config, nets, scales, update_mode, variant, output_scale, scale_mode, seed)
    logger.debug(f"Initialized {variant} cascade: {len(nets)} nets, {parameter_count(config)} params each")
    return cascade


@dataclass
class CascadeOutput:
    """phi_1..phi_T and I_A o phi_t for each stage, all full resolution."""
    fields: List[DiffTensor]
    stage_warps: List[DiffTensor]
    residuals: List[DiffTensor] = field(default_factory=list)

    @property
    def phi_T(self) -> DiffTensor:
        return self.fields[-1]


def cascade_forward(phi0, source, target, cascade: RefineCascade) -> CascadeOutput:
    """Run every stage on (source o phi_{t-1}, target) and accumulate the field."""
    phi = phi0 if isinstance(phi0, DiffTensor) else field_tensor(phi0)
    a = source if isinstance(source, DiffTensor) else volume_tensor(source)
    b = target if isinstance(target, DiffTensor) else volume_tensor(target)
    if a.spatial != b.spatial or phi.spatial != a.spatial:
        raise ShapeError(f"cascade_forward: dims mismatch {phi.spatial}, {a.spatial}, {b.spatial}")
    full = a.spatial

    out = CascadeOutput(fields=[], stage_warps=[])
    warped = ad.warp(a, phi)
    last = len(cascade.nets) - 1
    for t, (scale, theta) in enumerate(zip(cascade.scales, cascade.nets)):
        factor = int(round(1.0 / scale))
        small_a = ad.avg_pool3d(warped, factor)
        small_b = ad.avg_pool3d(b, factor)
        if min(small_a.spatial) < 1:
            raise ShapeError(f"stage {t}: scale {scale} yields an empty grid")
        resid = unet_forward(theta, small_a, small_b, cascade.config, prefix=f"stage{t}.")
        if cascade.scale_mode == "all_residuals" or t == last:
            resid = ad.scale(resid, cascade.output_scale)
        resid = upsample_field(resid, size=full)
        phi = compose(phi, resid) if cascade.update_mode == "compose" else add_fields(phi, resid)
        warped = ad.warp(a, phi)
        out.residuals.append(resid)
        out.fields.append(phi)
        out.stage_warps.append(warped)
    return out


# =============================================================================
# Checkpoints
# =============================================================================

def save_cascade(cascade: RefineCascade, path: Path) -> Path:
    config = {"unet": cascade.config.to_dict(), "seed": cascade.seed, **cascade.tags()}
    return ad.save_parameters(cascade.named_parameters(), path, config=config, tags=cascade.tags())


def load_cascade(path: Path) -> RefineCascade:
    """Rebuild a cascade from a checkpoint, restoring shapes and flags from its manifest."""
    arrays, manifest = ad.load_parameters(path)
    config = manifest.get("config", {})
    try:
        unet = UNet3DConfig.from_dict(config["unet"])
        cascade = init_cascade(unet, config.get("seed", 0), config["variant"], config["update_mode"],
                               config["output_scale"], config["scale_mode"])
    except KeyError as e:
        raise VolumeFormatError(f"checkpoint {path} manifest lacks {e}") from e
    for name, tensor in cascade.named_parameters().items():
        if name not in arrays:
            raise VolumeFormatError(f"checkpoint {path} is missing parameter {name}")
        if arrays[name].shape != tensor.shape:
            raise VolumeFormatError(f"checkpoint parameter {name} has shape {arrays[name].shape}, expected {tensor.shape}")
        tensor.data = arrays[name].copy()
    logger.info(f"Loaded {cascade.variant} cascade from {path}")
    return cascade
