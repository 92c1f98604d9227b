"""
Displacement-field algebra.

Convention: backward warping, out(x) = v(x + u(x)), border-clamped trilinear
sampling. Fields are in voxel units of their own grid; `upsample_field` is the
only place where coarse-voxel units are converted to fine-voxel units.

Each operation accepts either the immutable grid containers (Volume3D,
DisplacementField) or DiffTensors. Given DiffTensors the result stays in the
autodiff graph.
"""
import logging
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ShapeError
from .grids import DisplacementField, Volume3D, require_same_dims

logger = logging.getLogger(__name__)

FieldLike = Union[DisplacementField, DiffTensor]
VolumeLike = Union[Volume3D, DisplacementField, DiffTensor]


# =============================================================================
# Conversions
# =============================================================================

def volume_tensor(v: Volume3D, requires_grad: bool = False, dtype=np.float32) -> DiffTensor:
    return DiffTensor(v.data[None, None], requires_grad=requires_grad, dtype=dtype)


def field_tensor(u: DisplacementField, requires_grad: bool = False, dtype=np.float32) -> DiffTensor:
    return DiffTensor(u.data[None], requires_grad=requires_grad, dtype=dtype)


def tensor_to_field(t: DiffTensor) -> DisplacementField:
    if t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeError(f"expected a (1, 3, D, H, W) field tensor, got {t.shape}")
    return DisplacementField(t.data[0])


def tensor_to_volume(t: DiffTensor, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    if t.shape[0] != 1 or t.shape[1] != 1:
        raise ShapeError(f"expected a (1, 1, D, H, W) volume tensor, got {t.shape}")
    return Volume3D(t.data[0, 0], spacing)


# =============================================================================
# Warping and Composition
# =============================================================================

def warp(v: VolumeLike, u: FieldLike) -> VolumeLike:
    """Resample v at x + u(x); returns the same kind as v."""
    if isinstance(v, DiffTensor) or isinstance(u, DiffTensor):
        vt = v if isinstance(v, DiffTensor) else (
            field_tensor(v) if isinstance(v, DisplacementField) else volume_tensor(v))
        ut = u if isinstance(u, DiffTensor) else field_tensor(u)
        return ad.warp(vt, ut)
    require_same_dims(v, u)
    if isinstance(v, DisplacementField):
        return tensor_to_field(ad.warp(field_tensor(v), field_tensor(u)))
    return tensor_to_volume(ad.warp(volume_tensor(v), field_tensor(u)), v.spacing)


def compose(prev: FieldLike, resid: FieldLike) -> FieldLike:
    """Apply `resid` after `prev`: u_out(x) = u_r(x) + u_p(x + u_r(x))."""
    if isinstance(prev, DiffTensor) or isinstance(resid, DiffTensor):
        pt = prev if isinstance(prev, DiffTensor) else field_tensor(prev)
        rt = resid if isinstance(resid, DiffTensor) else field_tensor(resid)
        if pt.shape != rt.shape:
            raise ShapeError(f"compose: field shapes differ {pt.shape} vs {rt.shape}")
        return ad.add(rt, ad.warp(pt, rt))
    require_same_dims(prev, resid)
    return tensor_to_field(compose(field_tensor(prev), field_tensor(resid)))


def add_fields(a: FieldLike, b: FieldLike) -> FieldLike:
    """Additive update (the non-compositional ablation)."""
    if isinstance(a, DiffTensor) or isinstance(b, DiffTensor):
        at = a if isinstance(a, DiffTensor) else field_tensor(a)
        bt = b if isinstance(b, DiffTensor) else field_tensor(b)
        return ad.add(at, bt)
    require_same_dims(a, b)
    return DisplacementField(a.data + b.data)


def upsample_field(u: FieldLike, factor: Optional[float] = None,
                   size: Optional[Sequence[int]] = None) -> FieldLike:
    """Trilinear resize of each component, then rescale values by the per-axis dims ratio."""
    if not isinstance(u, DiffTensor):
        return tensor_to_field(upsample_field(field_tensor(u), factor, size))
    src = u.spatial
    if size is None:
        if factor is None:
            raise ValueError("upsample_field needs a factor or a target size")
        size = ad.resize_dims(src, factor)
    size = tuple(int(s) for s in size)
    if size == src:
        return u
    resized = ad.trilinear_resize(u, size=size)
    return ad.scale_channels(resized, [s_out / s_in for s_out, s_in in zip(size, src)])


def scale_field(u: FieldLike, s: float) -> FieldLike:
    if isinstance(u, DiffTensor):
        return ad.scale(u, s)
    return DisplacementField(u.data * np.float32(s))


# =============================================================================
# Analysis
# =============================================================================

def _field_array(u: FieldLike) -> np.ndarray:
    if isinstance(u, DiffTensor):
        return u.data[0].astype(np.float64)
    return u.data.astype(np.float64)


def jacobian_det(u: FieldLike) -> Volume3D:
    """det(I + grad u) per voxel; central differences inside, one-sided at the borders."""
    data = _field_array(u)
    if any(s < 2 for s in data.shape[1:]):
        raise ShapeError(f"jacobian_det needs at least 2 voxels per axis, got {data.shape[1:]}")
    # jac[i][j] = d u_i / d x_j
    jac = [np.gradient(data[i], axis=(0, 1, 2)) for i in range(3)]
    m = np.empty(data.shape[1:] + (3, 3), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            m[..., i, j] = jac[i][j] + (1.0 if i == j else 0.0)
    return Volume3D(np.linalg.det(m))


def ndv(u: FieldLike) -> float:
    """Percentage of voxels whose Jacobian determinant is <= 0."""
    det = jacobian_det(u).data
    return 100.0 * float(np.count_nonzero(det <= 0)) / det.size


def endpoint_error(u: FieldLike, v: FieldLike) -> float:
    """Mean Euclidean distance between two fields, in voxels."""
    a, b = _field_array(u), _field_array(v)
    if a.shape != b.shape:
        raise ShapeError(f"endpoint_error: field shapes differ {a.shape} vs {b.shape}")
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=0))))
