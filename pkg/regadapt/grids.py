"""
Immutable grid containers: scalar volumes, label maps, displacement fields and
landmark sets.

Storage order is row-major with W fastest, i.e. numpy C order over (D, H, W).
Fields are stored component-major as (3, D, H, W) in voxel units of their own
grid. Arrays are frozen (non-writeable) after construction.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ShapeError, VolumeFormatError

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _freeze(array: np.ndarray, dtype) -> np.ndarray:
    frozen = np.array(array, dtype=dtype, order="C", copy=True)
    frozen.flags.writeable = False
    return frozen


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ShapeError(f"spacing must be three positive reals, got {spacing}")
    return spacing


def _check_dims(shape) -> Dims:
    dims = tuple(int(s) for s in shape)
    if len(dims) != 3 or any(s < 1 for s in dims):
        raise ShapeError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar intensity grid with voxel spacing in millimeters."""
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_dims(data.shape)
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(data, np.float32))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume on the same grid."""
        if tuple(np.shape(data)) != self.dims:
            raise ShapeError(f"expected dims {self.dims}, got {np.shape(data)}")
        return Volume3D(data, self.spacing)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer class labels on a voxel grid; class 0 is background."""
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_dims(data.shape)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise VolumeFormatError("label data must be integral")
        if data.size and data.min() < 0:
            raise VolumeFormatError("labels must be non-negative")
        object.__setattr__(self, "data", _freeze(data, np.int32))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)

    def classes(self, include_background: bool = False) -> list:
        present = [int(c) for c in np.unique(self.data)]
        return present if include_background else [c for c in present if c != 0]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement u(x), phi(x) = x + u(x), in voxel units."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ShapeError(f"field data must have shape (3, D, H, W), got {data.shape}")
        _check_dims(data.shape[1:])
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("field contains non-finite values")
        object.__setattr__(self, "data", _freeze(data, np.float32))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape[1:])

    @classmethod
    def zeros(cls, dims) -> "DisplacementField":
        return cls(np.zeros((3,) + _check_dims(dims), dtype=np.float32))

    @classmethod
    def constant(cls, dims, vector) -> "DisplacementField":
        data = np.empty((3,) + _check_dims(dims), dtype=np.float32)
        for axis in range(3):
            data[axis] = vector[axis]
        return cls(data)

    def max_abs(self) -> float:
        return float(np.abs(self.data).max())


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Corresponding points in millimeters: moving[i] <-> fixed[i]."""
    moving: np.ndarray
    fixed: np.ndarray

    def __post_init__(self):
        moving = np.asarray(self.moving, dtype=np.float64).reshape(-1, 3)
        fixed = np.asarray(self.fixed, dtype=np.float64).reshape(-1, 3)
        if moving.shape != fixed.shape:
            raise ShapeError(
                f"landmark lists differ in length: {len(moving)} vs {len(fixed)}"
            )
        if not (np.all(np.isfinite(moving)) and np.all(np.isfinite(fixed))):
            raise VolumeFormatError("landmark coordinates must be finite")
        object.__setattr__(self, "moving", _freeze(moving, np.float64))
        object.__setattr__(self, "fixed", _freeze(fixed, np.float64))

    def __len__(self) -> int:
        return len(self.moving)


def require_same_dims(*items) -> Dims:
    """Raise ShapeError unless every grid object shares the same dims."""
    dims = {tuple(item.dims) for item in items}
    if len(dims) != 1:
        raise ShapeError(f"dims mismatch: {sorted(dims)}")
    return dims.pop()
