"""
Evaluation metrics: Dice, HD95 and TRE (NDV lives in fields).

Label transport uses nearest-neighbour sampling by default. The "soft" mode
warps Gaussian-softened one-hot maps trilinearly and takes the arg-max, which
lets sub-voxel displacements move label boundaries.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, gaussian_filter, generate_binary_structure

from . import autodiff as ad
from .errors import ShapeError
from .fields import ndv
from .grids import DisplacementField, LabelMap, LandmarkSet, require_same_dims

logger = logging.getLogger(__name__)

LABEL_MODES = ("nearest", "soft")
SOFT_LABEL_SIGMA = 1.0


# =============================================================================
# Label Warping
# =============================================================================

def warp_labels(labels: LabelMap, u: DisplacementField, mode: str = "nearest") -> LabelMap:
    """out(x) = labels(round(x + u(x))), border clamped; or the soft arg-max transport."""
    require_same_dims(labels, u)
    if mode == "soft":
        return _warp_labels_soft(labels, u)
    if mode != "nearest":
        raise ValueError(f"label warp mode must be one of {LABEL_MODES}, got {mode!r}")
    dims = labels.dims
    coords = ad.identity_grid(dims) + u.data.astype(np.float64)
    index = tuple(
        np.clip(np.floor(coords[a] + 0.5), 0, dims[a] - 1).astype(np.int64) for a in range(3)
    )
    return LabelMap(labels.data[index], labels.spacing)


def _warp_labels_soft(labels: LabelMap, u: DisplacementField) -> LabelMap:
    classes = labels.classes(include_background=True)
    onehot = np.stack([
        gaussian_filter((labels.data == c).astype(np.float64), SOFT_LABEL_SIGMA, mode="nearest")
        for c in classes
    ])
    coords = ad.identity_grid(labels.dims) + u.data.astype(np.float64)
    warped = ad.sample_trilinear(onehot, coords)
    winners = np.asarray(classes, dtype=np.int32)[np.argmax(warped, axis=0)]
    return LabelMap(winners, labels.spacing)


# =============================================================================
# Overlap and Distances
# =============================================================================

def dice(a: LabelMap, b: LabelMap, classes: Optional[Sequence[int]] = None) -> Dict[str, object]:
    """Per-class Dice and their mean; a class absent from both maps is None and excluded."""
    require_same_dims(a, b)
    if classes is None:
        classes = sorted(set(a.classes()) | set(b.classes()))
    per_class: Dict[int, Optional[float]] = {}
    for c in classes:
        in_a = a.data == c
        in_b = b.data == c
        total = int(in_a.sum()) + int(in_b.sum())
        if total == 0:
            per_class[int(c)] = None
            continue
        per_class[int(c)] = 2.0 * int(np.logical_and(in_a, in_b).sum()) / total
    defined = [v for v in per_class.values() if v is not None]
    return {"per_class": per_class, "mean": float(np.mean(defined)) if defined else None}


def _surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour (outside counts)."""
    structure = generate_binary_structure(3, 1)
    return mask & ~binary_erosion(mask, structure=structure, border_value=0)


def hd95(a_mask: np.ndarray, b_mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled surface-to-surface distances, in mm."""
    a_mask = np.asarray(a_mask, dtype=bool)
    b_mask = np.asarray(b_mask, dtype=bool)
    if a_mask.shape != b_mask.shape:
        raise ShapeError(f"hd95: mask shapes differ {a_mask.shape} vs {b_mask.shape}")
    if not a_mask.any() or not b_mask.any():
        raise ValueError("hd95 is undefined for an empty mask")
    surf_a, surf_b = _surface(a_mask), _surface(b_mask)
    to_b = distance_transform_edt(~surf_b, sampling=spacing)
    to_a = distance_transform_edt(~surf_a, sampling=spacing)
    distances = np.concatenate([to_b[surf_a], to_a[surf_b]])
    return float(np.percentile(distances, 95))


def tre(landmarks: LandmarkSet, u: DisplacementField, spacing=(1.0, 1.0, 1.0)) -> Dict[str, object]:
    """Map fixed points q through phi and measure the distance to the moving points p, in mm."""
    spacing = np.asarray(spacing, dtype=np.float64)
    if len(landmarks) == 0:
        return {"mean": None, "median": None, "distances": []}
    dims = np.asarray(u.dims)
    q_vox = landmarks.fixed / spacing
    if np.any(q_vox < 0) or np.any(q_vox > dims - 1):
        bad = int(np.argmax(np.any((q_vox < 0) | (q_vox > dims - 1), axis=1)))
        raise ValueError(f"landmark {bad} at {landmarks.fixed[bad].tolist()} mm lies outside the volume")
    disp = ad.sample_trilinear(u.data, q_vox.T).T
    mapped = (q_vox + disp) * spacing
    distances = np.linalg.norm(mapped - landmarks.moving, axis=1)
    return {
        "mean": float(np.mean(distances)),
        "median": float(np.median(distances)),
        "distances": distances.tolist(),
    }


# =============================================================================
# Reports
# =============================================================================

@dataclass
class MetricReport:
    """All metrics of one registered pair."""
    pair_id: str
    dice: Dict[int, Optional[float]] = field(default_factory=dict)
    dice_mean: Optional[float] = None
    hd95: Dict[int, Optional[float]] = field(default_factory=dict)
    hd95_mean: Optional[float] = None
    tre_mean: Optional[float] = None
    tre_median: Optional[float] = None
    ndv: Optional[float] = None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["dice"] = {str(k): v for k, v in self.dice.items()}
        data["hd95"] = {str(k): v for k, v in self.hd95.items()}
        return data

    CSV_FIELDS = ("pair_id", "dice_mean", "hd95_mean", "tre_mean", "tre_median", "ndv")

    def csv_row(self) -> List[object]:
        return [getattr(self, name) for name in self.CSV_FIELDS]


def evaluate_pair(pair_id: str, u: DisplacementField, moving_labels: Optional[LabelMap] = None,
                  fixed_labels: Optional[LabelMap] = None, landmarks: Optional[LandmarkSet] = None,
                  spacing=(1.0, 1.0, 1.0), label_mode: str = "nearest") -> MetricReport:
    """Warp moving labels by u and score against fixed labels; TRE on landmarks; NDV of u."""
    report = MetricReport(pair_id=pair_id, ndv=ndv(u) if min(u.dims) >= 2 else None)
    if moving_labels is not None and fixed_labels is not None:
        warped = warp_labels(moving_labels, u, label_mode)
        scores = dice(warped, fixed_labels)
        report.dice, report.dice_mean = scores["per_class"], scores["mean"]
        for c in scores["per_class"]:
            a, b = warped.data == c, fixed_labels.data == c
            report.hd95[c] = hd95(a, b, spacing) if a.any() and b.any() else None
        defined = [v for v in report.hd95.values() if v is not None]
        report.hd95_mean = float(np.mean(defined)) if defined else None
    if landmarks is not None:
        result = tre(landmarks, u, spacing)
        report.tre_mean, report.tre_median = result["mean"], result["median"]
    return report


def aggregate(values: Sequence[Optional[float]]) -> str:
    """`mean ± std` with 4 decimals over the defined values."""
    defined = [v for v in values if v is not None]
    if not defined:
        return "n/a"
    return f"{np.mean(defined):.4f} ± {np.std(defined):.4f}"
