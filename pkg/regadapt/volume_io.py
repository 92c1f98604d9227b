"""
Volume, label, field and landmark I/O plus the synthetic problem generator.

File format: `<name>.vol` raw little-endian payload with a `<name>.vol.json`
manifest {"dims": [D, H, W], "spacing": [sd, sh, sw], "kind": ...}.
Volumes and fields are float32 (fields component-major), labels are int32.
Landmarks are CSV lines `pd,ph,pw,qd,qh,qw` in millimeters (p moving, q fixed).
"""
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import SYNTH_DEFAULTS
from .errors import ConfigError, VolumeFormatError
from .grids import DisplacementField, LabelMap, LandmarkSet, Volume3D
from .fields import warp

logger = logging.getLogger(__name__)

KINDS = {"volume": "<f4", "labels": "<i4", "field": "<f4"}
CONTRASTS = ("identity", "inverted", "gamma")
GAMMA = 2.0
MAX_DISP_LIMIT = 0.4

PathLike = Union[str, Path]


# =============================================================================
# .vol Files
# =============================================================================

def manifest_path(path: PathLike) -> Path:
    return Path(str(path) + ".json")


def _read(path: PathLike, kind: str) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    path = Path(path)
    sidecar = manifest_path(path)
    if not sidecar.exists():
        raise VolumeFormatError(f"missing manifest {sidecar}")
    try:
        with open(sidecar, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        dims = tuple(int(s) for s in manifest["dims"])
        spacing = tuple(float(s) for s in manifest.get("spacing", (1.0, 1.0, 1.0)))
        found = manifest.get("kind", "volume")
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"malformed manifest {sidecar}: {e}") from e
    if found != kind:
        raise VolumeFormatError(f"{path} holds kind {found!r}, expected {kind!r}")
    if len(dims) != 3 or any(s < 1 for s in dims):
        raise VolumeFormatError(f"{sidecar}: invalid dims {dims}")

    try:
        payload = path.read_bytes()
    except OSError as e:
        raise VolumeFormatError(f"cannot read {path}: {e}") from e
    count = int(np.prod(dims)) * (3 if kind == "field" else 1)
    if len(payload) != 4 * count:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload) // 4} values, manifest dims {list(dims)} need {count}"
        )
    data = np.frombuffer(payload, dtype=KINDS[kind])
    shape = ((3,) if kind == "field" else ()) + dims
    return data.reshape(shape), spacing


def _write(path: PathLike, data: np.ndarray, spacing, kind: str) -> Path:
    path = Path(path)
    dims = list(data.shape[-3:])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(np.ascontiguousarray(data, dtype=KINDS[kind]).tobytes())
        with open(manifest_path(path), "w", encoding="utf-8") as f:
            json.dump({"dims": dims, "spacing": [float(s) for s in spacing], "kind": kind}, f)
    except OSError as e:
        raise VolumeFormatError(f"cannot write {path}: {e}") from e
    return path


def load_volume(path: PathLike) -> Volume3D:
    data, spacing = _read(path, "volume")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: volume contains non-finite values")
    return Volume3D(data, spacing)


def save_volume(v: Volume3D, path: PathLike) -> Path:
    return _write(path, v.data, v.spacing, "volume")


def load_labels(path: PathLike) -> LabelMap:
    data, spacing = _read(path, "labels")
    return LabelMap(data, spacing)


def save_labels(labels: LabelMap, path: PathLike) -> Path:
    return _write(path, labels.data, labels.spacing, "labels")


def load_field(path: PathLike) -> DisplacementField:
    data, _ = _read(path, "field")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: field contains non-finite values")
    return DisplacementField(data)


def save_field(u: DisplacementField, path: PathLike, spacing=(1.0, 1.0, 1.0)) -> Path:
    return _write(path, u.data, spacing, "field")


# =============================================================================
# Landmarks
# =============================================================================

def load_landmarks(path: PathLike) -> LandmarkSet:
    rows = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            for lineno, row in enumerate(csv.reader(f), start=1):
                if not row or not "".join(row).strip():
                    continue
                if len(row) != 6:
                    raise VolumeFormatError(f"{path}:{lineno}: expected 6 values, got {len(row)}")
                rows.append([float(x) for x in row])
    except OSError as e:
        raise VolumeFormatError(f"cannot read landmarks {path}: {e}") from e
    except ValueError as e:
        raise VolumeFormatError(f"{path}: non-numeric landmark value: {e}") from e
    table = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return LandmarkSet(table[:, :3], table[:, 3:])


def save_landmarks(landmarks: LandmarkSet, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for p, q in zip(landmarks.moving, landmarks.fixed):
            writer.writerow([repr(float(x)) for x in (*p, *q)])
    return path


# =============================================================================
# Synthetic Problems
# =============================================================================

@dataclass(frozen=True, eq=False)
class SynthProblem:
    """A registration pair with known ground truth.

    The moving image is `remapped` (the phantom under the contrast map) and the
    fixed image is warp(phantom, true_field), so true_field is the answer.
    """
    phantom: Volume3D
    labels: LabelMap
    true_field: DisplacementField
    remapped: Volume3D
    seed: int
    contrast: str
    fixed: Volume3D
    fixed_labels: LabelMap
    landmarks: LandmarkSet


def apply_contrast(data: np.ndarray, contrast: str) -> np.ndarray:
    """Monotone (identity, gamma) or inverting map applied voxelwise."""
    if contrast == "identity":
        return data.copy()
    if contrast == "inverted":
        return data.max() - data
    if contrast == "gamma":
        return np.power(np.clip(data, 0.0, None), GAMMA)
    raise ConfigError(f"contrast must be one of {CONTRASTS}, got {contrast!r}")


def _nested_shapes(dims, rng: np.random.Generator):
    """Voxel grid plus a classifier mapping continuous coordinates to nested-ellipsoid labels."""
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in dims], indexing="ij")
    center = [(s - 1) / 2.0 + rng.uniform(-0.05, 0.05) * s for s in dims]
    outer = [0.36 * s * rng.uniform(0.9, 1.1) for s in dims]
    shells = []
    for shrink in (1.0, 0.65, 0.35):
        axes = [r * shrink * rng.uniform(0.92, 1.08) for r in outer]
        shells.append((center, axes))

    def label_at(coords):
        labels = np.zeros(coords[0].shape, dtype=np.int32)
        for cls, (c, axes) in enumerate(shells, start=1):
            r2 = sum(((x - ci) / ai) ** 2 for x, ci, ai in zip(coords, c, axes))
            labels[r2 < 1.0] = cls
        return labels

    return grid, label_at


def _smooth_field(dims, rng: np.random.Generator, sigma: float, max_disp: float) -> np.ndarray:
    noise = rng.standard_normal((3,) + tuple(dims))
    # periodic smoothing keeps the field stationary, so no face or corner dominates the peak
    u = np.stack([gaussian_filter(noise[i], sigma, mode="wrap") for i in range(3)])
    peak = np.abs(u).max()
    if peak == 0.0 or max_disp == 0.0:
        return np.zeros_like(u)
    u *= max_disp / peak
    # diagonal dominance of I + grad(u) keeps every determinant positive
    row_sum = max(
        float(np.max(sum(np.abs(g) for g in np.gradient(u[i], axis=(0, 1, 2))))) for i in range(3)
    )
    if row_sum >= 0.9:
        u *= 0.85 / row_sum
    return u


def synth_problem(seed: int, dims=SYNTH_DEFAULTS["dims"], max_disp: float = SYNTH_DEFAULTS["max_disp"],
                  contrast: str = SYNTH_DEFAULTS["contrast"],
                  spacing=SYNTH_DEFAULTS["spacing"],
                  field_sigma: float = SYNTH_DEFAULTS["field_sigma"],
                  n_landmarks: int = SYNTH_DEFAULTS["landmarks"]) -> SynthProblem:
    """Deterministic phantom pair: nested ellipsoids, smooth random field, contrast map."""
    dims = tuple(int(s) for s in dims)
    if not 0.0 <= max_disp < MAX_DISP_LIMIT:
        raise ConfigError(f"max_disp must lie in [0, {MAX_DISP_LIMIT}), got {max_disp}")
    if contrast not in CONTRASTS:
        raise ConfigError(f"contrast must be one of {CONTRASTS}, got {contrast!r}")
    if any(s < 4 for s in dims):
        raise ConfigError(f"synthetic dims must be >= 4 per axis, got {dims}")
    rng = np.random.default_rng(seed)

    grid, label_at = _nested_shapes(dims, rng)
    labels = label_at(grid)
    intensity = np.array([0.1, 0.35, 0.6, 0.85])[labels]
    texture = gaussian_filter(rng.standard_normal(dims), 1.5, mode="nearest")
    texture *= 0.05 / max(texture.std(), 1e-12)
    phantom = gaussian_filter(intensity, 1.0, mode="nearest") + texture
    phantom = (phantom - phantom.min()) / (phantom.max() - phantom.min())

    u = _smooth_field(dims, rng, field_sigma, max_disp)
    true_field = DisplacementField(u)
    phantom_vol = Volume3D(phantom, spacing)
    fixed = warp(phantom_vol, true_field)
    # continuous shapes sampled at the displaced positions
    fixed_labels = label_at([g + u[i] for i, g in enumerate(grid)])

    lm = _plant_landmarks(rng, dims, true_field.data, np.asarray(spacing, dtype=np.float64), n_landmarks)
    problem = SynthProblem(
        phantom=phantom_vol,
        labels=LabelMap(labels, spacing),
        true_field=true_field,
        remapped=Volume3D(apply_contrast(phantom_vol.data, contrast), spacing),
        seed=int(seed),
        contrast=contrast,
        fixed=fixed,
        fixed_labels=LabelMap(fixed_labels, spacing),
        landmarks=lm,
    )
    logger.debug(f"synth_problem seed={seed} dims={dims} max|u|={true_field.max_abs():.4f} contrast={contrast}")
    return problem


def _plant_landmarks(rng: np.random.Generator, dims, u: np.ndarray, spacing: np.ndarray, n: int) -> LandmarkSet:
    """Fixed points q on interior voxels; moving points p = q + u(q) in mm."""
    if n <= 0:
        return LandmarkSet(np.zeros((0, 3)), np.zeros((0, 3)))
    margin = [max(1, s // 8) for s in dims]
    vox = np.stack([rng.integers(m, s - m, size=n) for m, s in zip(margin, dims)], axis=1)
    disp = u[:, vox[:, 0], vox[:, 1], vox[:, 2]].T.astype(np.float32).astype(np.float64)
    q = vox * spacing
    p = (vox + disp) * spacing
    return LandmarkSet(p, q)


def save_problem(problem: SynthProblem, out_dir: PathLike, prefix: str = "") -> dict:
    """Write every artifact of a synthetic problem; returns the written paths."""
    out_dir = Path(out_dir)
    spacing = problem.phantom.spacing
    paths = {
        "phantom": save_volume(problem.phantom, out_dir / f"{prefix}phantom.vol"),
        "moving": save_volume(problem.remapped, out_dir / f"{prefix}moving.vol"),
        "fixed": save_volume(problem.fixed, out_dir / f"{prefix}fixed.vol"),
        "labels": save_labels(problem.labels, out_dir / f"{prefix}labels.vol"),
        "fixed_labels": save_labels(problem.fixed_labels, out_dir / f"{prefix}fixed_labels.vol"),
        "field": save_field(problem.true_field, out_dir / f"{prefix}field.vol", spacing),
        "landmarks": save_landmarks(problem.landmarks, out_dir / f"{prefix}landmarks.csv"),
    }
    return {k: str(v) for k, v in paths.items()}


def load_pair_dir(directory: PathLike) -> list:
    """Pairs `<stem>moving.vol` / `<stem>fixed.vol` found in a directory, sorted by stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise VolumeFormatError(f"not a directory: {directory}")
    pairs = []
    for moving in sorted(directory.glob("*moving.vol")):
        fixed = moving.with_name(moving.name[: -len("moving.vol")] + "fixed.vol")
        if fixed.exists():
            pairs.append((load_volume(moving), load_volume(fixed)))
    return pairs