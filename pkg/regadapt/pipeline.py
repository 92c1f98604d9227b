"""
End-to-end adaptation pipeline.

1. backbone_predict: frozen initial field phi0 (zero, from file, or a small
   variational stand-in solver)
2. gated_preprocess: low-resolution LNCC gate; when it fires both images go
   through style transfer (monotone quantile remap or an external command)
3. instance_optimize: Adam over the cascade parameters only, best-loss phi_T
4. pretrain_refiners / iterate_backbone: pretraining and the iterated-backbone
   baseline
"""
import json
import logging
import shlex
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import AdamState, DiffTensor, adam_step, warmup_lr
from .cascade import RefineCascade, cascade_forward, save_cascade
from .config import BACKBONE_DEFAULTS, IO_DEFAULTS, PRETRAIN_DEFAULTS, STYLE_DEFAULTS, TRACE_TIMING
from .errors import ConfigError, NumericalError, ShapeError, StyleTransferError
from .fields import compose, field_tensor, ndv, tensor_to_field, upsample_field, volume_tensor, warp
from .grids import DisplacementField, LabelMap, Volume3D, require_same_dims
from .losses import diffusion_reg_tensor, gate_lncc, lncc_tensor, total_loss
from .metrics import dice, warp_labels
from .volume_io import load_field, load_volume, save_volume

logger = logging.getLogger(__name__)

BACKBONE_KINDS = ("zero", "file", "variational")
STYLE_KINDS = ("monotone_remap", "external_command", "identity")
STYLE_MODES = ("gated", "always", "never")
PROFILE_SHELLS = 16


# =============================================================================
# Specs and Config
# =============================================================================

@dataclass
class BackboneSpec:
    """Frozen initializer f_theta: zero, file(path) or variational(levels, iters, step, smooth_sigma)."""
    kind: str = BACKBONE_DEFAULTS["kind"]
    path: Optional[str] = BACKBONE_DEFAULTS["path"]
    levels: int = BACKBONE_DEFAULTS["levels"]
    iters: int = BACKBONE_DEFAULTS["iters"]
    step: float = BACKBONE_DEFAULTS["step"]
    smooth_sigma: float = BACKBONE_DEFAULTS["smooth_sigma"]
    lambda_reg: float = BACKBONE_DEFAULTS["lambda_reg"]
    window: int = BACKBONE_DEFAULTS["window"]

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"backbone kind must be one of {BACKBONE_KINDS}, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("file backbone needs a path")
        if self.kind == "variational":
            if self.levels < 1 or self.iters < 1 or self.step <= 0 or self.smooth_sigma <= 0:
                raise ConfigError("variational backbone hyperparameters must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneSpec":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReferenceHistogram:
    """Intensity histogram plus radial profile of a reference-contrast volume."""
    edges: np.ndarray
    counts: np.ndarray
    profile: np.ndarray

    @classmethod
    def from_volume(cls, v: Volume3D, bins: int = STYLE_DEFAULTS["bins"]) -> "ReferenceHistogram":
        data = v.data.astype(np.float64)
        if data.max() == data.min():
            raise StyleTransferError("reference volume is constant")
        counts, edges = np.histogram(data, bins=bins)
        return cls(edges=edges, counts=counts.astype(np.float64), profile=radial_profile(data))

    def inverse_cdf(self, q: np.ndarray) -> np.ndarray:
        cdf = np.concatenate([[0.0], np.cumsum(self.counts)]) / self.counts.sum()
        return np.interp(q, cdf, self.edges)

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])


@dataclass
class StyleTransferSpec:
    """Style transfer T_psi: monotone_remap(reference), external_command(argv) or identity."""
    kind: str = STYLE_DEFAULTS["kind"]
    argv: Optional[List[str]] = STYLE_DEFAULTS["argv"]
    bins: int = STYLE_DEFAULTS["bins"]
    reference: Optional[ReferenceHistogram] = None

    def __post_init__(self):
        if self.kind not in STYLE_KINDS:
            raise ConfigError(f"style kind must be one of {STYLE_KINDS}, got {self.kind!r}")
        if isinstance(self.argv, str):
            self.argv = shlex.split(self.argv)
        if self.kind == "external_command" and not self.argv:
            raise ConfigError("external_command style needs an argv template")

    @classmethod
    def from_dict(cls, data: dict) -> "StyleTransferSpec":
        known = {k: v for k, v in data.items() if k in ("kind", "argv", "bins")}
        spec = cls(**known)
        if data.get("reference"):
            spec.reference = ReferenceHistogram.from_volume(load_volume(data["reference"]), spec.bins)
        return spec

    def to_dict(self) -> dict:
        return {"kind": self.kind, "argv": self.argv, "bins": self.bins}


@dataclass
class IOConfig:
    """Instance optimization settings; defaults are the published hyperparameters."""
    steps: int = IO_DEFAULTS["steps"]
    base_lr: float = IO_DEFAULTS["base_lr"]
    warmup: int = IO_DEFAULTS["warmup"]
    lambda_reg: float = IO_DEFAULTS["lambda_reg"]
    lncc_window: int = IO_DEFAULTS["lncc_window"]
    gate_window: int = IO_DEFAULTS["gate_window"]
    tau: float = IO_DEFAULTS["tau"]
    gate_down: int = IO_DEFAULTS["gate_down"]
    seed: int = IO_DEFAULTS["seed"]
    variant: str = IO_DEFAULTS["variant"]
    update_mode: str = IO_DEFAULTS["update_mode"]
    scale_mode: str = IO_DEFAULTS["scale_mode"]
    output_scale: float = IO_DEFAULTS["output_scale"]
    style_mode: str = IO_DEFAULTS["style_mode"]
    dice_every: int = IO_DEFAULTS["dice_every"]
    label_interp: str = IO_DEFAULTS["label_interp"]
    trace_timing: bool = TRACE_TIMING

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not -1.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (-1, 1), got {self.tau}")
        for name in ("lncc_window", "gate_window"):
            value = getattr(self, name)
            if value < 1 or value % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {value}")
        if self.style_mode not in STYLE_MODES:
            raise ConfigError(f"style_mode must be one of {STYLE_MODES}, got {self.style_mode!r}")
        if self.dice_every < 0 or self.warmup < 0 or self.base_lr <= 0 or self.gate_down < 1:
            raise ConfigError("dice_every/warmup must be >= 0, base_lr > 0 and gate_down >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "IOConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IOTrace:
    """Per-step loss records of one instance optimization run."""
    entries: List[dict] = field(default_factory=list)
    gate_fired: Optional[bool] = None
    gate_value: Optional[float] = None
    style_applied: Optional[bool] = None
    style_mode: Optional[str] = None
    best_step: Optional[int] = None
    best_total: Optional[float] = None
    final_ndv: Optional[float] = None
    error: Optional[str] = None
    selection: str = "best_loss"

    def __len__(self) -> int:
        return len(self.entries)

    def summary(self) -> dict:
        data = asdict(self)
        data.pop("entries")
        data["steps"] = len(self.entries)
        return data

    def write_jsonl(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for entry in self.entries:
                f.write(json.dumps(entry) + "\n")
        return path


# =============================================================================
# Backbone
# =============================================================================

def backbone_predict(spec: BackboneSpec, source: Volume3D, target: Volume3D) -> DisplacementField:
    """phi0 from the frozen initializer."""
    dims = require_same_dims(source, target)
    if spec.kind == "zero":
        return DisplacementField.zeros(dims)
    if spec.kind == "file":
        u = load_field(spec.path)
        if u.dims != dims:
            raise ShapeError(f"backbone field {spec.path} has dims {u.dims}, images have {dims}")
        return u
    return _variational(spec, source, target)


def _variational(spec: BackboneSpec, source: Volume3D, target: Volume3D) -> DisplacementField:
    """Coarse-to-fine normalized gradient descent on -LNCC + lambda * diffusion, smoothing u after each step."""
    a_full, b_full = volume_tensor(source), volume_tensor(target)
    u = None
    for level in range(spec.levels):
        factor = 2 ** (spec.levels - 1 - level)
        a = ad.avg_pool3d(a_full, factor)
        b = ad.avg_pool3d(b_full, factor)
        if u is None:
            u = np.zeros((1, 3) + a.spatial, dtype=np.float32)
        else:
            u = upsample_field(DiffTensor(u), size=a.spatial).data
        step = spec.step / factor
        field_sigma = spec.smooth_sigma / factor
        prev = np.inf
        loss_value = np.nan
        for _ in range(spec.iters):
            ut = DiffTensor(u, requires_grad=True)
            sim, _ = lncc_tensor(ad.warp(a, ut), b, spec.window)
            loss = ad.add(ad.neg(sim), ad.scale(diffusion_reg_tensor(ut), spec.lambda_reg))
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericalError(f"variational backbone diverged at level {level}")
            if loss_value > prev:
                step *= 0.5
            prev = loss_value
            ad.backward(loss)
            g = np.stack([gaussian_filter(ut.grad[0, i].astype(np.float64), spec.smooth_sigma, mode="nearest")
                          for i in range(3)])
            peak = np.abs(g).max()
            if peak > 0:
                u = u - step * g[None] / peak
            # the field itself is smoothed after every step, sigma in full-resolution voxels
            u = np.stack([gaussian_filter(u[0, i].astype(np.float64), field_sigma, mode="nearest")
                          for i in range(3)])[None].astype(np.float32)
        logger.info(f"variational backbone level {level} (x1/{factor}): loss={loss_value:.5f}")
    return DisplacementField(u[0])


def iterate_backbone(spec: BackboneSpec, source: Volume3D, target: Volume3D, k: int) -> DisplacementField:
    """phi <- compose(phi, f(source o phi, target)), k times from the identity."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    phi = DisplacementField.zeros(require_same_dims(source, target))
    for i in range(k):
        delta = backbone_predict(spec, warp(source, phi), target)
        phi = compose(phi, delta)
        logger.debug(f"iterate_backbone round {i + 1}/{k}: max|u|={phi.max_abs():.4f}")
    return phi


# =============================================================================
# Style Transfer
# =============================================================================

def radial_profile(data: np.ndarray, shells: int = PROFILE_SHELLS) -> np.ndarray:
    """Mean intensity in concentric shells of normalized radius around the volume center."""
    axes = [(np.arange(s) - (s - 1) / 2.0) / max(s / 2.0, 1.0) for s in data.shape]
    grid = np.meshgrid(*axes, indexing="ij")
    radius = np.sqrt(sum(g ** 2 for g in grid))
    shell = np.minimum((radius / radius.max() * shells).astype(int), shells - 1)
    sums = np.bincount(shell.ravel(), weights=data.ravel(), minlength=shells)
    counts = np.bincount(shell.ravel(), minlength=shells)
    return sums / np.maximum(counts, 1)


def monotone_remap(v: Volume3D, reference: ReferenceHistogram) -> Volume3D:
    """Quantile-map v onto the reference histogram, flipping inverted contrast first."""
    data = v.data.astype(np.float64)
    if data.max() == data.min():
        raise StyleTransferError("cannot remap a constant volume")
    profile = radial_profile(data)
    if profile.std() > 0 and reference.profile.std() > 0:
        if np.corrcoef(profile, reference.profile)[0, 1] < 0:
            logger.debug("monotone_remap: inverted contrast detected, flipping")
            data = data.max() - data
    ranks = rankdata(data.ravel(), method="average")
    quantiles = (ranks - 0.5) / ranks.size
    return v.with_data(reference.inverse_cdf(quantiles).reshape(v.dims))


def run_external_style(argv: Sequence[str], v: Volume3D, timeout: Optional[float] = None) -> Volume3D:
    """Run an external transfer command with `{in}`/`{out}` placeholders on `.vol` files."""
    with tempfile.TemporaryDirectory(prefix="regadapt-style-") as tmp:
        src = Path(tmp) / "in.vol"
        dst = Path(tmp) / "out.vol"
        save_volume(v, src)
        command = [arg.replace("{in}", str(src)).replace("{out}", str(dst)) for arg in argv]
        logger.debug(f"style command: {command}")
        try:
            result = subprocess.run(command, capture_output=True, text=True, timeout=timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise StyleTransferError(f"style command failed to run: {e}") from e
        if result.returncode != 0:
            raise StyleTransferError(
                f"style command exited with status {result.returncode}: {result.stderr.strip()[:500]}"
            )
        try:
            out = load_volume(dst)
        except Exception as e:
            raise StyleTransferError(f"style command produced no readable volume: {e}") from e
    if out.dims != v.dims:
        raise StyleTransferError(f"style command returned dims {out.dims}, expected {v.dims}")
    return out


def apply_style(style: StyleTransferSpec, v: Volume3D, reference_source: Volume3D) -> Volume3D:
    if style.kind == "identity":
        return v
    if style.kind == "external_command":
        return run_external_style(style.argv, v)
    reference = style.reference or ReferenceHistogram.from_volume(reference_source, style.bins)
    return monotone_remap(v, reference)


@dataclass
class GateResult:
    """`fired` is the raw LNCC decision; `styled` says whether style transfer ran (it also follows style_mode)."""
    moving: Volume3D
    fixed: Volume3D
    fired: bool
    value: float
    styled: bool = False
    mode: str = IO_DEFAULTS["style_mode"]


def gated_preprocess(source: Volume3D, target: Volume3D, style: StyleTransferSpec,
                     window: int = IO_DEFAULTS["gate_window"], tau: float = IO_DEFAULTS["tau"],
                     down: int = IO_DEFAULTS["gate_down"], mode: str = IO_DEFAULTS["style_mode"]) -> GateResult:
    """Route both images through style transfer when the modality gate fires, or per the always/never modes."""
    require_same_dims(source, target)
    if mode not in STYLE_MODES:
        raise ConfigError(f"style_mode must be one of {STYLE_MODES}, got {mode!r}")
    value = gate_lncc(source, target, window, down)
    fired = bool(value < tau)
    styled = {"gated": fired, "always": True, "never": False}[mode]
    logger.info(f"modality gate: lncc={value:.4f} tau={tau} fired={fired} mode={mode} styled={styled}")
    if not styled:
        return GateResult(source, target, fired, value, False, mode)
    # the fixed image defines the reference contrast unless one is configured
    moved = apply_style(style, source, target)
    fixed = apply_style(style, target, target)
    require_same_dims(moved, source)
    require_same_dims(fixed, target)
    return GateResult(moved, fixed, fired, value, True, mode)


# =============================================================================
# Instance Optimization
# =============================================================================

def _trace_dice(phi: DiffTensor, labels: Tuple[LabelMap, LabelMap], mode: str) -> Optional[float]:
    moving_labels, fixed_labels = labels
    warped = warp_labels(moving_labels, tensor_to_field(phi), mode)
    return dice(warped, fixed_labels)["mean"]


def instance_optimize(source: Volume3D, target: Volume3D, phi0: DisplacementField, cascade: RefineCascade,
                      cfg: IOConfig, labels: Optional[Tuple[LabelMap, LabelMap]] = None,
                      trace_file: Optional[IO[str]] = None,
                      gate: Optional[GateResult] = None) -> Tuple[DisplacementField, IOTrace]:
    """
    Optimize the cascade parameters for one pair; phi0 stays frozen.

    `source`/`target` are the images used for similarity (the style-transferred
    pair when style transfer ran). Each step records the pre-update loss, then
    backpropagates and takes one Adam step. Returns the best-loss phi_T.
    A non-finite loss or gradient stops the run and sets trace.error.
    """
    require_same_dims(source, target, phi0)
    trace = IOTrace()
    if gate is not None:
        trace.gate_fired, trace.gate_value = gate.fired, gate.value
        trace.style_applied, trace.style_mode = gate.styled, gate.mode

    phi0_t = field_tensor(phi0)
    a, b = volume_tensor(source), volume_tensor(target)
    params = cascade.parameters()
    state = AdamState()
    best_field: Optional[np.ndarray] = None

    logger.info(f"instance optimization: {cfg.steps} steps, {len(params)} tensors, variant={cascade.variant}")
    for step in range(1, cfg.steps + 1):
        started = time.perf_counter()
        out = cascade_forward(phi0_t, a, b, cascade)
        loss, report = total_loss(out.stage_warps, b, out.phi_T, cfg.lambda_reg, cfg.lncc_window)
        if not np.isfinite(report.total):
            trace.error = f"non-finite loss at step {step}"
            logger.error(trace.error)
            break

        if best_field is None or report.total < trace.best_total:
            best_field = out.phi_T.data[0].copy()
            trace.best_total, trace.best_step = report.total, step

        score = None
        if labels is not None and cfg.dice_every > 0 and (step == 1 or step % cfg.dice_every == 0):
            score = _trace_dice(out.phi_T, labels, cfg.label_interp)

        cascade.zero_grad()
        ad.backward(loss)
        try:
            adam_step(params, [p.grad for p in params], state, cfg.base_lr, cfg.warmup)
        except NumericalError as e:
            trace.error = f"step {step}: {e}"
            logger.error(trace.error)
        entry = {
            "step": step,
            "sim": report.sim,
            "lncc": report.lncc,
            "reg": report.reg,
            "total": report.total,
            "lr": warmup_lr(cfg.base_lr, step, cfg.warmup),
            "dice": score,
            "elapsed_ms": round(1000.0 * (time.perf_counter() - started), 3) if cfg.trace_timing else None,
        }
        trace.entries.append(entry)
        if trace_file is not None:
            trace_file.write(json.dumps(entry) + "\n")
            trace_file.flush()
        logger.debug(f"step {step}: total={report.total:.6f} sim={report.sim} reg={report.reg:.6f}")
        if trace.error:
            break

    phi_T = phi0 if best_field is None else DisplacementField(best_field)
    trace.final_ndv = ndv(phi_T) if min(phi_T.dims) >= 2 else None
    logger.info(f"instance optimization done: best step {trace.best_step}, total={trace.best_total}")
    return phi_T, trace


# =============================================================================
# Pretraining
# =============================================================================

@dataclass
class PretrainResult:
    cascade: RefineCascade
    losses: List[dict] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)


def pretrain_refiners(problems: Sequence[Tuple[Volume3D, Volume3D]], cascade: RefineCascade,
                      steps: int = PRETRAIN_DEFAULTS["steps"], lr: float = PRETRAIN_DEFAULTS["lr"],
                      seed: int = IO_DEFAULTS["seed"], lambda_reg: float = IO_DEFAULTS["lambda_reg"],
                      window: int = IO_DEFAULTS["lncc_window"],
                      phi0s: Optional[Sequence[DisplacementField]] = None,
                      checkpoint: Optional[Path] = None,
                      log_file: Optional[IO[str]] = None) -> PretrainResult:
    """Round-robin over a seeded shuffle of the pairs, one fixed-lr Adam step per pair."""
    if not problems:
        raise ConfigError("pretraining needs at least one image pair")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    order = np.random.default_rng(seed).permutation(len(problems))
    params = cascade.parameters()
    state = AdamState()
    result = PretrainResult(cascade)

    for step in range(1, steps + 1):
        index = int(order[(step - 1) % len(order)])
        source, target = problems[index]
        phi0 = phi0s[index] if phi0s is not None else DisplacementField.zeros(source.dims)
        out = cascade_forward(phi0, source, target, cascade)
        loss, report = total_loss(out.stage_warps, volume_tensor(target), out.phi_T, lambda_reg, window)
        record = {"step": step, "pair": index, "total": report.total, "skipped": False}
        if not np.isfinite(report.total):
            logger.warning(f"pretrain step {step}: non-finite loss on pair {index}, skipped")
            record["skipped"] = True
            record["total"] = None
            result.skipped.append(step)
        else:
            cascade.zero_grad()
            ad.backward(loss)
            try:
                adam_step(params, [p.grad for p in params], state, lr, 0)
            except NumericalError as e:
                logger.warning(f"pretrain step {step}: {e}, skipped")
                record["skipped"] = True
                result.skipped.append(step)
        result.losses.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
        if step % 100 == 0:
            logger.info(f"pretrain step {step}/{steps}: total={report.total:.6f}")

    if checkpoint is not None:
        save_cascade(cascade, checkpoint)
    return result
