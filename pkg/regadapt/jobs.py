"""
Command implementations behind the CLI.

Each job loads its inputs, runs the pipeline and writes its outputs, returning
a result dictionary with `success`, `message`, `error` and `exit_code` keys.
Exit codes: 0 success, 1 input/I-O errors, 2 numerical aborts.

Jobs:
1. run_register - gated preprocess, backbone, instance optimization, metrics
2. run_pretrain - refiner pretraining on a pair directory or synthetic pairs
3. run_synth - write synthetic problems with known ground truth
4. run_evaluate - metric reports for one pair or a batch (optionally parallel)
5. run_baseline - backbone-only or iterated backbone vs the full pipeline
"""
import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .cascade import UNet3DConfig, init_cascade, load_cascade, save_cascade
from .config import (
    BACKBONE_DEFAULTS,
    FORMAT_VERSION,
    IO_DEFAULTS,
    PRETRAIN_DEFAULTS,
    STYLE_DEFAULTS,
    SYNTH_DEFAULTS,
    UNET_DEFAULTS,
    deep_merge,
    drop_unset,
    load_config_file,
)
from .errors import ConfigError, NumericalError, RegAdaptError
from .fields import endpoint_error, ndv
from .grids import DisplacementField, require_same_dims
from .losses import gate_lncc
from .metrics import MetricReport, aggregate, evaluate_pair
from .pipeline import (
    BackboneSpec,
    IOConfig,
    StyleTransferSpec,
    backbone_predict,
    gated_preprocess,
    instance_optimize,
    iterate_backbone,
    pretrain_refiners,
)
from .volume_io import (
    load_field,
    load_labels,
    load_landmarks,
    load_pair_dir,
    load_volume,
    save_field,
    save_problem,
    synth_problem,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2


# =============================================================================
# Run Configuration
# =============================================================================

DEFAULT_CONFIG = {
    "io": dict(IO_DEFAULTS),
    "unet": dict(UNET_DEFAULTS),
    "backbone": dict(BACKBONE_DEFAULTS),
    "style": dict(STYLE_DEFAULTS, reference=None),
    "pretrain": dict(PRETRAIN_DEFAULTS),
    "paths": {},
}


@dataclass
class RunConfig:
    """Everything one command needs: stage settings plus file paths."""
    io: IOConfig
    unet: UNet3DConfig
    backbone: BackboneSpec
    style: StyleTransferSpec
    pretrain: Dict[str, Any] = field(default_factory=lambda: dict(PRETRAIN_DEFAULTS))
    paths: Dict[str, Optional[str]] = field(default_factory=dict)
    style_reference: Optional[str] = None
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        merged = deep_merge(DEFAULT_CONFIG, data)
        version = merged.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        return cls(
            io=IOConfig.from_dict(merged["io"]),
            unet=UNet3DConfig.from_dict(merged["unet"]),
            backbone=BackboneSpec.from_dict(merged["backbone"]),
            style=StyleTransferSpec.from_dict(merged["style"]),
            pretrain=merged["pretrain"],
            paths=merged["paths"],
            style_reference=merged["style"].get("reference"),
        )

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "io": self.io.to_dict(),
            "unet": self.unet.to_dict(),
            "backbone": self.backbone.to_dict(),
            "style": dict(self.style.to_dict(), reference=self.style_reference),
            "pretrain": dict(self.pretrain),
            "paths": dict(self.paths),
        }

    def path(self, key: str) -> Optional[Path]:
        value = self.paths.get(key)
        return Path(value) if value else None

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if not self.paths.get(k)]
        if missing:
            raise ConfigError(f"missing required path(s): {', '.join(missing)}")
        for key in keys:
            if not Path(self.paths[key]).exists():
                raise ConfigError(f"{key} file not found: {self.paths[key]}")


def build_run_config(config_file: Optional[Path], overrides: Dict[str, Any]) -> RunConfig:
    """CLI flags > config file > built-in defaults."""
    layered = deep_merge(load_config_file(config_file), drop_unset(overrides))
    return RunConfig.from_dict(layered)


def _failure(action: str, e: Exception) -> Dict[str, Any]:
    code = EXIT_NUMERICAL if isinstance(e, (NumericalError, ArithmeticError)) else EXIT_INPUT
    error_msg = f"Failed to {action}: {e}"
    logger.error(error_msg)
    return {"success": False, "message": None, "error": error_msg, "exit_code": code}


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _make_cascade(cfg: RunConfig):
    checkpoint = cfg.path("checkpoint")
    if checkpoint is not None:
        return load_cascade(checkpoint)
    return init_cascade(cfg.unet, cfg.io.seed, cfg.io.variant, cfg.io.update_mode,
                        cfg.io.output_scale, cfg.io.scale_mode)


def _optional_inputs(cfg: RunConfig):
    labels = None
    if cfg.paths.get("moving_labels") and cfg.paths.get("fixed_labels"):
        labels = (load_labels(cfg.path("moving_labels")), load_labels(cfg.path("fixed_labels")))
    landmarks = load_landmarks(cfg.path("landmarks")) if cfg.paths.get("landmarks") else None
    return labels, landmarks


# =============================================================================
# register
# =============================================================================

def _load_and_gate(cfg: RunConfig):
    moving = load_volume(cfg.path("moving"))
    fixed = load_volume(cfg.path("fixed"))
    require_same_dims(moving, fixed)
    gate = gated_preprocess(moving, fixed, cfg.style, cfg.io.gate_window, cfg.io.tau,
                            cfg.io.gate_down, cfg.io.style_mode)
    return moving, fixed, gate


def _register_pair(cfg: RunConfig, gate, trace_path: Optional[Path]):
    labels, landmarks = _optional_inputs(cfg)
    phi0 = backbone_predict(cfg.backbone, gate.moving, gate.fixed)
    cascade = _make_cascade(cfg)

    if trace_path is not None:
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        with open(trace_path, "w", encoding="utf-8") as trace_file:
            phi_T, trace = instance_optimize(gate.moving, gate.fixed, phi0, cascade, cfg.io,
                                             labels=labels, trace_file=trace_file, gate=gate)
    else:
        phi_T, trace = instance_optimize(gate.moving, gate.fixed, phi0, cascade, cfg.io,
                                         labels=labels, gate=gate)
    return phi0, phi_T, trace, labels, landmarks


def run_register(cfg: RunConfig) -> Dict[str, Any]:
    """
    Register one pair and write the field, trace and report.

    Returns:
        dict: Result with success, message, error, exit_code keys plus
        `trace` (summary) and `report` (metrics dict or None)
    """
    try:
        cfg.require("moving", "fixed")
        out = cfg.path("out") or Path("field.vol")
        moving, _, gate = _load_and_gate(cfg)
        phi0, phi_T, trace, labels, landmarks = _register_pair(cfg, gate, cfg.path("trace"))
        save_field(phi_T, out, moving.spacing)

        metrics = None
        if labels is not None or landmarks is not None:
            metrics = evaluate_pair(
                cfg.paths.get("pair_id") or out.stem, phi_T,
                moving_labels=labels[0] if labels else None,
                fixed_labels=labels[1] if labels else None,
                landmarks=landmarks, spacing=moving.spacing, label_mode=cfg.io.label_interp,
            ).to_dict()
        report = {"format_version": FORMAT_VERSION, "trace": trace.summary(), "metrics": metrics,
                  "config": cfg.to_dict()}
        if metrics is not None or cfg.paths.get("report"):
            _write_json(cfg.path("report") or Path(str(out) + ".report.json"), report)

        if trace.error:
            return {
                "success": False,
                "message": f"Wrote best finite field to {out}",
                "error": f"Numerical abort: {trace.error}",
                "exit_code": EXIT_NUMERICAL,
                "trace": trace.summary(),
                "report": metrics,
                "entries": trace.entries,
            }
        return {
            "success": True,
            "message": f"Registered pair in {len(trace)} steps; field written to {out}",
            "error": None,
            "exit_code": EXIT_OK,
            "trace": trace.summary(),
            "report": metrics,
            "entries": trace.entries,
        }
    except (RegAdaptError, OSError, ValueError, ArithmeticError) as e:
        return _failure("register pair", e)


# =============================================================================
# pretrain
# =============================================================================

def _pretrain_pairs(data_dir: Optional[Path], synth: Dict[str, Any], seed: int) -> List[Tuple]:
    if data_dir is not None:
        return load_pair_dir(data_dir)
    count = int(synth.get("count", PRETRAIN_DEFAULTS["pairs"]))
    pairs = []
    for i in range(count):
        problem = synth_problem(seed + i, synth.get("dims", SYNTH_DEFAULTS["dims"]),
                                synth.get("max_disp", SYNTH_DEFAULTS["max_disp"]),
                                synth.get("contrast", SYNTH_DEFAULTS["contrast"]))
        pairs.append((problem.remapped, problem.fixed))
    return pairs


def run_pretrain(cfg: RunConfig, data_dir: Optional[Path] = None,
                 synth: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Pretrain the refinement cascade and write the checkpoint plus loss log.

    Args:
        cfg: run configuration; `paths.checkpoint` is the output checkpoint
        data_dir: directory of `*moving.vol` / `*fixed.vol` pairs
        synth: synthetic pair spec (count, dims, max_disp, contrast) used when no directory is given

    Returns:
        dict: Result with success, message, error, exit_code keys
    """
    try:
        checkpoint = cfg.path("checkpoint")
        if checkpoint is None:
            raise ConfigError("pretraining needs an output checkpoint path")
        pairs = _pretrain_pairs(data_dir, synth or {}, cfg.io.seed)
        if not pairs:
            raise ConfigError(f"empty dataset: no moving/fixed pairs found in {data_dir}")
        steps = int(cfg.pretrain["steps"])
        lr = float(cfg.pretrain["lr"])

        cascade = init_cascade(cfg.unet, cfg.io.seed, cfg.io.variant, cfg.io.update_mode,
                               cfg.io.output_scale, cfg.io.scale_mode)
        log_path = cfg.path("log") or Path(str(checkpoint) + ".loss.jsonl")
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as log_file:
            result = pretrain_refiners(pairs, cascade, steps=steps, lr=lr, seed=cfg.io.seed,
                                       lambda_reg=cfg.io.lambda_reg, window=cfg.io.lncc_window,
                                       log_file=log_file)
        save_cascade(result.cascade, checkpoint)
        return {
            "success": True,
            "message": f"Pretrained {steps} steps on {len(pairs)} pairs; checkpoint {checkpoint}",
            "error": None,
            "exit_code": EXIT_OK,
            "checkpoint": str(checkpoint),
            "loss_log": str(log_path),
            "skipped": result.skipped,
        }
    except (RegAdaptError, OSError, ValueError, ArithmeticError) as e:
        return _failure("pretrain refiners", e)


# =============================================================================
# synth
# =============================================================================

def run_synth(out_dir: Path, seed: int, dims=SYNTH_DEFAULTS["dims"], max_disp: float = SYNTH_DEFAULTS["max_disp"],
              contrast: str = SYNTH_DEFAULTS["contrast"], spacing=SYNTH_DEFAULTS["spacing"],
              landmarks: int = SYNTH_DEFAULTS["landmarks"], count: int = 1) -> Dict[str, Any]:
    """
    Generate synthetic problems and write every artifact under out_dir.

    Returns:
        dict: Result with success, message, error, exit_code keys plus per-problem
        paths, ndv of the true field and the gate LNCC of the pair
    """
    try:
        problems = []
        for i in range(count):
            problem = synth_problem(seed + i, dims, max_disp, contrast, spacing, n_landmarks=landmarks)
            prefix = f"{seed + i:04d}_" if count > 1 else ""
            paths = save_problem(problem, out_dir, prefix)
            problems.append({
                "seed": seed + i,
                "paths": paths,
                "ndv": ndv(problem.true_field),
                "max_abs_disp": problem.true_field.max_abs(),
                "gate_lncc": gate_lncc(problem.remapped, problem.fixed),
            })
        return {
            "success": True,
            "message": f"Wrote {count} synthetic problem(s) to {out_dir}",
            "error": None,
            "exit_code": EXIT_OK,
            "problems": problems,
        }
    except (RegAdaptError, OSError, ValueError) as e:
        return _failure("synthesize problem", e)


# =============================================================================
# evaluate
# =============================================================================

def _evaluate_one(item: Dict[str, Optional[str]], label_mode: str) -> MetricReport:
    u = load_field(item["field"])
    moving_labels = load_labels(item["moving_labels"]) if item.get("moving_labels") else None
    fixed_labels = load_labels(item["fixed_labels"]) if item.get("fixed_labels") else None
    landmarks = load_landmarks(item["landmarks"]) if item.get("landmarks") else None
    if (moving_labels is None or fixed_labels is None) and landmarks is None:
        raise ConfigError(f"pair {item.get('pair_id')}: needs labels and/or landmarks")
    spacing = fixed_labels.spacing if fixed_labels is not None else tuple(item.get("spacing") or (1.0, 1.0, 1.0))
    return evaluate_pair(item.get("pair_id") or Path(item["field"]).stem, u, moving_labels, fixed_labels,
                         landmarks, spacing, label_mode)


def read_batch(path: Path) -> List[Dict[str, Optional[str]]]:
    """Batch CSV with header pair_id,field,moving_labels,fixed_labels,landmarks (empty cells allowed)."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = [{k: (v or None) for k, v in row.items()} for row in csv.DictReader(f)]
    if not rows:
        raise ConfigError(f"batch file {path} lists no pairs")
    for row in rows:
        if not row.get("field"):
            raise ConfigError(f"batch row {row.get('pair_id')} has no field path")
    return rows


def write_csv(path: Path, reports: List[MetricReport]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MetricReport.CSV_FIELDS)
        for report in reports:
            writer.writerow(["" if v is None else v for v in report.csv_row()])
        if len(reports) > 1:
            writer.writerow(["aggregate"] + [aggregate([getattr(r, name) for r in reports])
                                             for name in MetricReport.CSV_FIELDS[1:]])
    return path


def run_evaluate(items: List[Dict[str, Optional[str]]], out_json: Optional[Path] = None,
                 out_csv: Optional[Path] = None, jobs: int = 1,
                 label_mode: str = IO_DEFAULTS["label_interp"]) -> Dict[str, Any]:
    """
    Compute metric reports for one or more registered pairs.

    Pairs are independent; with jobs > 1 they are evaluated in a thread pool.
    Output order always follows input order.

    Returns:
        dict: Result with success, message, error, exit_code keys plus `reports`
        and `aggregate` (mean ± std strings)
    """
    try:
        if not items:
            raise ConfigError("nothing to evaluate")
        for item in items:
            if not item.get("field") or not Path(item["field"]).exists():
                raise ConfigError(f"field file not found: {item.get('field')}")
        if jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                reports = list(pool.map(lambda item: _evaluate_one(item, label_mode), items))
        else:
            reports = [_evaluate_one(item, label_mode) for item in items]

        summary = {name: aggregate([getattr(r, name) for r in reports]) for name in MetricReport.CSV_FIELDS[1:]}
        if out_json is not None:
            payload = reports[0].to_dict() if len(reports) == 1 else {
                "reports": [r.to_dict() for r in reports], "aggregate": summary}
            _write_json(out_json, payload)
        if out_csv is not None:
            write_csv(out_csv, reports)
        return {
            "success": True,
            "message": f"Evaluated {len(reports)} pair(s)",
            "error": None,
            "exit_code": EXIT_OK,
            "reports": [r.to_dict() for r in reports],
            "aggregate": summary,
        }
    except (RegAdaptError, OSError, ValueError) as e:
        return _failure("evaluate", e)


# =============================================================================
# baseline
# =============================================================================

def run_baseline(cfg: RunConfig, strategy: str = "backbone-only", k: int = 1) -> Dict[str, Any]:
    """
    Run a backbone baseline and the full pipeline on the same pair.

    Args:
        cfg: run configuration; `paths.true_field` (optional) enables endpoint errors
        strategy: "backbone-only" or "iterate"
        k: backbone applications for the iterate strategy

    Returns:
        dict: Result with success, message, error, exit_code keys plus `comparison`
    """
    try:
        if strategy not in ("backbone-only", "iterate"):
            raise ConfigError(f"strategy must be 'backbone-only' or 'iterate', got {strategy!r}")
        cfg.require("moving", "fixed")
        moving, _, gate = _load_and_gate(cfg)
        if strategy == "iterate":
            baseline = iterate_backbone(cfg.backbone, gate.moving, gate.fixed, k)
        else:
            baseline = backbone_predict(cfg.backbone, gate.moving, gate.fixed)

        phi0, phi_T, trace, labels, landmarks = _register_pair(cfg, gate, cfg.path("trace"))
        true_field = load_field(cfg.path("true_field")) if cfg.paths.get("true_field") else None

        def arm(name: str, u) -> Dict[str, Any]:
            metrics = None
            if labels is not None or landmarks is not None:
                metrics = evaluate_pair(name, u, labels[0] if labels else None, labels[1] if labels else None,
                                        landmarks, moving.spacing, cfg.io.label_interp).to_dict()
            return {
                "endpoint_error": endpoint_error(u, true_field) if true_field is not None else None,
                "ndv": ndv(u),
                "metrics": metrics,
            }

        comparison = {
            "format_version": FORMAT_VERSION,
            "strategy": strategy,
            "k": k if strategy == "iterate" else None,
            "backbone": cfg.backbone.kind,
            "baseline": arm("baseline", baseline),
            "pipeline": arm("pipeline", phi_T),
            "gate_fired": gate.fired,
            "style_applied": gate.styled,
            "pipeline_error": trace.error,
        }
        if true_field is not None:
            comparison["zero_field_endpoint_error"] = endpoint_error(DisplacementField.zeros(phi0.dims), true_field)
        out = cfg.path("comparison") or Path("comparison.json")
        _write_json(out, comparison)
        return {
            "success": trace.error is None,
            "message": f"Wrote comparison to {out}",
            "error": trace.error,
            "exit_code": EXIT_NUMERICAL if trace.error else EXIT_OK,
            "comparison": comparison,
        }
    except (RegAdaptError, OSError, ValueError, ArithmeticError) as e:
        return _failure("run baseline", e)
