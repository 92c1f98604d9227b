#!/usr/bin/env python3
"""
regadapt CLI - deformable registration with instance-optimized refinement

Usage:
    regadapt synth --out-dir data/ --seed 7              # synthetic pair + ground truth
    regadapt register --moving m.vol --fixed f.vol       # full pipeline
    regadapt pretrain --checkpoint ckpt.bin              # refiner pretraining
    regadapt evaluate --field u.vol --moving-labels ...  # metric report
    regadapt baseline --strategy iterate --k 3 ...       # baseline vs pipeline

Command results go to stdout; logs and error messages go to stderr.
Exit codes: 0 success, 1 input/I-O error, 2 numerical abort.
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click

from regadapt.config import (
    BACKBONE_DEFAULTS,
    DEFAULT_SEED,
    IO_DEFAULTS,
    LOG_LEVEL,
    PRETRAIN_DEFAULTS,
    SYNTH_DEFAULTS,
    UNET_DEFAULTS,
)
from regadapt.errors import RegAdaptError
from regadapt.jobs import (
    EXIT_INPUT,
    build_run_config,
    read_batch,
    run_baseline,
    run_evaluate,
    run_pretrain,
    run_register,
    run_synth,
)

# Fix Windows encoding
if sys.platform == 'win32':
    os.system('')
    if hasattr(sys.stdout, 'reconfigure'):
        sys.stdout.reconfigure(encoding='utf-8')

# Try Rich for fancy output
try:
    from rich.console import Console
    from rich.table import Table
    from rich.panel import Panel
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# ═══════════════════════════════════════════════════════════════════════════════
# COLOR HELPERS
# ═══════════════════════════════════════════════════════════════════════════════

def _c256(code: int) -> str:
    return f"\033[38;5;{code}m"

RESET = "\033[0m"
BOLD = "\033[1m"
DIM = "\033[2m"

GREEN = _c256(82)
RED = _c256(196)
CYAN = _c256(87)
GOLD = _c256(220)

# ═══════════════════════════════════════════════════════════════════════════════
# CLI GROUP
# ═══════════════════════════════════════════════════════════════════════════════

class RegAdaptContext:
    """Context object for the regadapt CLI."""
    def __init__(self):
        self.verbose = False
        self.as_json = False

pass_context = click.make_pass_decorator(RegAdaptContext, ensure=True)


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _console() -> Optional["Console"]:
    return Console() if RICH_AVAILABLE else None


def finish(ctx: RegAdaptContext, result: Dict[str, Any], render=None) -> None:
    """Print the result (JSON or human summary) and exit with its code."""
    if ctx.as_json:
        click.echo(json.dumps({k: v for k, v in result.items() if k != "entries"}, indent=2, default=str))
    elif render is not None and result.get("success"):
        render(result)
    elif result.get("message"):
        click.echo(result["message"])
    if result.get("error"):
        click.echo(f"{RED}✗{RESET} {result['error']}", err=True)
    sys.exit(result.get("exit_code", 0))


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug logging on stderr')
@click.option('--json', 'as_json', is_flag=True, help='Print the raw result dictionary as JSON')
@click.pass_context
def cli(ctx, verbose, as_json):
    """
    regadapt - deformable 3D registration with a frozen backbone,
    gated contrast normalization and instance-optimized refinement.

    \b
    COMMANDS:
      synth      Generate a synthetic pair with ground truth
      register   Run the full pipeline on one pair
      pretrain   Pretrain the refinement cascade
      evaluate   Dice / HD95 / TRE / NDV reports
      baseline   Backbone-only or iterated backbone vs the pipeline

    Defaults follow the published settings: 50 IO steps, Adam lr 5e-4 with
    10 warmup steps, lambda 0.1, LNCC window 9, gate window 11, tau 0.4,
    output scale 0.05. Precedence: flags > --config file > defaults.
    """
    ctx.ensure_object(RegAdaptContext)
    ctx.obj.verbose = verbose
    ctx.obj.as_json = as_json
    configure_logging(verbose)

# ═══════════════════════════════════════════════════════════════════════════════
# SHARED OPTIONS
# ═══════════════════════════════════════════════════════════════════════════════

def pipeline_options(f):
    """Options shared by `register` and `baseline`; all default to None so unset flags fall through."""
    options = [
        click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help='JSON config file (flags override it)'),
        click.option('--moving', type=click.Path(path_type=Path), help='Moving image I_A (.vol)'),
        click.option('--fixed', type=click.Path(path_type=Path), help='Fixed image I_B (.vol)'),
        click.option('--out', type=click.Path(path_type=Path), help='Output field (.vol) [default: field.vol]'),
        click.option('--trace', type=click.Path(path_type=Path), help='Per-step trace (JSON lines)'),
        click.option('--report', type=click.Path(path_type=Path), help='Report JSON [default: <out>.report.json]'),
        click.option('--moving-labels', type=click.Path(path_type=Path), help='Moving label map (.vol)'),
        click.option('--fixed-labels', type=click.Path(path_type=Path), help='Fixed label map (.vol)'),
        click.option('--landmarks', type=click.Path(path_type=Path), help='Landmark CSV pd,ph,pw,qd,qh,qw (mm)'),
        click.option('--checkpoint', type=click.Path(path_type=Path), help='Pretrained cascade checkpoint'),
        click.option('--backbone', type=click.Choice(['zero', 'file', 'variational']),
                     help=f"Initializer phi0 [default: {BACKBONE_DEFAULTS['kind']}]"),
        click.option('--backbone-path', type=click.Path(path_type=Path), help='Field file for --backbone file'),
        click.option('--backbone-levels', type=int, help=f"Variational levels [default: {BACKBONE_DEFAULTS['levels']}]"),
        click.option('--backbone-iters', type=int, help=f"Variational iterations per level [default: {BACKBONE_DEFAULTS['iters']}]"),
        click.option('--style', type=click.Choice(['monotone_remap', 'external_command', 'identity']),
                     help='Style transfer [default: monotone_remap]'),
        click.option('--style-command', help='External style command with {in} and {out} placeholders'),
        click.option('--style-reference', type=click.Path(path_type=Path),
                     help='Reference-contrast volume for monotone_remap [default: the fixed image]'),
        click.option('--style-mode', type=click.Choice(['gated', 'always', 'never']),
                     help=f"Style routing [default: {IO_DEFAULTS['style_mode']}]"),
        click.option('--steps', type=int, help=f"IO steps [default: {IO_DEFAULTS['steps']}, published]"),
        click.option('--lr', type=float, help=f"Adam base lr [default: {IO_DEFAULTS['base_lr']}, published]"),
        click.option('--warmup', type=int, help=f"Linear warmup steps [default: {IO_DEFAULTS['warmup']}, published]"),
        click.option('--lambda-reg', type=float, help=f"Diffusion weight [default: {IO_DEFAULTS['lambda_reg']}, published]"),
        click.option('--lncc-window', type=int, help=f"Loss LNCC window [default: {IO_DEFAULTS['lncc_window']}, published]"),
        click.option('--gate-window', type=int, help=f"Gate LNCC window [default: {IO_DEFAULTS['gate_window']}, published]"),
        click.option('--tau', type=float, help=f"Gate threshold [default: {IO_DEFAULTS['tau']}, published]"),
        click.option('--gate-down', type=int, help=f"Gate downsampling factor [default: {IO_DEFAULTS['gate_down']}]"),
        click.option('--seed', type=int, help=f"Random seed [default: {DEFAULT_SEED}, env REGADAPT_SEED]"),
        click.option('--variant', type=click.Choice(['cascade', 'single']),
                     help=f"Refiner variant [default: {IO_DEFAULTS['variant']}]"),
        click.option('--update-mode', type=click.Choice(['compose', 'add']),
                     help=f"Field update [default: {IO_DEFAULTS['update_mode']}]"),
        click.option('--scale-mode', type=click.Choice(['finest_residual', 'all_residuals']),
                     help=f"Where output scaling applies [default: {IO_DEFAULTS['scale_mode']}]"),
        click.option('--output-scale', type=float,
                     help=f"Residual magnitude scaling [default: {IO_DEFAULTS['output_scale']}, published]"),
        click.option('--dice-every', type=int, help=f"Trace Dice period, 0 disables [default: {IO_DEFAULTS['dice_every']}]"),
        click.option('--label-interp', type=click.Choice(['nearest', 'soft']),
                     help=f"Label transport [default: {IO_DEFAULTS['label_interp']}]"),
        click.option('--base-channels', type=int, help=f"U-Net base channels [default: {UNET_DEFAULTS['base_channels']}, published]"),
        click.option('--depth', type=int, help=f"U-Net depth [default: {UNET_DEFAULTS['depth']}, published]"),
        click.option('--instance-norm/--no-instance-norm', default=None, help='Instance norm in the refiners [default: off]'),
        click.option('--trace-timing/--no-trace-timing', default=None,
                     help='Record elapsed_ms per step [default: off, env REGADAPT_TRACE_TIMING]'),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def pipeline_overrides(kw: Dict[str, Any]) -> Dict[str, Any]:
    """Map flag values onto the nested run-config layout."""
    return {
        "io": {
            "steps": kw.get('steps'),
            "base_lr": kw.get('lr'),
            "warmup": kw.get('warmup'),
            "lambda_reg": kw.get('lambda_reg'),
            "lncc_window": kw.get('lncc_window'),
            "gate_window": kw.get('gate_window'),
            "tau": kw.get('tau'),
            "gate_down": kw.get('gate_down'),
            "seed": kw.get('seed'),
            "variant": kw.get('variant'),
            "update_mode": kw.get('update_mode'),
            "scale_mode": kw.get('scale_mode'),
            "output_scale": kw.get('output_scale'),
            "style_mode": kw.get('style_mode'),
            "dice_every": kw.get('dice_every'),
            "label_interp": kw.get('label_interp'),
            "trace_timing": kw.get('trace_timing'),
        },
        "unet": {
            "base_channels": kw.get('base_channels'),
            "depth": kw.get('depth'),
            "instance_norm": kw.get('instance_norm'),
        },
        "backbone": {
            "kind": kw.get('backbone'),
            "path": _str(kw.get('backbone_path')),
            "levels": kw.get('backbone_levels'),
            "iters": kw.get('backbone_iters'),
        },
        "style": {
            "kind": kw.get('style'),
            "argv": kw.get('style_command'),
            "reference": _str(kw.get('style_reference')),
        },
        "paths": {
            "moving": _str(kw.get('moving')),
            "fixed": _str(kw.get('fixed')),
            "out": _str(kw.get('out')),
            "trace": _str(kw.get('trace')),
            "report": _str(kw.get('report')),
            "moving_labels": _str(kw.get('moving_labels')),
            "fixed_labels": _str(kw.get('fixed_labels')),
            "landmarks": _str(kw.get('landmarks')),
            "checkpoint": _str(kw.get('checkpoint')),
            "true_field": _str(kw.get('true_field')),
            "comparison": _str(kw.get('comparison')),
        },
    }


def _str(value) -> Optional[str]:
    return None if value is None else str(value)


def load_run_config(config_file: Optional[Path], overrides: Dict[str, Any]):
    """Build the run config or exit 1 with the reason on stderr."""
    try:
        return build_run_config(config_file, overrides)
    except (RegAdaptError, OSError, ValueError, TypeError) as e:
        click.echo(f"{RED}✗{RESET} Invalid configuration: {e}", err=True)
        sys.exit(EXIT_INPUT)

# ═══════════════════════════════════════════════════════════════════════════════
# RENDERING
# ═══════════════════════════════════════════════════════════════════════════════

def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "-"
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v, digits) for v in value)
    return f"{value:.{digits}f}"


def render_trace(result: Dict[str, Any]) -> None:
    """Step table plus a summary panel for `register`."""
    entries = result.get("entries", [])
    summary = result.get("trace", {})
    metrics = result.get("report") or {}

    if RICH_AVAILABLE:
        console = _console()
        table = Table(title="Instance Optimization Trace", border_style="cyan")
        table.add_column("Step", justify="right")
        table.add_column("Sim (-LNCC)", style="cyan")
        table.add_column("Reg", justify="right")
        table.add_column("Total", justify="right", style="bright_yellow")
        table.add_column("Dice", justify="right", style="green")
        for entry in entries:
            best = entry["step"] == summary.get("best_step")
            table.add_row(
                str(entry["step"]) + (" *" if best else ""),
                _fmt(entry["sim"]),
                _fmt(entry["reg"], 6),
                _fmt(entry["total"], 6),
                _fmt(entry.get("dice")),
            )
        console.print(table)

        lines = [
            f"[cyan]Gate:[/cyan] {'fired' if summary.get('gate_fired') else 'not fired'} "
            f"(lncc {_fmt(summary.get('gate_value'))}), "
            f"style {'applied' if summary.get('style_applied') else 'skipped'} ({summary.get('style_mode')})",
            f"[cyan]Best step:[/cyan] {summary.get('best_step')}  total {_fmt(summary.get('best_total'), 6)}",
            f"[cyan]NDV:[/cyan] {_fmt(summary.get('final_ndv'))} %",
        ]
        if metrics:
            lines.append(f"[cyan]Dice:[/cyan] {_fmt(metrics.get('dice_mean'))}  "
                         f"[cyan]HD95:[/cyan] {_fmt(metrics.get('hd95_mean'))} mm  "
                         f"[cyan]TRE:[/cyan] {_fmt(metrics.get('tre_mean'))} mm")
        console.print(Panel("\n".join(lines), title="regadapt register", border_style="green"))
        console.print(result["message"])
    else:
        print(f"\n{CYAN}{BOLD}═══ INSTANCE OPTIMIZATION TRACE ═══{RESET}\n")
        print(f"  {'step':>5}  {'total':>12}  {'reg':>10}  {'dice':>8}")
        for entry in entries:
            print(f"  {entry['step']:>5}  {_fmt(entry['total'], 6):>12}  "
                  f"{_fmt(entry['reg'], 6):>10}  {_fmt(entry.get('dice')):>8}")
        print(f"\n  {CYAN}Gate:{RESET}      {'fired' if summary.get('gate_fired') else 'not fired'}")
        print(f"  {CYAN}Style:{RESET}     {'applied' if summary.get('style_applied') else 'skipped'} "
              f"({summary.get('style_mode')})")
        print(f"  {CYAN}Best step:{RESET} {GOLD}{summary.get('best_step')}{RESET}")
        print(f"  {CYAN}NDV:{RESET}       {_fmt(summary.get('final_ndv'))} %")
        if metrics:
            print(f"  {CYAN}Dice:{RESET}      {GREEN}{_fmt(metrics.get('dice_mean'))}{RESET}")
        print(f"\n{GREEN}✓{RESET} {result['message']}")


def render_reports(result: Dict[str, Any]) -> None:
    reports = result.get("reports", [])
    columns = ["pair_id", "dice_mean", "hd95_mean", "tre_mean", "tre_median", "ndv"]
    if RICH_AVAILABLE:
        table = Table(title="Evaluation", border_style="cyan")
        for name in columns:
            table.add_column(name, justify="left" if name == "pair_id" else "right")
        for report in reports:
            table.add_row(*[str(report[c]) if c == "pair_id" else _fmt(report.get(c)) for c in columns])
        if len(reports) > 1:
            table.add_row("aggregate", *[result["aggregate"][c] for c in columns[1:]], style="bright_yellow")
        _console().print(table)
    else:
        print("  " + "  ".join(f"{c:>12}" for c in columns))
        for report in reports:
            print("  " + "  ".join(f"{(str(report[c]) if c == 'pair_id' else _fmt(report.get(c))):>12}" for c in columns))
        if len(reports) > 1:
            print("  " + "  ".join(f"{v:>12}" for v in ["aggregate"] + [result["aggregate"][c] for c in columns[1:]]))
    click.echo(result["message"])


def render_synth(result: Dict[str, Any]) -> None:
    for problem in result["problems"]:
        click.echo(f"{GREEN}✓{RESET} seed {problem['seed']}: max|u| {problem['max_abs_disp']:.4f} voxels, "
                   f"NDV {problem['ndv']:.4f} %, gate lncc {problem['gate_lncc']:.4f}")
    click.echo(result["message"])


def render_comparison(result: Dict[str, Any]) -> None:
    comparison = result["comparison"]
    if RICH_AVAILABLE:
        table = Table(title=f"Baseline ({comparison['strategy']}) vs pipeline", border_style="cyan")
        table.add_column("Arm")
        table.add_column("Endpoint error", justify="right")
        table.add_column("NDV %", justify="right")
        table.add_column("Dice", justify="right")
        for arm in ("baseline", "pipeline"):
            data = comparison[arm]
            dice = (data.get("metrics") or {}).get("dice_mean")
            table.add_row(arm, _fmt(data["endpoint_error"]), _fmt(data["ndv"]), _fmt(dice))
        _console().print(table)
    else:
        for arm in ("baseline", "pipeline"):
            data = comparison[arm]
            print(f"  {CYAN}{arm:>9}:{RESET} endpoint error {_fmt(data['endpoint_error'])}, NDV {_fmt(data['ndv'])} %")
    click.echo(result["message"])

# ═══════════════════════════════════════════════════════════════════════════════
# REGISTER COMMAND
# ═══════════════════════════════════════════════════════════════════════════════

@cli.command()
@pipeline_options
@pass_context
def register(ctx, config_file, **kw):
    """Gated preprocess, backbone init and instance optimization for one pair."""
    cfg = load_run_config(config_file, pipeline_overrides(kw))
    finish(ctx, run_register(cfg), render_trace)

# ═══════════════════════════════════════════════════════════════════════════════
# PRETRAIN COMMAND
# ═══════════════════════════════════════════════════════════════════════════════

@cli.command()
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='JSON config file (flags override it)')
@click.option('--checkpoint', type=click.Path(path_type=Path), required=True, help='Output checkpoint (.bin + .bin.json)')
@click.option('--data-dir', type=click.Path(path_type=Path), help='Directory of *moving.vol / *fixed.vol pairs')
@click.option('--log', type=click.Path(path_type=Path), help='Training-loss JSONL [default: <checkpoint>.loss.jsonl]')
@click.option('--steps', type=int, help=f"Pretraining steps [default: {PRETRAIN_DEFAULTS['steps']}, published]")
@click.option('--lr', type=float, help=f"Fixed Adam lr [default: {PRETRAIN_DEFAULTS['lr']}, published]")
@click.option('--seed', type=int, help=f"Random seed [default: {DEFAULT_SEED}]")
@click.option('--synth-count', type=int, default=PRETRAIN_DEFAULTS['pairs'], show_default=True,
              help='Synthetic pairs when no --data-dir is given')
@click.option('--synth-dims', type=int, nargs=3, default=SYNTH_DEFAULTS['dims'], show_default=True)
@click.option('--max-disp', type=float, default=SYNTH_DEFAULTS['max_disp'], show_default=True)
@click.option('--contrast', type=click.Choice(['identity', 'inverted', 'gamma']),
              default=SYNTH_DEFAULTS['contrast'], show_default=True)
@click.option('--variant', type=click.Choice(['cascade', 'single']), help='Refiner variant [default: cascade]')
@click.option('--update-mode', type=click.Choice(['compose', 'add']), help='Field update [default: compose]')
@click.option('--base-channels', type=int, help=f"U-Net base channels [default: {UNET_DEFAULTS['base_channels']}]")
@click.option('--depth', type=int, help=f"U-Net depth [default: {UNET_DEFAULTS['depth']}]")
@pass_context
def pretrain(ctx, config_file, checkpoint, data_dir, log, steps, lr, seed, synth_count, synth_dims,
             max_disp, contrast, variant, update_mode, base_channels, depth):
    """Pretrain the refinement cascade (round-robin, fixed lr, no warmup)."""
    overrides = {
        "io": {"seed": seed, "variant": variant, "update_mode": update_mode},
        "unet": {"base_channels": base_channels, "depth": depth},
        "pretrain": {"steps": steps, "lr": lr},
        "paths": {"checkpoint": str(checkpoint), "log": _str(log)},
    }
    cfg = load_run_config(config_file, overrides)
    if data_dir is not None and not data_dir.is_dir():
        click.echo(f"{RED}✗{RESET} data directory not found: {data_dir}", err=True)
        sys.exit(EXIT_INPUT)
    synth = {"count": synth_count, "dims": tuple(synth_dims), "max_disp": max_disp, "contrast": contrast}
    finish(ctx, run_pretrain(cfg, data_dir=data_dir, synth=synth))

# ═══════════════════════════════════════════════════════════════════════════════
# SYNTH COMMAND
# ═══════════════════════════════════════════════════════════════════════════════

@cli.command()
@click.option('--out-dir', type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option('--seed', type=int, default=DEFAULT_SEED, show_default=True, help='Random seed (env REGADAPT_SEED)')
@click.option('--dims', type=int, nargs=3, default=SYNTH_DEFAULTS['dims'], show_default=True)
@click.option('--max-disp', type=float, default=SYNTH_DEFAULTS['max_disp'], show_default=True,
              help='Peak displacement in voxels, must be < 0.4')
@click.option('--contrast', type=click.Choice(['identity', 'inverted', 'gamma']),
              default=SYNTH_DEFAULTS['contrast'], show_default=True)
@click.option('--spacing', type=float, nargs=3, default=SYNTH_DEFAULTS['spacing'], show_default=True)
@click.option('--landmarks', type=int, default=SYNTH_DEFAULTS['landmarks'], show_default=True)
@click.option('--count', type=int, default=1, show_default=True, help='Problems with consecutive seeds')
@pass_context
def synth(ctx, out_dir, seed, dims, max_disp, contrast, spacing, landmarks, count):
    """Write a synthetic phantom pair with its true field, labels and landmarks."""
    result = run_synth(out_dir, seed, tuple(dims), max_disp, contrast, tuple(spacing), landmarks, count)
    finish(ctx, result, render_synth)

# ═══════════════════════════════════════════════════════════════════════════════
# EVALUATE COMMAND
# ═══════════════════════════════════════════════════════════════════════════════

@cli.command()
@click.option('--field', 'field_path', type=click.Path(path_type=Path), help='Displacement field (.vol)')
@click.option('--moving-labels', type=click.Path(path_type=Path))
@click.option('--fixed-labels', type=click.Path(path_type=Path))
@click.option('--landmarks', type=click.Path(path_type=Path))
@click.option('--batch', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='CSV with pair_id,field,moving_labels,fixed_labels,landmarks')
@click.option('--out', type=click.Path(path_type=Path), help='MetricReport JSON')
@click.option('--csv', 'csv_path', type=click.Path(path_type=Path), help='CSV rows (+ aggregate row in batch mode)')
@click.option('--jobs', type=int, default=1, show_default=True, help='Parallel pairs (batch mode only)')
@click.option('--label-interp', type=click.Choice(['nearest', 'soft']),
              default=IO_DEFAULTS['label_interp'], show_default=True)
@pass_context
def evaluate(ctx, field_path, moving_labels, fixed_labels, landmarks, batch, out, csv_path, jobs, label_interp):
    """Dice, HD95, TRE and NDV of registered pairs."""
    try:
        if batch is not None:
            items = read_batch(batch)
        else:
            if field_path is None:
                raise RegAdaptError("either --field or --batch is required")
            items = [{"pair_id": field_path.stem, "field": str(field_path),
                      "moving_labels": _str(moving_labels), "fixed_labels": _str(fixed_labels),
                      "landmarks": _str(landmarks)}]
            jobs = 1
    except (RegAdaptError, OSError, ValueError) as e:
        click.echo(f"{RED}✗{RESET} {e}", err=True)
        sys.exit(EXIT_INPUT)
    finish(ctx, run_evaluate(items, out, csv_path, jobs, label_interp), render_reports)

# ═══════════════════════════════════════════════════════════════════════════════
# BASELINE COMMAND
# ═══════════════════════════════════════════════════════════════════════════════

@cli.command()
@pipeline_options
@click.option('--strategy', type=click.Choice(['iterate', 'backbone-only']), default='backbone-only', show_default=True)
@click.option('--k', type=int, default=1, show_default=True, help='Backbone applications for --strategy iterate')
@click.option('--true-field', type=click.Path(path_type=Path), help='Ground-truth field for endpoint errors')
@click.option('--comparison', type=click.Path(path_type=Path), help='Comparison JSON [default: comparison.json]')
@pass_context
def baseline(ctx, config_file, strategy, k, **kw):
    """Run a backbone baseline and the full pipeline on the same pair."""
    cfg = load_run_config(config_file, pipeline_overrides(kw))
    finish(ctx, run_baseline(cfg, strategy, k), render_comparison)

# ═══════════════════════════════════════════════════════════════════════════════
# ENTRY POINT
# ═══════════════════════════════════════════════════════════════════════════════

def main():
    """Main entry point."""
    cli()

if __name__ == '__main__':
    main()
