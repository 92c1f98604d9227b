"""
Configuration for regadapt.

Provides the built-in defaults for every pipeline stage and the helpers used
to layer a JSON config file and command-line flags on top of them. Uses
environment variables (optionally from a .env file) for a few run-wide knobs.

Precedence: CLI flags > config file > built-in defaults.
"""
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

load_dotenv()


def _env_flag(name: str, default: str = "0") -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


# =============================================================================
# Run-wide Settings
# =============================================================================

FORMAT_VERSION = 1

DEFAULT_SEED = int(os.getenv("REGADAPT_SEED", "0"))

LOG_LEVEL = os.getenv("REGADAPT_LOG_LEVEL", "INFO")

# elapsed_ms is only written to traces when enabled, keeping default runs byte-reproducible
TRACE_TIMING = _env_flag("REGADAPT_TRACE_TIMING")


# =============================================================================
# Stage Defaults
# =============================================================================

IO_DEFAULTS = {
    "steps": 50,
    "base_lr": 5e-4,
    "warmup": 10,
    "lambda_reg": 0.1,
    "lncc_window": 9,
    "gate_window": 11,
    "tau": 0.4,
    "gate_down": 4,
    "seed": DEFAULT_SEED,
    "variant": "cascade",
    "update_mode": "compose",
    "scale_mode": "finest_residual",
    "output_scale": 0.05,
    "style_mode": "gated",
    "dice_every": 5,
    "label_interp": "nearest",
}

UNET_DEFAULTS = {
    "in_channels": 2,
    "out_channels": 3,
    "base_channels": 32,
    "depth": 3,
    "negative_slope": 0.2,
    "zero_init_final": True,
    "instance_norm": False,
}

BACKBONE_DEFAULTS = {
    "kind": "zero",
    "path": None,
    "levels": 3,
    "iters": 30,
    "step": 0.05,
    "smooth_sigma": 2.0,
    "lambda_reg": 0.1,
    "window": 9,
}

STYLE_DEFAULTS = {
    "kind": "monotone_remap",
    "argv": None,
    "bins": 256,
}

GATE_DEFAULTS = {
    "window": 11,
    "tau": 0.4,
    "down": 4,
}

LNCC_DEFAULTS = {
    "window": 9,
    # sigma = window * sigma_ratio
    "sigma_ratio": 0.25,
    "eps": 1e-5,
}

ADAM_DEFAULTS = {
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
}

PRETRAIN_DEFAULTS = {
    "steps": 1000,
    "lr": 1e-5,
    "pairs": 20,
}

SYNTH_DEFAULTS = {
    "dims": (48, 48, 48),
    "spacing": (1.0, 1.0, 1.0),
    "max_disp": 0.3,
    "contrast": "identity",
    "field_sigma": 4.0,
    "landmarks": 20,
}


# =============================================================================
# Utility Functions
# =============================================================================

def deep_merge(base: dict, update: dict) -> dict:
    """Deep merge two dictionaries, with update values taking precedence."""
    result = base.copy()
    for key, value in update.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def drop_unset(values: Dict[str, Any]) -> Dict[str, Any]:
    """Remove None entries (flags the user did not pass), recursing into dicts."""
    cleaned = {}
    for key, value in values.items():
        if isinstance(value, dict):
            nested = drop_unset(value)
            if nested:
                cleaned[key] = nested
        elif value is not None:
            cleaned[key] = value
    return cleaned


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Load a JSON config file; a missing path means an empty layer."""
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must contain a JSON object")
    return data


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 over the canonical JSON encoding of a config dict."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
