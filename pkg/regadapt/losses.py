"""
Similarity and regularization terms.

- lncc: Gaussian-windowed local normalized cross-correlation
- diffusion_reg: mean squared forward differences of a field
- total_loss: multi-stage objective sum_t -LNCC(I_A o phi_t, I_B) + lambda * reg(phi_T)
- modality_gate: low-resolution LNCC threshold deciding style transfer routing
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .config import GATE_DEFAULTS, IO_DEFAULTS, LNCC_DEFAULTS
from .errors import ShapeError
from .fields import field_tensor, volume_tensor
from .grids import DisplacementField, Volume3D

logger = logging.getLogger(__name__)

TensorLike = Union[Volume3D, DiffTensor]


def _as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    if isinstance(x, DisplacementField):
        return field_tensor(x)
    if isinstance(x, Volume3D):
        return volume_tensor(x)
    raise TypeError(f"expected Volume3D, DisplacementField or DiffTensor, got {type(x).__name__}")


# =============================================================================
# LNCC
# =============================================================================

def lncc_tensor(a: DiffTensor, b: DiffTensor, window: int = LNCC_DEFAULTS["window"],
                eps: float = LNCC_DEFAULTS["eps"]) -> Tuple[DiffTensor, DiffTensor]:
    """Differentiable LNCC; returns (scalar mean, per-voxel map), both float64."""
    if a.shape != b.shape:
        raise ShapeError(f"lncc: shapes differ {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"lncc window must be a positive odd integer, got {window}")
    sigma = window * LNCC_DEFAULTS["sigma_ratio"]

    def blur(t):
        return ad.gaussian_blur(t, window, sigma)

    x = ad.astype(a, np.float64)
    y = ad.astype(b, np.float64)
    mu_x, mu_y = blur(x), blur(y)
    var_x = ad.sub(blur(ad.square(x)), ad.square(mu_x))
    var_y = ad.sub(blur(ad.square(y)), ad.square(mu_y))
    cov = ad.sub(blur(ad.mul(x, y)), ad.mul(mu_x, mu_y))
    denom = ad.sqrt(ad.mul(ad.add_const(var_x, eps), ad.add_const(var_y, eps)))
    cc = ad.div(cov, denom)
    return ad.reduce_mean(cc), cc


def lncc(a: TensorLike, b: TensorLike, window: int = LNCC_DEFAULTS["window"],
         eps: float = LNCC_DEFAULTS["eps"], return_map: bool = False):
    """
    Local normalized cross-correlation in [-1, 1].

    Returns a scalar DiffTensor when given DiffTensors, a float for volumes.
    With return_map=True the per-voxel correlation map is returned as well.
    """
    tensors = isinstance(a, DiffTensor) or isinstance(b, DiffTensor)
    if not tensors and a.dims != b.dims:
        raise ShapeError(f"lncc: dims differ {a.dims} vs {b.dims}")
    value, cc = lncc_tensor(_as_tensor(a), _as_tensor(b), window, eps)
    if not tensors:
        value = value.item()
        cc = cc.data[0, 0]
    return (value, cc) if return_map else value


# =============================================================================
# Regularization
# =============================================================================

def diffusion_reg_tensor(u: DiffTensor) -> DiffTensor:
    """Float64 scalar node; axes of length 1 contribute zero."""
    x = ad.astype(u, np.float64)
    terms = [ad.reduce_mean(ad.square(ad.diff(x, axis))) for axis in (2, 3, 4) if u.shape[axis] > 1]
    if not terms:
        return ad.reduce_mean(ad.scale(x, 0.0))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / 3.0)


def diffusion_reg(u: Union[DisplacementField, DiffTensor]) -> Union[DiffTensor, float]:
    """Average over the three axes of the mean squared forward difference of u."""
    total = diffusion_reg_tensor(_as_tensor(u))
    return total if isinstance(u, DiffTensor) else total.item()


# =============================================================================
# Total Loss
# =============================================================================

@dataclass
class LossReport:
    """Loss terms of one forward pass; sim[t] = -lncc[t]."""
    sim: List[float]
    lncc: List[float]
    reg: float
    lam: float
    total: float = field(default=0.0)

    def recomputed_total(self) -> float:
        return float(sum(self.sim) + self.lam * self.reg)

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(stage_warps: Sequence[TensorLike], target: TensorLike, phi_T,
               lam: float = IO_DEFAULTS["lambda_reg"],
               window: int = IO_DEFAULTS["lncc_window"]) -> Tuple[DiffTensor, LossReport]:
    """Multi-stage objective; returns the scalar loss node and its report."""
    if not stage_warps:
        raise ShapeError("total_loss needs at least one stage warp")
    target_t = _as_tensor(target)
    sims = []
    loss = None
    for warped in stage_warps:
        value, _ = lncc_tensor(_as_tensor(warped), target_t, window)
        sim = ad.neg(value)
        sims.append(sim)
        loss = sim if loss is None else ad.add(loss, sim)
    reg = diffusion_reg_tensor(_as_tensor(phi_T))
    loss = ad.add(loss, ad.scale(reg, lam))

    sim_values = [s.item() for s in sims]
    report = LossReport(
        sim=sim_values,
        lncc=[-s for s in sim_values],
        reg=reg.item(),
        lam=float(lam),
    )
    report.total = loss.item()
    return loss, report


# =============================================================================
# Modality Gate
# =============================================================================

def gate_lncc(a: Volume3D, b: Volume3D, window: int = GATE_DEFAULTS["window"],
              down: int = GATE_DEFAULTS["down"]) -> float:
    """LNCC of the two volumes after block-average downsampling by `down`."""
    if a.dims != b.dims:
        raise ShapeError(f"modality_gate: dims differ {a.dims} vs {b.dims}")
    small_a = ad.avg_pool3d(volume_tensor(a), down)
    small_b = ad.avg_pool3d(volume_tensor(b), down)
    return lncc(small_a, small_b, window).item()


def modality_gate(a: Volume3D, b: Volume3D, window: int = GATE_DEFAULTS["window"],
                  tau: float = GATE_DEFAULTS["tau"], down: int = GATE_DEFAULTS["down"]) -> bool:
    """True when the pair should be routed through style transfer."""
    value = gate_lncc(a, b, window, down)
    fired = value < tau
    logger.debug(f"modality gate: lncc={value:.4f} tau={tau} fired={fired}")
    return fired
