"""
Shared fixtures for the regadapt test suite.

Run with: python -m pytest regadapt/tests -v
Slow experiments: python -m pytest regadapt/tests -v -m slow
"""
import numpy as np
import pytest

from .. import autodiff as ad
from ..cascade import UNet3DConfig
from ..grids import Volume3D
from ..volume_io import synth_problem


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_unet():
    """Narrow, shallow refiner so cascade tests run in seconds."""
    return UNet3DConfig(base_channels=2, depth=2)


@pytest.fixture(scope="module")
def small_problem():
    return synth_problem(seed=5, dims=(16, 16, 16), max_disp=0.3)


@pytest.fixture
def textured_volume(rng):
    """High-variance noise: local variances dwarf the LNCC epsilon everywhere."""
    return Volume3D(5.0 * rng.standard_normal((12, 12, 12)))


@pytest.fixture
def gradcheck():
    """Worst relative error between backward() and central finite differences.

    `build` must rebuild the scalar loss from `tensor` on every call; entries
    of `tensor.data` are perturbed in place. Relative errors are floored at 1%
    of the largest analytic gradient so near-zero entries do not dominate.
    """
    def check(build, tensor, probes=20, h=1e-3, seed=0):
        tensor.zero_grad()
        ad.backward(build())
        analytic = tensor.grad.reshape(-1).copy()
        flat = tensor.data.reshape(-1)
        assert np.shares_memory(flat, tensor.data)
        floor = 1e-2 * max(float(np.abs(analytic).max()), 1e-12)
        picks = np.random.default_rng(seed).choice(flat.size, size=min(probes, flat.size), replace=False)
        worst = 0.0
        for i in picks:
            original = flat[i]
            flat[i] = original + h
            plus = build().item()
            flat[i] = original - h
            minus = build().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, err)
        return worst

    return check
