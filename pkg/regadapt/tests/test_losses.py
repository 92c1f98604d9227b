"""
Tests for LNCC, the diffusion regularizer, the multi-stage objective and the
modality gate.

Run with: python -m pytest regadapt/tests/test_losses.py -v
"""
import numpy as np
import pytest

from .. import autodiff as ad
from ..errors import ShapeError
from ..grids import DisplacementField, Volume3D
from ..losses import (
    LossReport,
    diffusion_reg,
    gate_lncc,
    lncc,
    modality_gate,
    total_loss,
)
from ..volume_io import apply_contrast, synth_problem


# =============================================================================
# Tests: LNCC
# =============================================================================

class TestLncc:
    """Tests for local normalized cross-correlation."""

    def test_self_correlation_is_one(self, textured_volume):
        assert lncc(textured_volume, textured_volume, 9) == pytest.approx(1.0, abs=1e-3)

    def test_invariant_to_positive_affine_maps(self, textured_volume):
        other = textured_volume.with_data(2.0 * textured_volume.data + 3.0)
        assert lncc(textured_volume, other, 9) == pytest.approx(1.0, abs=1e-3)

    def test_inverted_phantom_is_anticorrelated(self, small_problem):
        inverted = small_problem.phantom.with_data(apply_contrast(small_problem.phantom.data, "inverted"))
        assert lncc(small_problem.phantom, inverted, 9) < -0.95

    def test_symmetric(self, rng):
        a = Volume3D(rng.standard_normal((10, 10, 10)))
        b = Volume3D(rng.standard_normal((10, 10, 10)))
        assert lncc(a, b, 5) == pytest.approx(lncc(b, a, 5), abs=1e-12)

    def test_map_is_bounded(self, rng):
        a = Volume3D(rng.standard_normal((10, 10, 10)))
        b = Volume3D(a.data + 0.5 * rng.standard_normal((10, 10, 10)))
        value, cc = lncc(a, b, 5, return_map=True)
        assert cc.shape == (10, 10, 10)
        assert np.all(np.abs(cc) <= 1.0 + 1e-9)
        assert value == pytest.approx(float(cc.mean()))

    def test_constant_images_score_zero(self):
        a = Volume3D(np.full((6, 6, 6), 2.0))
        assert lncc(a, a, 5) == pytest.approx(0.0, abs=1e-9)

    def test_dims_mismatch(self, rng):
        with pytest.raises(ShapeError):
            lncc(Volume3D(rng.standard_normal((4, 4, 4))), Volume3D(rng.standard_normal((4, 4, 5))))

    def test_even_window_rejected(self, textured_volume):
        with pytest.raises(ShapeError):
            lncc(textured_volume, textured_volume, 8)

    def test_gradients_match_finite_differences(self, rng, gradcheck):
        a = ad.parameter(rng.standard_normal((1, 1, 8, 8, 8)), dtype=np.float64)
        b = ad.constant(rng.standard_normal((1, 1, 8, 8, 8)), dtype=np.float64)
        assert gradcheck(lambda: lncc(a, b, 5), a, h=1e-5) < 1e-4


# =============================================================================
# Tests: Diffusion Regularizer
# =============================================================================

class TestDiffusionReg:
    """Tests for the mean squared forward difference regularizer."""

    def test_ramp_along_one_axis(self):
        data = np.zeros((3, 4, 4, 4))
        data[2] = ad.identity_grid((4, 4, 4))[2]
        # only u_w varies, with unit steps along w: (1/3) * (1/3) per axis average
        assert diffusion_reg(DisplacementField(data)) == pytest.approx(1.0 / 9.0)

    def test_constant_field_is_zero(self):
        assert diffusion_reg(DisplacementField.constant((5, 5, 5), (1.0, 2.0, 3.0))) == 0.0

    def test_non_negative(self, rng):
        assert diffusion_reg(DisplacementField(rng.standard_normal((3, 5, 5, 5)))) >= 0.0

    def test_single_voxel_axis_contributes_nothing(self):
        data = np.zeros((3, 1, 4, 4))
        data[0] = ad.identity_grid((1, 4, 4))[2]
        assert diffusion_reg(DisplacementField(data)) == pytest.approx(1.0 / 3.0 * (1.0 / 3.0))

    def test_gradients_match_finite_differences(self, rng, gradcheck):
        u = ad.parameter(rng.standard_normal((1, 3, 5, 5, 5)), dtype=np.float64)
        assert gradcheck(lambda: diffusion_reg(u), u) < 1e-4


# =============================================================================
# Tests: Total Loss
# =============================================================================

class TestTotalLoss:
    """Tests for the multi-stage objective."""

    def test_three_perfect_stages(self, textured_volume):
        loss, report = total_loss([textured_volume] * 3, textured_volume,
                                  DisplacementField.zeros(textured_volume.dims), lam=0.1, window=9)
        assert loss.item() == pytest.approx(-3.0, abs=3e-3)
        assert report.reg == 0.0
        assert len(report.sim) == 3

    def test_report_recomposes_total(self, rng, textured_volume):
        warped = [Volume3D(rng.standard_normal(textured_volume.dims)) for _ in range(2)]
        u = DisplacementField(0.5 * rng.standard_normal((3,) + textured_volume.dims))
        loss, report = total_loss(warped, textured_volume, u, lam=0.1, window=5)
        assert report.recomputed_total() == pytest.approx(report.total, abs=1e-9)
        assert report.total == pytest.approx(loss.item())
        assert report.lncc == [-s for s in report.sim]

    def test_empty_stage_list_rejected(self, textured_volume):
        with pytest.raises(ShapeError):
            total_loss([], textured_volume, DisplacementField.zeros(textured_volume.dims))

    def test_gradients_reach_stage_warps_and_field(self, rng, gradcheck):
        target = ad.constant(rng.standard_normal((1, 1, 6, 6, 6)), dtype=np.float64)
        stage = ad.parameter(rng.standard_normal((1, 1, 6, 6, 6)), dtype=np.float64)
        u = ad.parameter(rng.standard_normal((1, 3, 6, 6, 6)), dtype=np.float64)

        def build():
            return total_loss([stage, stage], target, u, lam=0.5, window=3)[0]

        assert gradcheck(build, stage, h=1e-5) < 1e-4
        assert gradcheck(build, u) < 1e-4

    def test_report_to_dict(self):
        report = LossReport(sim=[-0.5], lncc=[0.5], reg=0.1, lam=0.1, total=-0.49)
        assert report.to_dict()["lncc"] == [0.5]


# =============================================================================
# Tests: Modality Gate
# =============================================================================

class TestModalityGate:
    """Tests for the low-resolution LNCC gate."""

    @pytest.mark.parametrize("seed", range(20))
    def test_inverted_contrast_fires(self, seed):
        problem = synth_problem(seed=seed, dims=(32, 32, 32), max_disp=0.3, contrast="inverted")
        assert modality_gate(problem.remapped, problem.fixed, tau=0.4)

    @pytest.mark.parametrize("seed", range(20))
    def test_identity_contrast_does_not_fire(self, seed):
        problem = synth_problem(seed=seed, dims=(32, 32, 32), max_disp=0.3, contrast="identity")
        assert not modality_gate(problem.remapped, problem.fixed, tau=0.4)

    def test_gate_value_of_identical_volumes(self, small_problem):
        value = gate_lncc(small_problem.phantom, small_problem.phantom, window=3, down=2)
        assert value > 0.9

    def test_dims_mismatch(self, rng):
        with pytest.raises(ShapeError):
            gate_lncc(Volume3D(rng.standard_normal((8, 8, 8))), Volume3D(rng.standard_normal((8, 8, 4))))

    def test_returns_python_float(self, small_problem):
        assert isinstance(gate_lncc(small_problem.phantom, small_problem.fixed), float)
