"""
Tests for the adaptation pipeline: backbone initialization, gated style
transfer, instance optimization and refiner pretraining.

Run with: python -m pytest regadapt/tests/test_pipeline.py -v
"""
import io
import json
from unittest.mock import MagicMock, patch

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from ..cascade import init_cascade, load_cascade
from ..errors import ConfigError, NumericalError, ShapeError, StyleTransferError
from ..fields import compose, warp
from ..grids import DisplacementField, Volume3D
from ..losses import diffusion_reg, lncc
from ..pipeline import (
    BackboneSpec,
    GateResult,
    IOConfig,
    IOTrace,
    ReferenceHistogram,
    StyleTransferSpec,
    apply_style,
    backbone_predict,
    gated_preprocess,
    instance_optimize,
    iterate_backbone,
    monotone_remap,
    pretrain_refiners,
    radial_profile,
    run_external_style,
)
from ..volume_io import apply_contrast, load_volume, save_field, save_volume, synth_problem


@pytest.fixture(scope="module")
def inverted_problem():
    return synth_problem(seed=11, dims=(16, 16, 16), max_disp=0.3, contrast="inverted")


def short_run(**overrides):
    settings = {"steps": 3, "base_lr": 5e-3, "warmup": 2, "seed": 0}
    settings.update(overrides)
    return IOConfig(**settings)


# =============================================================================
# Tests: Backbone
# =============================================================================

class TestBackbone:
    """Tests for backbone_predict and iterate_backbone."""

    def test_zero_backbone(self, small_problem):
        u = backbone_predict(BackboneSpec(kind="zero"), small_problem.remapped, small_problem.fixed)
        assert u.dims == small_problem.fixed.dims
        assert not u.data.any()

    def test_file_backbone(self, small_problem, tmp_path):
        path = save_field(small_problem.true_field, tmp_path / "phi0.vol")
        u = backbone_predict(BackboneSpec(kind="file", path=str(path)), small_problem.remapped, small_problem.fixed)
        assert np.array_equal(u.data, small_problem.true_field.data)

    def test_file_backbone_dims_mismatch(self, small_problem, tmp_path):
        path = save_field(DisplacementField.zeros((8, 8, 8)), tmp_path / "phi0.vol")
        with pytest.raises(ShapeError):
            backbone_predict(BackboneSpec(kind="file", path=str(path)), small_problem.remapped, small_problem.fixed)

    def test_file_backbone_needs_path(self):
        with pytest.raises(ConfigError):
            BackboneSpec(kind="file")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            BackboneSpec(kind="learned")

    def test_variational_is_deterministic_and_finite(self, small_problem):
        spec = BackboneSpec(kind="variational", levels=2, iters=5)
        a = backbone_predict(spec, small_problem.remapped, small_problem.fixed)
        b = backbone_predict(spec, small_problem.remapped, small_problem.fixed)
        assert a.dims == small_problem.fixed.dims
        assert np.all(np.isfinite(a.data))
        assert np.array_equal(a.data, b.data)
        assert a.max_abs() > 0

    def test_variational_smooths_the_field_after_each_step(self, small_problem):
        spec = BackboneSpec(kind="variational", levels=2, iters=2, smooth_sigma=2.0)
        with patch("regadapt.pipeline.gaussian_filter", wraps=gaussian_filter) as smoother:
            backbone_predict(spec, small_problem.remapped, small_problem.fixed)
        sigmas = [c.args[1] for c in smoother.call_args_list]
        # per step: three gradient components, then three field components (sigma halves at half resolution)
        assert sigmas == ([2.0] * 3 + [1.0] * 3) * 2 + [2.0] * 12

    def test_iterate_once_matches_single_prediction(self, small_problem, tmp_path):
        path = save_field(small_problem.true_field, tmp_path / "phi0.vol")
        spec = BackboneSpec(kind="file", path=str(path))
        u = iterate_backbone(spec, small_problem.remapped, small_problem.fixed, k=1)
        assert np.array_equal(u.data, small_problem.true_field.data)

    def test_iterate_twice_composes(self, small_problem, tmp_path):
        path = save_field(small_problem.true_field, tmp_path / "phi0.vol")
        spec = BackboneSpec(kind="file", path=str(path))
        u = iterate_backbone(spec, small_problem.remapped, small_problem.fixed, k=2)
        expected = compose(small_problem.true_field, small_problem.true_field)
        assert np.allclose(u.data, expected.data, atol=1e-6)

    def test_iterate_zero_backbone_stays_zero(self, small_problem):
        u = iterate_backbone(BackboneSpec(), small_problem.remapped, small_problem.fixed, k=3)
        assert not u.data.any()

    def test_iterate_needs_positive_k(self, small_problem):
        with pytest.raises(ConfigError):
            iterate_backbone(BackboneSpec(), small_problem.remapped, small_problem.fixed, k=0)


# =============================================================================
# Tests: Style Transfer
# =============================================================================

class TestMonotoneRemap:
    """Tests for the histogram-matching style transfer."""

    def test_remap_onto_own_histogram_is_near_identity(self, small_problem):
        reference = ReferenceHistogram.from_volume(small_problem.phantom, bins=256)
        out = monotone_remap(small_problem.phantom, reference)
        assert np.max(np.abs(out.data - small_problem.phantom.data)) <= 2 * reference.bin_width

    def test_preserves_intensity_order(self, small_problem):
        reference = ReferenceHistogram.from_volume(small_problem.phantom)
        v = small_problem.phantom.with_data(2.0 * small_problem.phantom.data + 1.0)
        out = monotone_remap(v, reference).data.ravel()
        order = np.argsort(v.data.ravel(), kind="stable")
        assert np.all(np.diff(out[order]) >= -1e-6)

    def test_inverted_contrast_is_flipped(self, small_problem):
        reference = ReferenceHistogram.from_volume(small_problem.phantom)
        inverted = small_problem.phantom.with_data(apply_contrast(small_problem.phantom.data, "inverted"))
        out = monotone_remap(inverted, reference)
        assert np.corrcoef(out.data.ravel(), small_problem.phantom.data.ravel())[0, 1] > 0.95

    def test_radial_profile_shells(self):
        profile = radial_profile(np.ones((8, 8, 8)), shells=4)
        assert profile.shape == (4,)
        assert np.allclose(profile, 1.0)

    def test_constant_volume_rejected(self, small_problem):
        reference = ReferenceHistogram.from_volume(small_problem.phantom)
        with pytest.raises(StyleTransferError):
            monotone_remap(Volume3D(np.ones((4, 4, 4))), reference)
        with pytest.raises(StyleTransferError):
            ReferenceHistogram.from_volume(Volume3D(np.ones((4, 4, 4))))

    def test_identity_style(self, small_problem):
        v = small_problem.remapped
        assert apply_style(StyleTransferSpec(kind="identity"), v, small_problem.fixed) is v


def fake_style_command(scale):
    """subprocess.run stand-in that scales `{in}` into `{out}`."""
    def run(command, **kwargs):
        v = load_volume(command[1])
        save_volume(v.with_data(scale * v.data), command[2])
        return MagicMock(returncode=0, stderr="")
    return run


class TestExternalStyle:
    """Tests for the external-command style transfer."""

    def test_argv_string_is_split(self):
        spec = StyleTransferSpec(kind="external_command", argv="style-tool --fast {in} {out}")
        assert spec.argv == ["style-tool", "--fast", "{in}", "{out}"]

    def test_external_needs_argv(self):
        with pytest.raises(ConfigError):
            StyleTransferSpec(kind="external_command")

    def test_runs_command_on_vol_files(self, small_problem):
        with patch("regadapt.pipeline.subprocess.run", side_effect=fake_style_command(2.0)) as mock_run:
            out = run_external_style(["style-tool", "{in}", "{out}"], small_problem.phantom)
        assert np.allclose(out.data, 2.0 * small_problem.phantom.data)
        command = mock_run.call_args[0][0]
        assert command[1].endswith("in.vol") and command[2].endswith("out.vol")

    def test_non_zero_exit(self, small_problem):
        failed = MagicMock(returncode=3, stderr="boom")
        with patch("regadapt.pipeline.subprocess.run", return_value=failed):
            with pytest.raises(StyleTransferError, match="status 3"):
                run_external_style(["style-tool", "{in}", "{out}"], small_problem.phantom)

    def test_missing_output(self, small_problem):
        with patch("regadapt.pipeline.subprocess.run", return_value=MagicMock(returncode=0, stderr="")):
            with pytest.raises(StyleTransferError):
                run_external_style(["style-tool", "{in}", "{out}"], small_problem.phantom)

    def test_command_not_found(self, small_problem):
        with patch("regadapt.pipeline.subprocess.run", side_effect=FileNotFoundError("style-tool")):
            with pytest.raises(StyleTransferError):
                run_external_style(["style-tool", "{in}", "{out}"], small_problem.phantom)


class TestGatedPreprocess:
    """Tests for gate routing."""

    def test_same_contrast_passes_through(self, small_problem):
        result = gated_preprocess(small_problem.remapped, small_problem.fixed, StyleTransferSpec(),
                                  window=3, tau=0.4, down=2)
        assert not result.fired
        assert not result.styled
        assert result.moving is small_problem.remapped
        assert result.fixed is small_problem.fixed

    def test_inverted_contrast_is_restyled(self, inverted_problem):
        before = lncc(inverted_problem.remapped, inverted_problem.fixed, 9)
        result = gated_preprocess(inverted_problem.remapped, inverted_problem.fixed, StyleTransferSpec(),
                                  window=3, tau=0.4, down=2)
        assert result.fired
        assert result.styled
        assert result.value < 0.4
        assert lncc(result.moving, result.fixed, 9) > max(before, 0.5)

    def test_never_mode(self, inverted_problem):
        result = gated_preprocess(inverted_problem.remapped, inverted_problem.fixed, StyleTransferSpec(),
                                  window=3, down=2, mode="never")
        assert result.fired
        assert not result.styled
        assert result.moving is inverted_problem.remapped

    def test_always_mode(self, small_problem):
        result = gated_preprocess(small_problem.remapped, small_problem.fixed, StyleTransferSpec(kind="identity"),
                                  window=3, down=2, mode="always")
        assert not result.fired
        assert result.styled
        assert result.mode == "always"
        assert result.moving is small_problem.remapped

    def test_unknown_mode(self, small_problem):
        with pytest.raises(ConfigError):
            gated_preprocess(small_problem.remapped, small_problem.fixed, StyleTransferSpec(), mode="sometimes")


# =============================================================================
# Tests: IOConfig
# =============================================================================

class TestIOConfig:
    """Tests for instance optimization settings."""

    def test_published_defaults(self):
        cfg = IOConfig()
        assert (cfg.steps, cfg.base_lr, cfg.warmup, cfg.lambda_reg) == (50, 5e-4, 10, 0.1)
        assert (cfg.lncc_window, cfg.gate_window, cfg.tau, cfg.output_scale) == (9, 11, 0.4, 0.05)

    @pytest.mark.parametrize("overrides", [
        {"steps": 0},
        {"tau": 1.0},
        {"lncc_window": 8},
        {"gate_window": 0},
        {"style_mode": "maybe"},
        {"base_lr": 0.0},
    ])
    def test_invalid_settings(self, overrides):
        with pytest.raises(ConfigError):
            IOConfig(**overrides)

    def test_from_dict_ignores_unknown_keys(self):
        cfg = IOConfig.from_dict({"steps": 7, "colour": "blue"})
        assert cfg.steps == 7
        assert cfg.to_dict()["steps"] == 7


# =============================================================================
# Tests: Instance Optimization
# =============================================================================

class TestInstanceOptimize:
    """Tests for the per-pair Adam loop."""

    def test_trace_has_one_entry_per_step(self, tiny_unet, small_problem):
        cascade = init_cascade(tiny_unet, seed=0)
        phi, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                       DisplacementField.zeros(small_problem.fixed.dims), cascade, short_run())
        assert [e["step"] for e in trace.entries] == [1, 2, 3]
        assert set(trace.entries[0]) == {"step", "sim", "lncc", "reg", "total", "lr", "dice", "elapsed_ms"}
        assert len(trace.entries[0]["sim"]) == 3
        assert trace.entries[0]["elapsed_ms"] is None
        assert trace.error is None
        assert phi.dims == small_problem.fixed.dims

    def test_first_step_scores_phi0(self, tiny_unet, small_problem):
        phi0 = DisplacementField.constant(small_problem.fixed.dims, (0.3, -0.2, 0.1))
        cascade = init_cascade(tiny_unet, seed=0)
        _, trace = instance_optimize(small_problem.remapped, small_problem.fixed, phi0, cascade, short_run(steps=1))
        warped = warp(small_problem.remapped, phi0)
        expected = -3.0 * lncc(warped, small_problem.fixed, 9) + 0.1 * diffusion_reg(phi0)
        assert trace.entries[0]["total"] == pytest.approx(expected, rel=1e-5)

    def test_warmup_schedule_in_trace(self, tiny_unet, small_problem):
        cascade = init_cascade(tiny_unet, seed=0)
        _, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                     DisplacementField.zeros(small_problem.fixed.dims), cascade,
                                     short_run(steps=3, base_lr=5e-4, warmup=2))
        assert [e["lr"] for e in trace.entries] == pytest.approx([2.5e-4, 5e-4, 5e-4])

    def test_phi0_and_images_stay_frozen(self, tiny_unet, small_problem):
        phi0 = DisplacementField.constant(small_problem.fixed.dims, (0.1, 0.0, 0.0))
        before = (phi0.data.copy(), small_problem.remapped.data.copy())
        cascade = init_cascade(tiny_unet, seed=0)
        instance_optimize(small_problem.remapped, small_problem.fixed, phi0, cascade, short_run())
        assert np.array_equal(phi0.data, before[0])
        assert np.array_equal(small_problem.remapped.data, before[1])
        # only the cascade moved
        fresh = init_cascade(tiny_unet, seed=0).named_parameters()
        moved = [k for k, p in cascade.named_parameters().items() if not np.array_equal(p.data, fresh[k].data)]
        assert moved

    def test_returns_best_loss_field(self, tiny_unet, small_problem):
        cascade = init_cascade(tiny_unet, seed=0)
        phi, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                       DisplacementField.zeros(small_problem.fixed.dims), cascade,
                                       short_run(steps=4, base_lr=5e-2))
        totals = [e["total"] for e in trace.entries]
        assert trace.best_total == min(totals)
        assert trace.best_step == int(np.argmin(totals)) + 1
        assert trace.selection == "best_loss"
        assert trace.final_ndv is not None

    def test_deterministic(self, tiny_unet, small_problem):
        runs = []
        for _ in range(2):
            cascade = init_cascade(tiny_unet, seed=0)
            phi, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                           DisplacementField.zeros(small_problem.fixed.dims), cascade, short_run())
            runs.append((phi.data, [e["total"] for e in trace.entries]))
        assert np.array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_streams_jsonl(self, tiny_unet, small_problem, tmp_path):
        cascade = init_cascade(tiny_unet, seed=0)
        stream = io.StringIO()
        _, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                     DisplacementField.zeros(small_problem.fixed.dims), cascade,
                                     short_run(steps=2), trace_file=stream)
        lines = stream.getvalue().splitlines()
        assert [json.loads(line) for line in lines] == trace.entries
        path = trace.write_jsonl(tmp_path / "trace.jsonl")
        assert path.read_text(encoding="utf-8").splitlines() == lines

    def test_dice_every(self, tiny_unet, small_problem):
        cascade = init_cascade(tiny_unet, seed=0)
        _, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                     DisplacementField.zeros(small_problem.fixed.dims), cascade,
                                     short_run(steps=4, dice_every=2),
                                     labels=(small_problem.labels, small_problem.fixed_labels))
        scored = [e["dice"] is not None for e in trace.entries]
        assert scored == [True, True, False, True]
        assert 0.0 <= trace.entries[0]["dice"] <= 1.0

    def test_timing_when_enabled(self, tiny_unet, small_problem):
        cascade = init_cascade(tiny_unet, seed=0)
        _, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                     DisplacementField.zeros(small_problem.fixed.dims), cascade,
                                     short_run(steps=1, trace_timing=True))
        assert trace.entries[0]["elapsed_ms"] >= 0.0

    def test_gate_and_routing_recorded_separately(self, tiny_unet, small_problem):
        gate = GateResult(small_problem.remapped, small_problem.fixed, False, 0.93, styled=True, mode="always")
        cascade = init_cascade(tiny_unet, seed=0)
        _, trace = instance_optimize(small_problem.remapped, small_problem.fixed,
                                     DisplacementField.zeros(small_problem.fixed.dims), cascade,
                                     short_run(steps=1), gate=gate)
        summary = trace.summary()
        assert summary["gate_fired"] is False
        assert summary["gate_value"] == 0.93
        assert summary["style_applied"] is True
        assert summary["style_mode"] == "always"
        assert summary["steps"] == 1
        assert "entries" not in summary

    def test_non_finite_gradient_stops_run(self, tiny_unet, small_problem):
        cascade = init_cascade(tiny_unet, seed=0)
        phi0 = DisplacementField.constant(small_problem.fixed.dims, (0.1, 0.1, 0.1))
        with patch("regadapt.pipeline.adam_step", side_effect=NumericalError("non-finite gradient")):
            phi, trace = instance_optimize(small_problem.remapped, small_problem.fixed, phi0, cascade, short_run())
        assert len(trace) == 1
        assert "non-finite gradient" in trace.error
        assert trace.best_step == 1
        assert np.array_equal(phi.data, phi0.data)

    def test_dims_mismatch(self, tiny_unet, small_problem):
        cascade = init_cascade(tiny_unet, seed=0)
        with pytest.raises(ShapeError):
            instance_optimize(small_problem.remapped, small_problem.fixed, DisplacementField.zeros((8, 8, 8)),
                              cascade, short_run())


class TestIOTrace:
    """Tests for the trace container."""

    def test_empty_summary(self):
        assert IOTrace().summary()["steps"] == 0


# =============================================================================
# Tests: Pretraining
# =============================================================================

class TestPretrain:
    """Tests for pretrain_refiners."""

    def test_zero_steps_keeps_initialization(self, tiny_unet, small_problem, tmp_path):
        cascade = init_cascade(tiny_unet, seed=4)
        result = pretrain_refiners([(small_problem.remapped, small_problem.fixed)], cascade, steps=0,
                                   checkpoint=tmp_path / "refiner.bin")
        assert result.losses == []
        loaded = load_cascade(tmp_path / "refiner.bin").named_parameters()
        fresh = init_cascade(tiny_unet, seed=4).named_parameters()
        assert all(np.array_equal(loaded[k].data, fresh[k].data) for k in fresh)

    def test_round_robin_over_shuffled_pairs(self, tiny_unet, small_problem):
        pairs = [(small_problem.remapped, small_problem.fixed), (small_problem.fixed, small_problem.remapped)]
        log = io.StringIO()
        result = pretrain_refiners(pairs, init_cascade(tiny_unet, seed=0), steps=3, lr=1e-3, seed=9, log_file=log)
        order = np.random.default_rng(9).permutation(2)
        assert [r["pair"] for r in result.losses] == [int(order[0]), int(order[1]), int(order[0])]
        assert len(log.getvalue().splitlines()) == 3
        assert result.skipped == []

    def test_needs_pairs(self, tiny_unet):
        with pytest.raises(ConfigError):
            pretrain_refiners([], init_cascade(tiny_unet, seed=0))

    def test_negative_steps(self, tiny_unet, small_problem):
        with pytest.raises(ConfigError):
            pretrain_refiners([(small_problem.remapped, small_problem.fixed)], init_cascade(tiny_unet, seed=0),
                              steps=-1)

    def test_skips_non_finite_gradients(self, tiny_unet, small_problem):
        with patch("regadapt.pipeline.adam_step", side_effect=NumericalError("nan")):
            result = pretrain_refiners([(small_problem.remapped, small_problem.fixed)],
                                       init_cascade(tiny_unet, seed=0), steps=2)
        assert result.skipped == [1, 2]
        assert all(r["skipped"] for r in result.losses)

