"""
Tests for .vol file I/O, landmark CSVs and the synthetic problem generator.

Run with: python -m pytest regadapt/tests/test_volume_io.py -v
"""
import json

import numpy as np
import pytest

from ..errors import ConfigError, VolumeFormatError
from ..fields import ndv
from ..grids import DisplacementField, LabelMap, LandmarkSet, Volume3D
from ..metrics import tre
from ..volume_io import (
    apply_contrast,
    load_field,
    load_labels,
    load_landmarks,
    load_pair_dir,
    load_volume,
    save_field,
    save_labels,
    save_landmarks,
    save_problem,
    save_volume,
    synth_problem,
)


def write_raw(path, values, dims, kind="volume"):
    path.write_bytes(np.asarray(values, dtype="<f4").tobytes())
    (path.parent / (path.name + ".json")).write_text(
        json.dumps({"dims": list(dims), "spacing": [1.0, 1.0, 1.0], "kind": kind}), encoding="utf-8"
    )


# =============================================================================
# Tests: .vol Files
# =============================================================================

class TestVolumeFiles:
    """Tests for the raw payload + JSON manifest format."""

    def test_round_trip_is_bit_exact(self, rng, tmp_path):
        v = Volume3D(rng.standard_normal((8, 8, 8)), spacing=(1.0, 1.5, 2.0))
        loaded = load_volume(save_volume(v, tmp_path / "v.vol"))
        assert np.array_equal(loaded.data, v.data)
        assert loaded.spacing == (1.0, 1.5, 2.0)

    def test_payload_is_little_endian_w_fastest(self, tmp_path):
        data = np.zeros((2, 2, 2))
        data[0, 0, 1] = 1.5
        path = save_volume(Volume3D(data), tmp_path / "v.vol")
        raw = path.read_bytes()
        assert len(raw) == 32
        assert np.frombuffer(raw[4:8], dtype="<f4")[0] == 1.5

    def test_manifest_records_dims_and_kind(self, tmp_path):
        save_volume(Volume3D(np.zeros((2, 3, 4))), tmp_path / "v.vol")
        manifest = json.loads((tmp_path / "v.vol.json").read_text(encoding="utf-8"))
        assert manifest["dims"] == [2, 3, 4]
        assert manifest["kind"] == "volume"

    def test_size_mismatch(self, tmp_path):
        write_raw(tmp_path / "v.vol", np.zeros(7), (2, 2, 2))
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "v.vol")

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "v.vol").write_bytes(np.zeros(8, dtype="<f4").tobytes())
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "v.vol")

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "v.vol").write_bytes(np.zeros(8, dtype="<f4").tobytes())
        (tmp_path / "v.vol.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "v.vol")

    def test_non_finite_values_rejected(self, tmp_path):
        values = np.zeros(8)
        values[3] = np.nan
        write_raw(tmp_path / "v.vol", values, (2, 2, 2))
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "v.vol")

    def test_kind_mismatch(self, tmp_path):
        save_labels(LabelMap(np.ones((2, 2, 2), dtype=np.int32)), tmp_path / "l.vol")
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "l.vol")

    def test_labels_round_trip(self, rng, tmp_path):
        labels = LabelMap(rng.integers(0, 4, (5, 6, 7)))
        loaded = load_labels(save_labels(labels, tmp_path / "l.vol"))
        assert np.array_equal(loaded.data, labels.data)
        assert loaded.data.dtype == np.int32

    def test_field_round_trip(self, rng, tmp_path):
        u = DisplacementField(rng.standard_normal((3, 4, 5, 6)))
        path = save_field(u, tmp_path / "u.vol", spacing=(2.0, 2.0, 2.0))
        assert len(path.read_bytes()) == 4 * 3 * 120
        assert np.array_equal(load_field(path).data, u.data)


class TestLandmarks:
    """Tests for the six-column landmark CSV."""

    def test_round_trip(self, rng, tmp_path):
        lm = LandmarkSet(rng.uniform(0, 10, (5, 3)), rng.uniform(0, 10, (5, 3)))
        loaded = load_landmarks(save_landmarks(lm, tmp_path / "lm.csv"))
        assert np.array_equal(loaded.moving, lm.moving)
        assert np.array_equal(loaded.fixed, lm.fixed)

    def test_blank_lines_are_skipped(self, tmp_path):
        (tmp_path / "lm.csv").write_text("1,2,3,4,5,6\n\n7,8,9,10,11,12\n", encoding="utf-8")
        assert len(load_landmarks(tmp_path / "lm.csv")) == 2

    def test_short_row_rejected(self, tmp_path):
        (tmp_path / "lm.csv").write_text("1,2,3,4,5\n", encoding="utf-8")
        with pytest.raises(VolumeFormatError):
            load_landmarks(tmp_path / "lm.csv")

    def test_non_numeric_rejected(self, tmp_path):
        (tmp_path / "lm.csv").write_text("1,2,3,4,5,x\n", encoding="utf-8")
        with pytest.raises(VolumeFormatError):
            load_landmarks(tmp_path / "lm.csv")


# =============================================================================
# Tests: Synthetic Problems
# =============================================================================

class TestSynthProblem:
    """Tests for the seeded phantom generator."""

    def test_deterministic_in_seed(self):
        a = synth_problem(seed=3, dims=(12, 12, 12))
        b = synth_problem(seed=3, dims=(12, 12, 12))
        c = synth_problem(seed=4, dims=(12, 12, 12))
        assert np.array_equal(a.phantom.data, b.phantom.data)
        assert np.array_equal(a.true_field.data, b.true_field.data)
        assert np.array_equal(a.landmarks.fixed, b.landmarks.fixed)
        assert not np.array_equal(a.true_field.data, c.true_field.data)

    def test_identity_contrast_keeps_phantom(self):
        problem = synth_problem(seed=1, dims=(12, 12, 12), contrast="identity")
        assert np.array_equal(problem.remapped.data, problem.phantom.data)

    def test_inverted_contrast(self):
        problem = synth_problem(seed=1, dims=(12, 12, 12), contrast="inverted")
        phantom = problem.phantom.data
        assert np.array_equal(problem.remapped.data, phantom.max() - phantom)

    def test_gamma_contrast(self):
        problem = synth_problem(seed=1, dims=(12, 12, 12), contrast="gamma")
        assert np.allclose(problem.remapped.data, problem.phantom.data ** 2, atol=1e-6)

    def test_unknown_contrast(self):
        with pytest.raises(ConfigError):
            synth_problem(seed=1, dims=(12, 12, 12), contrast="negative")
        with pytest.raises(ConfigError):
            apply_contrast(np.zeros(3), "negative")

    def test_at_least_three_classes(self):
        problem = synth_problem(seed=0, dims=(24, 24, 24))
        assert len(problem.labels.classes()) >= 3

    @pytest.mark.parametrize("max_disp", [0.4, 1.0, -0.1])
    def test_max_disp_bound(self, max_disp):
        with pytest.raises(ConfigError):
            synth_problem(seed=0, dims=(12, 12, 12), max_disp=max_disp)

    def test_tiny_dims_rejected(self):
        with pytest.raises(ConfigError):
            synth_problem(seed=0, dims=(3, 12, 12))

    def test_field_never_folds(self):
        for seed in range(100):
            problem = synth_problem(seed=seed, dims=(24, 24, 24), max_disp=0.3)
            assert ndv(problem.true_field) == 0.0, f"seed {seed}"
            assert problem.true_field.max_abs() <= 0.3 + 1e-6

    def test_interior_carries_the_displacement(self):
        for seed in range(5):
            u = synth_problem(seed=seed, dims=(32, 32, 32), max_disp=0.3).true_field.data
            interior = u[:, 4:-4, 4:-4, 4:-4]
            assert np.abs(interior).max() >= 0.15, f"seed {seed}"
            assert np.linalg.norm(u, axis=0).mean() >= 0.075, f"seed {seed}"

    def test_zero_displacement(self):
        problem = synth_problem(seed=2, dims=(12, 12, 12), max_disp=0.0)
        assert not problem.true_field.data.any()
        assert np.array_equal(problem.fixed.data, problem.phantom.data)
        assert np.array_equal(problem.fixed_labels.data, problem.labels.data)

    def test_landmarks_agree_with_true_field(self):
        problem = synth_problem(seed=6, dims=(16, 16, 16), spacing=(1.0, 2.0, 1.5))
        result = tre(problem.landmarks, problem.true_field, problem.phantom.spacing)
        assert len(result["distances"]) == 20
        assert result["mean"] == pytest.approx(0.0, abs=1e-5)


class TestProblemFiles:
    """Tests for save_problem / load_pair_dir."""

    def test_save_problem_writes_every_artifact(self, small_problem, tmp_path):
        paths = save_problem(small_problem, tmp_path, prefix="0005_")
        assert set(paths) == {"phantom", "moving", "fixed", "labels", "fixed_labels", "field", "landmarks"}
        assert (tmp_path / "0005_moving.vol.json").exists()
        assert np.array_equal(load_field(paths["field"]).data, small_problem.true_field.data)

    def test_load_pair_dir_matches_stems(self, small_problem, tmp_path):
        save_problem(small_problem, tmp_path, prefix="b_")
        save_problem(small_problem, tmp_path, prefix="a_")
        (tmp_path / "c_fixed.vol").write_bytes(b"")
        pairs = load_pair_dir(tmp_path)
        assert len(pairs) == 2
        moving, fixed = pairs[0]
        assert np.array_equal(moving.data, small_problem.remapped.data)
        assert np.array_equal(fixed.data, small_problem.fixed.data)

    def test_load_pair_dir_needs_directory(self, tmp_path):
        with pytest.raises(VolumeFormatError):
            load_pair_dir(tmp_path / "missing")
