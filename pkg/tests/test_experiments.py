import csv
import json

import numpy as np
import pytest

from sparsevb.experiments import (
    ArtifactBundle,
    ExperimentConfig,
    ExperimentError,
    PhaseTimer,
    block_phantom,
    fit_tv_toy,
    run_experiment,
    tikhonov_path,
)
from sparsevb.online import BatchPlan
from sparsevb.tvop import blur_apply, read_image_csv, read_pgm, write_image_csv
from sparsevb.vbl import StoppingRule

SMALL_2D = dict(points=101, contour_stride=5, n_perturb=4)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _digest_files(bundle: ArtifactBundle) -> dict[str, bytes]:
    return {k: p.read_bytes() for k, p in bundle.files.items() if k != "timing.csv"}


class TestConfig:
    def test_defaults_fill_in(self, tmp_path):
        cfg = ExperimentConfig("tv-toy", tmp_path)
        assert cfg.params["p0"] == 28 and cfg.stop.max_iter == 100

    def test_hash_ignores_output_dir_and_reps(self, tmp_path):
        a = ExperimentConfig("vbl-2d", tmp_path / "a", reps=3)
        b = ExperimentConfig("vbl-2d", tmp_path / "b", reps=7)
        c = ExperimentConfig("vbl-2d", tmp_path / "a", params=dict(points=11))
        assert a.config_hash() == b.config_hash() != c.config_hash()

    @pytest.mark.parametrize(
        "kw",
        [dict(experiment="nope"), dict(tuner="nope"), dict(reps=0), dict(params=dict(bogus=1))],
    )
    def test_validation(self, tmp_path, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**{"experiment": "vbl-2d", "out_dir": tmp_path, **kw})

    def test_missing_input_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig("tv-toy", tmp_path, params=dict(image=str(tmp_path / "none.pgm")))


class TestBundles:
    def test_vbl_2d_bundle_and_rerun(self, tmp_path):
        a = run_experiment(ExperimentConfig("vbl-2d", tmp_path / "a", params=SMALL_2D))
        b = run_experiment(ExperimentConfig("vbl-2d", tmp_path / "b", params=SMALL_2D))
        assert set(a.files) == {"contour.csv", "oracle.csv", "trace.csv", "timing.csv", "manifest.json"}
        assert _digest_files(a) == _digest_files(b)
        man = json.loads(a.files["manifest.json"].read_text())
        assert man["config_mismatch"] is False and man["previous_config_hash"] is None
        assert set(man["outputs"]) == {"contour.csv", "oracle.csv", "trace.csv"}
        assert a.summary["min_perturbed_kl"] >= a.summary["kl"]
        assert len(_rows(a.files["contour.csv"])) == 21 * 21

    def test_config_mismatch_is_flagged(self, tmp_path):
        run_experiment(ExperimentConfig("vbl-2d", tmp_path, params=SMALL_2D))
        same = run_experiment(ExperimentConfig("vbl-2d", tmp_path, params=SMALL_2D))
        assert same.manifest["config_mismatch"] is False
        with pytest.warns(UserWarning):
            other = run_experiment(ExperimentConfig("vbl-2d", tmp_path, params=dict(SMALL_2D, points=51)))
        assert other.manifest["config_mismatch"] is True
        assert other.manifest["previous_config_hash"] == same.manifest["config_hash"]

    def test_module_errors_are_wrapped(self, tmp_path):
        img = tmp_path / "odd.csv"
        write_image_csv(img, np.ones((5, 5)))
        with pytest.raises(ExperimentError) as info:
            run_experiment(ExperimentConfig("tv-toy", tmp_path / "out", params=dict(image=str(img))))
        assert info.value.experiment == "tv-toy"
        assert isinstance(info.value.__cause__, ValueError)

    def test_tv_toy(self, tmp_path):
        cfg = ExperimentConfig("tv-toy", tmp_path, stop=StoppingRule(5, 1e-6, "delta"), params=dict(p0=8, omega=0.02))
        bundle = run_experiment(cfg)
        s = bundle.summary
        assert s["iterations"] <= 5 and 0 < s["err_m"] < 1
        for stem in ("truth", "data", "tikhonov", "mean", "map", "grad_norm", "grad_std"):
            assert read_pgm(bundle.files[stem + ".pgm"]).shape == (8, 8)
            assert read_image_csv(bundle.files[stem + ".csv"]).shape == (8, 8)
        np.testing.assert_array_equal(read_image_csv(bundle.files["truth.csv"]), block_phantom(8))
        assert len(_rows(bundle.files["tikhonov_path.csv"])) == 91

    def test_tv_truncated(self, tmp_path):
        cfg = ExperimentConfig(
            "tv-truncated", tmp_path, stop=StoppingRule(3, 1e-12, "delta"), params=dict(p0=16, omega=0.05, rho=0.8)
        )
        s = run_experiment(cfg).summary
        assert s["threshold"] == pytest.approx(0.008)
        assert 0 < s["n_tilde"] < 256 and 0 < s["truncation_error"] < 1
        assert np.isfinite(s["err_m"])

    def test_tv_online(self, tmp_path):
        cfg = ExperimentConfig("tv-online", tmp_path, params=dict(p0=8, omega=0.05, batch=16, first_iter=3))
        bundle = run_experiment(cfg)
        rows = _rows(bundle.files["trace.csv"])
        assert bundle.summary["batches"] == 8 == len(rows)
        assert int(rows[-1]["n_seen"]) == 64
        assert {"mean.pgm", "map.pgm", "grad_norm.pgm", "grad_std.pgm"} <= set(bundle.files)

    def test_tv_online_plan_must_match(self, tmp_path):
        cfg = ExperimentConfig("tv-online", tmp_path, batch=BatchPlan(5), params=dict(p0=8, batch=16))
        with pytest.raises(ExperimentError):
            run_experiment(cfg)

    def test_diabetes(self, tmp_path):
        pytest.importorskip("sklearn")
        cfg = ExperimentConfig("diabetes", tmp_path, reps=2, stop=StoppingRule(50, 1e-8, "delta"))
        bundle = run_experiment(cfg)
        assert bundle.summary["n"] == 442 and bundle.summary["p"] == 10
        cv = _rows(bundle.files["cv.csv"])
        assert [r["setting"] for r in cv] == ["tuned", "reference"]
        assert len(_rows(bundle.files["coefficients.csv"])) == 10
        timing = _rows(tmp_path / "timing.csv")
        assert {"load", "tune", "cv", "single_vbem_fit"} <= {r["phase"] for r in timing}


class TestHelpers:
    def test_tikhonov_limits(self):
        img = block_phantom(8)
        Y = blur_apply(img, 0.05).ravel()
        exact, = tikhonov_path(Y, 8, 0.05, [1e-14])
        np.testing.assert_allclose(exact, img, atol=1e-6)
        heavy, = tikhonov_path(Y, 8, 0.05, [1e12])
        assert np.max(np.abs(heavy)) < 1e-10

    def test_fit_tv_toy_tracks_errors(self):
        res = fit_tv_toy(p0=8, omega=0.02, stop=StoppingRule(4, 1e-12, "delta"))
        assert res.err_m.size == res.fit.n_iter == res.err_mu.size
        assert res.tikhonov_best[1] == min(e for _, e in res.tikhonov)

    def test_phase_timer(self, tmp_path):
        t = PhaseTimer()
        with t.phase("a"):
            pass
        med, iqr = t.repeat("b", lambda: None, 5)
        assert med >= 0 and iqr >= 0
        t.to_csv(tmp_path / "t.csv")
        rows = _rows(tmp_path / "t.csv")
        assert [r["phase"] for r in rows] == ["a", "b"] and rows[1]["reps"] == "5"
