from pathlib import Path

import numpy as np
import pytest

from sparsevb.data import (
    DIABETES_FEATURES,
    ParseError,
    SchemaError,
    kfold_indices,
    kfold_rmse,
    load_csv,
    standardize,
    validate_diabetes,
    write_synthetic_fixture,
)
from sparsevb.vbl import HyperParams

FIXTURE = Path(__file__).parent / "fixtures" / "synthetic.csv"


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_small_table(self, tmp_path):
        path = _write(tmp_path, "a,y,b\n1,10,4\n2,20,6\n6,30,5\n")
        ds = load_csv(path, "y")
        assert ds.names == ["a", "b"] and ds.n == 3 and ds.p == 2
        np.testing.assert_array_equal(ds.raw_X, [[1, 4], [2, 6], [6, 5]])
        np.testing.assert_allclose(ds.X.sum(axis=0), 0.0, atol=1e-15)
        np.testing.assert_allclose(np.linalg.norm(ds.X, axis=0), 1.0, rtol=1e-14)
        np.testing.assert_allclose(ds.Y, [-10.0, 0.0, 10.0])
        X, Y = ds.record.invert(ds.X, ds.Y)
        np.testing.assert_allclose(X, ds.raw_X, atol=1e-12)
        np.testing.assert_allclose(Y, ds.raw_Y, atol=1e-12)

    def test_std_scale(self, tmp_path):
        ds = load_csv(_write(tmp_path, "a,y\n1,0\n2,1\n4,3\n"), "y", scale="std")
        assert ds.X[:, 0].std(ddof=1) == pytest.approx(1.0)

    def test_blank_lines_skipped(self, tmp_path):
        assert load_csv(_write(tmp_path, "a,y\n1,2\n\n3,5\n,\n"), "y").n == 2

    @pytest.mark.parametrize(
        "text,row,column",
        [
            ("a,y\n1,2\n3\n", 2, None),
            ("a,y\n1,2\nx,3\n", 2, "a"),
            ("a,y\n1,nan\n", 1, "y"),
            ("a,y\n1,\n", 1, "y"),
        ],
    )
    def test_parse_errors_locate_the_cell(self, tmp_path, text, row, column):
        with pytest.raises(ParseError) as info:
            load_csv(_write(tmp_path, text), "y")
        assert info.value.row == row and info.value.column == column
        assert f"row {row}" in str(info.value)

    @pytest.mark.parametrize("text", ["", "a,y\n", "a,b\n1,2\n"])
    def test_structural_errors(self, tmp_path, text):
        with pytest.raises(ParseError):
            load_csv(_write(tmp_path, text), "y")

    def test_constant_column(self, tmp_path):
        with pytest.raises(ValueError):
            load_csv(_write(tmp_path, "a,y\n1,2\n1,3\n"), "y")

    def test_unknown_scale(self):
        with pytest.raises(ValueError):
            standardize(np.eye(2), np.ones(2), scale="max")

    def test_coefficients_on_raw_scale(self):
        rng = np.random.default_rng(0)
        X = rng.normal(3.0, 2.0, size=(10, 3))
        Y = rng.normal(size=10)
        Xs, _, rec = standardize(X, Y)
        beta = rng.normal(size=3)
        b, b0 = rec.coef_to_original(beta)
        np.testing.assert_allclose(X @ b + b0, Xs @ beta + rec.y_mean, rtol=1e-12)


class TestFixture:
    def test_fixture_is_reproducible(self, tmp_path):
        write_synthetic_fixture(tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_bytes() == FIXTURE.read_bytes()

    def test_fixture_contents(self):
        ds = load_csv(FIXTURE, "y")
        assert ds.n == 20 and ds.names == ["x1", "x2", "x3"]
        beta, noise = write_synthetic_fixture(Path("/dev/null"))
        resid = ds.raw_Y - ds.raw_X @ beta - 10.0
        assert np.max(np.abs(resid)) <= 0.5 and noise == 0.25


class TestKFold:
    def test_partition_and_determinism(self):
        folds = kfold_indices(23, 5, seed=3)
        assert sorted(np.concatenate(folds).tolist()) == list(range(23))
        assert [f.size for f in folds] == [5, 5, 5, 4, 4]
        again = kfold_indices(23, 5, seed=3)
        assert all(np.array_equal(a, b) for a, b in zip(folds, again))
        with pytest.raises(ValueError):
            kfold_indices(3, 5, 0)
        with pytest.raises(ValueError):
            kfold_indices(10, 1, 0)

    def test_noiseless_rmse_vanishes(self, tmp_path):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(40, 3))
        Y = X @ np.array([2.0, -1.0, 0.5]) + 4.0
        lines = ["a,b,c,y"] + [",".join(repr(float(v)) for v in [*x, y]) for x, y in zip(X, Y)]
        ds = load_csv(_write(tmp_path, "\n".join(lines) + "\n"), "y")
        rmse = kfold_rmse(ds, HyperParams(1e-6, 1e-6), k=5, seed=0, max_iter=200)
        assert rmse < 1e-4

    def test_rmse_is_seeded(self):
        ds = load_csv(FIXTURE, "y")
        hp = HyperParams(0.1, 1.0)
        assert kfold_rmse(ds, hp, seed=2) == kfold_rmse(ds, hp, seed=2)


class TestDiabetesSchema:
    def _table(self, tmp_path, names, n=442, label="y", y=100.0):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(n, len(names)))
        lines = [",".join([*names, label])]
        lines += [",".join(repr(float(v)) for v in [*x, y + i % 7]) for i, x in enumerate(X)]
        return load_csv(_write(tmp_path, "\n".join(lines) + "\n"), label)

    def test_accepts_expected_layout(self, tmp_path):
        validate_diabetes(self._table(tmp_path, DIABETES_FEATURES))

    @pytest.mark.parametrize(
        "kw",
        [
            dict(names=DIABETES_FEATURES[:-1]),
            dict(names=DIABETES_FEATURES, label="target"),
            dict(names=DIABETES_FEATURES, n=400),
            dict(names=DIABETES_FEATURES, y=-50.0),
        ],
    )
    def test_rejects(self, tmp_path, kw):
        with pytest.raises(SchemaError):
            validate_diabetes(self._table(tmp_path, **kw))

    def test_scikit_learn_copy(self, tmp_path):
        pytest.importorskip("sklearn")
        from sparsevb.data import fetch_diabetes_csv

        ds = load_csv(fetch_diabetes_csv(tmp_path / "diabetes.csv"), "y")
        validate_diabetes(ds)
        assert ds.n == 442
