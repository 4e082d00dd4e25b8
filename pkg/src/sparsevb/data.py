"""Tabular data ingestion, standardization and cross-validation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .vbl import HyperParams, StoppingRule, vbl_iterate

__all__ = [
    "ParseError",
    "SchemaError",
    "Standardization",
    "TabularDataset",
    "load_csv",
    "standardize",
    "validate_diabetes",
    "fetch_diabetes_csv",
    "DIABETES_FEATURES",
    "DIABETES_LABEL",
    "kfold_indices",
    "kfold_rmse",
    "write_synthetic_fixture",
]

DIABETES_FEATURES = ("age", "sex", "bmi", "bp", "s1", "s2", "s3", "s4", "s5", "s6")
DIABETES_LABEL = "y"
DIABETES_ROW_COUNTS = (442, 484)


class ParseError(ValueError):
    def __init__(self, msg: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)


class SchemaError(ValueError):
    pass


@dataclass
class Standardization:
    """Per-column centering and scaling of ``X`` plus centering of ``Y``.

    ``scale='l2'`` gives centered columns of unit Euclidean norm;
    ``scale='std'`` unit sample standard deviation.
    """

    x_mean: NDArray
    x_scale: NDArray
    y_mean: float
    scale: str = "l2"

    def apply(self, X: NDArray, Y: NDArray | None = None):
        Xs = (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale
        if Y is None:
            return Xs
        return Xs, np.asarray(Y, dtype=float) - self.y_mean

    def invert(self, Xs: NDArray, Ys: NDArray | None = None):
        X = np.asarray(Xs, dtype=float) * self.x_scale + self.x_mean
        if Ys is None:
            return X
        return X, np.asarray(Ys, dtype=float) + self.y_mean

    def coef_to_original(self, beta: NDArray) -> tuple[NDArray, float]:
        """Coefficients and intercept on the raw feature scale."""
        b = np.asarray(beta, dtype=float) / self.x_scale
        return b, float(self.y_mean - self.x_mean @ b)


def standardize(X: NDArray, Y: NDArray, scale: str = "l2") -> tuple[NDArray, NDArray, Standardization]:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    mu = X.mean(axis=0)
    Xc = X - mu
    if scale == "l2":
        s = np.linalg.norm(Xc, axis=0)
    elif scale == "std":
        s = Xc.std(axis=0, ddof=1)
    else:
        raise ValueError(f"unknown scale {scale!r}")
    if np.any(s == 0):
        raise ValueError("constant column cannot be standardized")
    rec = Standardization(mu, s, float(Y.mean()), scale)
    Xs, Ys = rec.apply(X, Y)
    return Xs, Ys, rec


@dataclass
class TabularDataset:
    names: list[str]
    X: NDArray  # standardized design
    Y: NDArray  # centered labels
    record: Standardization
    label: str = "y"
    source: str = ""
    raw_X: NDArray | None = field(default=None, repr=False)
    raw_Y: NDArray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def load_csv(path, label_column: str, scale: str = "l2") -> TabularDataset:
    """Read a headed numeric CSV; the label column may appear anywhere.

    Ragged rows and non-numeric or empty cells raise :class:`ParseError`
    with the 1-based data row and the column name.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file") from None
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not in header {header}")
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=i)
            vals = []
            for name, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", row=i, column=name) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {cell!r}", row=i, column=name)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows")
    data = np.array(rows)
    li = header.index(label_column)
    names = [h for j, h in enumerate(header) if j != li]
    X = np.delete(data, li, axis=1)
    Y = data[:, li]
    Xs, Ys, rec = standardize(X, Y, scale)
    return TabularDataset(names, Xs, Ys, rec, label_column, str(path), X, Y)


def validate_diabetes(ds: TabularDataset) -> None:
    """Check the diabetes table: 10 named features, label, plausible row count."""
    if tuple(ds.names) != DIABETES_FEATURES:
        raise SchemaError(f"expected features {DIABETES_FEATURES}, got {tuple(ds.names)}")
    if ds.label != DIABETES_LABEL:
        raise SchemaError(f"expected label {DIABETES_LABEL!r}, got {ds.label!r}")
    if ds.n not in DIABETES_ROW_COUNTS:
        raise SchemaError(f"expected {DIABETES_ROW_COUNTS} rows, got {ds.n}")
    if ds.raw_Y is not None and (ds.raw_Y.min() < 0 or ds.raw_Y.max() > 400):
        raise SchemaError("label outside the expected disease-progression range")


def fetch_diabetes_csv(path) -> Path:
    """Write the diabetes data (raw units) to ``path`` using scikit-learn's bundled copy."""
    try:
        from sklearn.datasets import load_diabetes
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise RuntimeError("fetching the diabetes data needs scikit-learn (pip install 'artifact[data]')") from exc
    d = load_diabetes(scaled=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(DIABETES_FEATURES) + [DIABETES_LABEL])
        for x, y in zip(d.data, d.target):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
    return path


def write_synthetic_fixture(path, n: int = 20, seed: int = 7) -> tuple[NDArray, float]:
    """Small CSV ``x1..x3, y`` with integer-valued features; returns ``(beta, noise)``."""
    rng = np.random.default_rng(seed)
    X = rng.integers(-5, 6, size=(n, 3)).astype(float)
    beta = np.array([1.5, -2.0, 0.5])
    e = rng.integers(-2, 3, size=n) / 4.0
    Y = X @ beta + 10.0 + e
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "x3", "y"])
        for xi, yi in zip(X, Y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
    return beta, 0.25


def kfold_indices(n: int, k: int, seed: int) -> list[NDArray]:
    if k < 2:
        raise ValueError("k must be >= 2")
    if n // k < 1:
        raise ValueError(f"{n} rows cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def kfold_rmse(ds: TabularDataset, hp: HyperParams, k: int = 5, seed: int = 0, max_iter: int = 10) -> float:
    """Pooled root-mean-squared prediction error of the VBEM mean over ``k`` folds.

    Features and labels are re-centered on each training fold so the
    intercept is fitted from training rows only; at most ``max_iter``
    iterations are run per fit.
    """
    folds = kfold_indices(ds.n, k, seed)
    sq = 0.0
    for test in folds:
        train = np.setdiff1d(np.arange(ds.n), test, assume_unique=True)
        x_mean = ds.X[train].mean(axis=0)
        y_mean = float(ds.Y[train].mean())
        fit = vbl_iterate(
            ds.X[train] - x_mean,
            ds.Y[train] - y_mean,
            hp,
            stop=StoppingRule(max_iter=max_iter, metric="delta", eps=1e-12),
            track=False,
        )
        pred = (ds.X[test] - x_mean) @ fit.triple.m + y_mean
        sq += float(np.sum((ds.Y[test] - pred) ** 2))
    return math.sqrt(sq / ds.n)
