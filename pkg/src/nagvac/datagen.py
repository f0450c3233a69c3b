"""Datasets: simulation designs, delimited-file I/O, standardisation, splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

MISSING = {"", "na", "nan", "null", "none", "?"}


@dataclass
class Standardizer:
    """Per-column affine map fitted on training rows."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        sd[sd == 0.0] = 1.0
        return cls(X.mean(axis=0), sd)

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.sd

    def inverse(self, Z):
        return np.asarray(Z, dtype=float) * self.sd + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["sd"], dtype=float))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    columns: list
    response: str = "y"
    family: str | None = None
    subject: np.ndarray | None = None
    subject_column: str | None = None
    expansions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError("X and y have different row counts")
        if self.subject is not None:
            self.subject = np.asarray(self.subject)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            subject=None if self.subject is None else self.subject[idx],
        )


def gen_binary_sim(n: int, seed: int = 0) -> Dataset:
    """20 uniform covariates; ``y = 1`` iff ``5 - 2(x1 + 2 x2)^2 + 4 x3 x4 + 3 x5 >= 0``."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, 20))
    a = 5.0 - 2.0 * (X[:, 0] + 2.0 * X[:, 1]) ** 2 + 4.0 * X[:, 2] * X[:, 3] + 3.0 * X[:, 4]
    y = (a >= 0.0).astype(float)
    return Dataset(X, y, [f"x{j + 1}" for j in range(20)], family="binomial")


def continuous_mean(X) -> np.ndarray:
    x = [None] + [X[:, j] for j in range(X.shape[1])]
    return (
        5.0
        + 10.0 * x[1]
        + 10.0 / (x[2] ** 2 + 1.0)
        + 5.0 * x[3] * x[4]
        + 2.0 * x[4]
        + 5.0 * x[4] ** 2
        + 5.0 * x[5]
        + 2.0 * x[6]
        + 10.0 / (x[7] ** 2 + 1.0)
        + 5.0 * x[8] * x[9]
        + 5.0 * x[9] ** 2
        + 5.0 * x[10]
    )


def gen_continuous_sim(n: int, seed: int = 0) -> Dataset:
    """20 AR(1)-correlated normal covariates (corr ``0.5^|i-j|``), nonlinear mean, N(0,1) noise."""
    rng = np.random.default_rng(seed)
    idx = np.arange(20)
    cov = 0.5 ** np.abs(idx[:, None] - idx[None, :])
    L = np.linalg.cholesky(cov)
    X = rng.standard_normal((n, 20)) @ L.T
    y = continuous_mean(X) + rng.standard_normal(n)
    return Dataset(X, y, [f"x{j + 1}" for j in range(20)], family="gaussian")


def gen_panel_sim(n_subjects: int = 1000, T: int = 20, seed: int = 0) -> Dataset:
    """Binary panel with a subject-level random intercept of variance 0.1."""
    rng = np.random.default_rng(seed)
    n = n_subjects * T
    X = rng.uniform(-1.0, 1.0, size=(n, 5))
    b = rng.normal(0.0, np.sqrt(0.1), size=n_subjects)
    subject = np.repeat(np.arange(n_subjects), T)
    eps = rng.standard_normal(n)
    a = (
        2.0
        + 3.0 * (X[:, 0] - 2.0 * X[:, 1]) ** 2
        - 5.0 * X[:, 2] / (1.0 + X[:, 3]) ** 2
        - 5.0 * X[:, 4]
        + b[subject]
        + eps
    )
    if not np.all(np.isfinite(a)):
        raise DataError("non-finite latent value in panel simulation")
    y = (a > 0.0).astype(float)
    return Dataset(
        X, y, [f"x{j + 1}" for j in range(5)], family="binomial", subject=subject, subject_column="subject"
    )


def split(ds: Dataset, fraction: float = 0.75, seed: int = 0):
    """Random row split; ``round(fraction * n)`` rows go to the training set."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    k = int(round(fraction * ds.n))
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def split_panel(ds: Dataset, n_train: int):
    """First ``n_train`` rows of each subject (in file order) train, the rest test."""
    if ds.subject is None:
        raise DataError("panel split needs subject ids")
    train_idx, test_idx = [], []
    seen = {}
    for i, s in enumerate(ds.subject):
        k = seen.get(s, 0)
        (train_idx if k < n_train else test_idx).append(i)
        seen[s] = k + 1
    return ds.subset(np.array(train_idx, dtype=int)), ds.subset(np.array(test_idx, dtype=int))


def _parse_float(cell: str, line: int, col: str) -> float:
    if cell.strip().lower() in MISSING:
        raise DataError(f"line {line}: missing value in column {col!r}")
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {line}: non-numeric value {cell!r} in column {col!r}") from None


def load_table(
    path,
    response: str,
    subject: str | None = None,
    categorical=(),
    family=None,
    *,
    levels: dict | None = None,
    require_response: bool = True,
) -> Dataset:
    """Read a comma-separated file with a header row.

    Columns named in ``categorical`` are one-hot expanded (one indicator per
    level, levels sorted, first level dropped); all other covariates must be
    numeric.  ``levels`` fixes the level list of each categorical column
    (as recorded at training time) so that test files expand identically.
    With ``require_response=False`` a missing response column yields NaNs.
    """
    categorical = list(categorical or ())
    levels = dict(levels or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            rows.append((line, row))
    has_response = response in header
    needed = ([response] if require_response else []) + ([subject] if subject else []) + categorical
    for name in needed:
        if name not in header:
            raise DataError(f"column {name!r} not found in header")
    if not rows:
        raise DataError(f"{path}: no data rows")
    ri = header.index(response) if has_response else None
    si = header.index(subject) if subject else None
    if ri is None:
        y = np.full(len(rows), np.nan)
    else:
        y = np.array([_parse_float(r[ri], line, response) for line, r in rows])
    subj = None
    if si is not None:
        subj = np.array([r[si].strip() for _, r in rows])
        if any(s.lower() in MISSING for s in subj):
            raise DataError(f"missing subject id in column {subject!r}")
    cols, blocks, expansions = [], [], {}
    for j, name in enumerate(header):
        if j == ri or j == si:
            continue
        if name in categorical:
            vals = [r[j].strip() for _, r in rows]
            levs = levels.get(name) or sorted(set(vals))
            unknown = sorted(set(vals) - set(levs))
            if unknown:
                raise DataError(f"column {name!r} has levels {unknown} not seen in training")
            expansions[name] = list(levs)
            for lev in levs[1:]:
                cols.append(f"{name}={lev}")
                blocks.append(np.array([v == lev for v in vals], dtype=float))
        else:
            cols.append(name)
            blocks.append(np.array([_parse_float(r[j], line, name) for line, r in rows]))
    X = np.column_stack(blocks) if blocks else np.zeros((len(rows), 0))
    return Dataset(X, y, cols, response, family, subj, subject, expansions)


def _fmt(v) -> str:
    return repr(float(v))


def write_table(ds: Dataset, path) -> None:
    """Write with full round-trip float precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ([ds.subject_column or "subject"] if ds.subject is not None else []) + list(ds.columns)
        w.writerow(head + [ds.response])
        for i in range(ds.n):
            lead = [str(ds.subject[i])] if ds.subject is not None else []
            w.writerow(lead + [_fmt(v) for v in ds.X[i]] + [_fmt(ds.y[i])])
