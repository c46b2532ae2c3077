"""
Data ingestion, standardisation, cross-validation splits, random Fourier
features for a squared-exponential ARD kernel, and simple hyperparameter
heuristics.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import pdist

from .errors import ConfigError, DataError
from .variational import MeanFieldDist, SupportGrid

SUBSAMPLE_ROWS = 1000


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    columns: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError(f"X has shape {X.shape} but y has {y.shape[0]} rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> Dataset:
        return Dataset(self.X[rows], self.y[rows], self.columns)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_table(path: Union[str, os.PathLike]):
    """Numeric CSV as ``(header or None, values)``; a non-numeric first line
    is a header.  All malformed rows are reported together."""
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), 1)
                if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = None
    if not all(_is_number(c) for c in rows[0][1]):
        header = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(header) if header else len(rows[0][1])
    bad = []
    values = np.empty((len(rows), width))
    for k, (line, r) in enumerate(rows):
        if len(r) != width:
            bad.append(f"row {line}: {len(r)} cells, expected {width}")
            continue
        cells = [j for j, c in enumerate(r) if not _is_number(c)]
        if cells:
            bad.append(f"row {line}: non-numeric columns {cells}")
            continue
        values[k] = [float(c) for c in r]
    if bad:
        raise DataError(f"{path}: " + "; ".join(bad))
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite values")
    return header, values


def _target_index(path, header, width, target_column) -> int:
    if isinstance(target_column, str) and not target_column.lstrip("-").isdigit():
        if header is None or target_column not in header:
            raise DataError(f"{path}: no column named {target_column!r}")
        return header.index(target_column)
    tcol = int(target_column)
    if not -width <= tcol < width:
        raise DataError(f"{path}: target index {tcol} outside {width} columns")
    return tcol % width


def load_csv(path: Union[str, os.PathLike], target_column: Union[str, int] = -1,
             ) -> Dataset:
    """Read a comma-separated file; a non-numeric first line is a header.

    ``target_column`` is a header name or a (possibly negative) index.
    """
    header, values = read_table(path)
    width = values.shape[1]
    tcol = _target_index(path, header, width, target_column)
    keep = [k for k in range(width) if k != tcol]
    cols = tuple(header[k] for k in keep) if header else None
    return Dataset(values[:, keep], values[:, tcol], cols)


def load_features(path: Union[str, os.PathLike], d: int,
                  target_column: Union[str, int] = -1) -> np.ndarray:
    """Feature matrix with ``d`` columns; a file with ``d + 1`` columns has
    its target column dropped."""
    header, values = read_table(path)
    width = values.shape[1]
    if width == d:
        return values
    if width == d + 1:
        tcol = _target_index(path, header, width, target_column)
        return np.delete(values, tcol, axis=1)
    raise DataError(f"{path}: {width} columns, the model expects {d} features "
                    f"(optionally plus a target)")


def write_csv(path, dataset: Dataset, target_name: str = "y"):
    """Write features then target, with a header, at full precision."""
    cols = dataset.columns or tuple(f"x{k}" for k in range(dataset.d))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols) + [target_name])
        for x, y in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def apply(self, data: Dataset) -> Dataset:
        return Dataset(self.transform(data.X), data.y, data.columns)


def standardize(train: Dataset) -> tuple[Standardizer, Dataset]:
    """Per-column zero mean and unit variance; constant columns keep unit
    divisor and map to zero."""
    if train.n < 2:
        raise DataError("need at least two rows to standardize")
    mean = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    tr = Standardizer(mean, sd)
    return tr, tr.apply(train)


@dataclass(frozen=True)
class RffMap:
    """Paired cos/sin random Fourier features for an SE-ARD kernel."""

    frequencies: np.ndarray
    lengthscales: np.ndarray
    signal_sd: float
    b: int
    seed: int = field(default=0)

    def __post_init__(self):
        if self.b < 2 or self.b % 2:
            raise ConfigError(f"feature count b must be even and >= 2, got {self.b}")
        ls = np.asarray(self.lengthscales, dtype=float).reshape(-1)
        if np.any(ls <= 0):
            raise ConfigError("lengthscales must be positive")
        om = np.asarray(self.frequencies, dtype=float)
        if om.shape != (self.b // 2, ls.size):
            raise ConfigError(f"frequencies have shape {om.shape}")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "frequencies", om)

    @classmethod
    def create(cls, b: int, lengthscales, signal_sd: float = 1.0,
               seed: int = 0) -> RffMap:
        """Draw frequencies from the spectral density ``N(0, diag(1/l^2))``."""
        ls = np.asarray(lengthscales, dtype=float).reshape(-1)
        if b < 2 or b % 2:
            raise ConfigError(f"feature count b must be even and >= 2, got {b}")
        z = np.random.default_rng(seed).standard_normal((b // 2, ls.size))
        return cls(z / ls, ls, float(signal_sd), int(b), int(seed))

    @property
    def d(self) -> int:
        return self.lengthscales.size


def rff_features(fmap: RffMap, X) -> np.ndarray:
    """``Phi[i, 2k:2k+2] = sigma_w sqrt(2/b) [cos(w_k.x_i), sin(w_k.x_i)]``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != fmap.d:
        raise DataError(f"X has {X.shape[1]} columns, feature map expects {fmap.d}")
    proj = X @ fmap.frequencies.T
    out = np.empty((X.shape[0], fmap.b))
    amp = fmap.signal_sd * math.sqrt(2.0 / fmap.b)
    out[:, 0::2] = amp * np.cos(proj)
    out[:, 1::2] = amp * np.sin(proj)
    return out


def se_ard_kernel(x1, x2, lengthscales, signal_sd=1.0) -> float:
    r = (np.asarray(x1, float) - np.asarray(x2, float)) / np.asarray(lengthscales, float)
    return float(signal_sd**2 * math.exp(-0.5 * r @ r))


@dataclass(frozen=True)
class Hyperparams:
    lengthscales: np.ndarray
    signal_sd: float
    noise_var: float


def init_hyperparams(train: Dataset, seed: int = 0,
                     max_rows: int = SUBSAMPLE_ROWS) -> Hyperparams:
    """Median-distance lengthscales and target-variance scales.

    Lengthscale ``d`` is the median pairwise ``|x_id - x_jd|`` over at most
    ``max_rows`` rows; a zero median (constant column) falls back to 1.
    ``sigma_w^2 = var(y)``, ``sigma_hat^2 = 0.1 var(y)``.
    """
    if train.n < 10:
        raise ConfigError(f"need at least 10 training rows, got {train.n}")
    var_y = float(np.var(train.y))
    if not var_y > 0:
        raise ConfigError("target has zero variance")
    X = train.X
    if train.n > max_rows:
        rows = np.random.default_rng(seed).choice(train.n, max_rows, replace=False)
        X = X[np.sort(rows)]
    ls = np.array([np.median(pdist(X[:, [k]], "cityblock")) for k in range(train.d)])
    ls = np.where(ls > 0, ls, 1.0)
    return Hyperparams(ls, math.sqrt(var_y), 0.1 * var_y)


def make_support(signal_sd: float, mbar: int, b: int) -> SupportGrid:
    """``mbar`` evenly spaced levels on ``[-3 sigma_w, 3 sigma_w]`` per row.

    The levels are made exactly antisymmetric, so an odd ``mbar`` has an
    exact zero in the middle.
    """
    if mbar < 2:
        raise ConfigError(f"mbar must be at least 2, got {mbar}")
    if not signal_sd > 0:
        raise ConfigError("signal_sd must be positive")
    v = np.linspace(-3.0 * signal_sd, 3.0 * signal_sd, mbar)
    v = 0.5 * (v - v[::-1])
    return SupportGrid.shared(v, b)


def kfold(data: Union[Dataset, int], k: int, seed: int = 0,
          ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; fold sizes differ by at most one."""
    n = data if isinstance(data, int) else data.n
    if k < 2 or n < k:
        raise ConfigError(f"k-fold needs 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out


def discretized_gaussian_prior(grid: SupportGrid, signal_sd: float) -> MeanFieldDist:
    """``p_j[k] ∝ exp(-wbar_jk^2 / (2 sigma_w^2))`` per row."""
    if not signal_sd > 0:
        raise ConfigError("signal_sd must be positive")
    return MeanFieldDist(-grid.values**2 / (2.0 * signal_sd**2))

