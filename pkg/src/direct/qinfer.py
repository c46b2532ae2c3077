"""
Integer-arithmetic prediction with quantised posterior samples.

Features are mapped to signed integers by a symmetric affine quantiser.
Weight levels of an evenly spaced grid are small integers times a common
unit, so ``phi . w`` becomes one integer dot product (skipping zero
levels) and a single float rescale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .variational import QuantizedSample, SupportGrid, sample_indices

_EPS = np.finfo(float).eps
_INT32_MAX = np.iinfo(np.int32).max
_INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class AffineQuantizer:
    """``x ≈ scale * (q - zero_point)`` with ``q`` in the signed range."""

    scale: float
    zero_point: int = 0
    bit_width: int = 8

    def __post_init__(self):
        if self.bit_width not in (8, 16):
            raise ValueError("bit_width must be 8 or 16")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bit_width - 1) - 1

    @property
    def qmin(self) -> int:
        return -self.qmax

    @property
    def dtype(self):
        return np.int8 if self.bit_width == 8 else np.int16

    def quantize(self, x) -> np.ndarray:
        """Round half to even, then clamp to the representable range."""
        q = np.rint(np.asarray(x, dtype=float) / self.scale) + self.zero_point
        return np.clip(q, self.qmin, self.qmax).astype(self.dtype)

    def dequantize(self, q) -> np.ndarray:
        return self.scale * (np.asarray(q, dtype=float) - self.zero_point)


def quantize_features(phi, bit_width: int = 8):
    """Symmetric quantisation of a feature vector: ``scale = max|phi| / qmax``
    (1 for an all-zero vector), zero point 0."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if not np.all(np.isfinite(phi)):
        raise ValueError("features must be finite")
    qmax = 2 ** (bit_width - 1) - 1
    peak = float(np.abs(phi).max(initial=0.0))
    if peak == 0:
        scale = 1.0
    else:
        # a subnormal peak would underflow the scale to zero
        scale = max(peak / qmax, np.finfo(float).smallest_subnormal)
    fq = AffineQuantizer(scale, 0, bit_width)
    return fq.quantize(phi), fq


@dataclass(frozen=True)
class WeightLevels:
    """Grid values as ``unit * levels`` with integer ``levels``.

    Needs every grid row identical and evenly spaced, with each value an
    integer multiple of half the spacing (true for symmetric grids).
    """

    levels: np.ndarray
    unit: float
    values: np.ndarray

    @classmethod
    def from_grid(cls, grid: SupportGrid, rtol: float = 1e-9) -> WeightLevels:
        v = grid.values
        if not np.all(v == v[0]):
            raise ValueError("integer inference needs identical grid rows")
        row = v[0]
        step = np.diff(row)
        delta = float(step.mean())
        if not np.allclose(step, delta, rtol=rtol, atol=0):
            raise ValueError("grid levels are not evenly spaced")
        for den in (1, 2):
            unit = delta / den
            lv = row / unit
            if np.allclose(lv, np.rint(lv), rtol=0, atol=rtol * max(1.0, np.abs(lv).max())):
                lv = np.rint(lv).astype(np.int64)
                lv.setflags(write=False)
                return cls(lv, unit, row.copy())
        raise ValueError("grid values are not integer multiples of half the spacing")

    @property
    def max_abs(self) -> int:
        return int(np.abs(self.levels).max())

    def representation_error(self) -> np.ndarray:
        """``|value - unit * level|`` per grid index."""
        return np.abs(self.values - self.unit * self.levels)


class OpCounter:
    """Counts integer multiplies performed by :func:`integer_predict`."""

    def __init__(self):
        self.multiplies = 0
        self.calls = 0


def _accumulator(n_terms: int, qmax: int, lmax: int):
    bound = n_terms * qmax * lmax
    if bound <= _INT32_MAX:
        return np.int32
    if bound <= _INT64_MAX:
        return np.int64
    raise OverflowError(f"integer accumulator bound {bound} exceeds int64")


def integer_predict(qphi, sample: QuantizedSample, fq: AffineQuantizer,
                    wl: WeightLevels, counter: Optional[OpCounter] = None) -> float:
    """``phi . w`` by integer accumulation over non-zero weight levels.

    The accumulator is int32 when the worst case fits, otherwise int64;
    beyond that an ``OverflowError`` is raised.
    """
    qphi = np.asarray(qphi)
    if qphi.shape != (sample.grid.b,):
        raise ValueError(f"{qphi.size} features for a sample with b={sample.grid.b}")
    lv = wl.levels[sample.indices]
    nz = np.flatnonzero(lv)
    acc_t = _accumulator(nz.size, fq.qmax + abs(fq.zero_point), wl.max_abs)
    x = qphi[nz].astype(acc_t) - acc_t(fq.zero_point)
    acc = int(np.dot(x, lv[nz].astype(acc_t)))
    if counter is not None:
        counter.multiplies += int(nz.size)
        counter.calls += 1
    return float(acc) * (fq.scale * wl.unit)


def integer_predict_many(qphi, indices, fq: AffineQuantizer, wl: WeightLevels,
                         counter: Optional[OpCounter] = None) -> np.ndarray:
    """:func:`integer_predict` for a stack of index vectors ``(count, b)``.

    Zero levels contribute nothing to the int64 matrix product; the counter
    records only the non-zero ones.
    """
    qphi = np.asarray(qphi)
    idx = np.atleast_2d(indices)
    if qphi.shape != (idx.shape[1],):
        raise ValueError(f"{qphi.size} features for samples with b={idx.shape[1]}")
    lv = wl.levels[idx]
    nnz = np.count_nonzero(lv, axis=1)
    _accumulator(int(nnz.max(initial=0)), fq.qmax + abs(fq.zero_point), wl.max_abs)
    acc = lv @ (qphi.astype(np.int64) - fq.zero_point)
    if counter is not None:
        counter.multiplies += int(nnz.sum())
        counter.calls += idx.shape[0]
    return acc.astype(float) * (fq.scale * wl.unit)


def float_predict(phi, sample: QuantizedSample) -> float:
    return float(np.asarray(phi, dtype=float) @ sample.values)


def error_bound(phi, sample: QuantizedSample, fq: AffineQuantizer,
                wl: WeightLevels) -> float:
    """Worst-case ``|integer_predict - phi . w|`` for these inputs.

    Feature rounding contributes ``scale/2 * sum|w_j|`` (plus any clamping
    error), level representation ``sum |phi_j| * rep_err_j``, and the two
    float evaluations a few ulps of ``sum |phi_j w_j|``.
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    w = sample.values
    wq = wl.unit * wl.levels[sample.indices]
    feat_err = np.abs(fq.dequantize(fq.quantize(phi)) - phi)
    rounding = float(np.sum(feat_err * np.abs(wq)))
    rep = float(np.sum(np.abs(phi) * wl.representation_error()[sample.indices]))
    mag = float(np.sum(np.abs(phi * w))) + float(np.sum(np.abs(fq.dequantize(
        fq.quantize(phi)) * wq)))
    slack = 4 * (phi.size + 2) * _EPS * mag
    return rounding + rep + slack


def analytic_bound(fq: AffineQuantizer, sample: QuantizedSample) -> float:
    """Data-independent form ``b * scale/2 * max|w|`` (no clamping)."""
    return sample.grid.b * fq.scale / 2 * float(np.abs(sample.values).max(initial=0))


@dataclass(frozen=True)
class PredictiveSamples:
    mean: float
    variance: float
    draws: np.ndarray


def posterior_predictive_samples(model, test_features, count: int,
                                 rng: np.random.Generator, bit_width: int = 8,
                                 counter: Optional[OpCounter] = None
                                 ) -> PredictiveSamples:
    """Empirical mean and variance of ``phi* . w`` over ``count`` quantised
    posterior draws, each evaluated on the integer path."""
    if count < 1:
        raise ValueError("count must be at least 1")
    grid = model.grid
    wl = WeightLevels.from_grid(grid)
    qphi, fq = quantize_features(test_features, bit_width)
    if qphi.size != grid.b:
        raise ValueError(f"test point has {qphi.size} features, expected {grid.b}")
    idx = sample_indices(model.q, count, rng)
    draws = np.array([integer_predict(qphi, QuantizedSample(row, grid), fq, wl, counter)
                      for row in idx])
    # shifted by the first draw so identical draws give exactly zero spread
    d = draws - draws[0]
    var = float(d.var(ddof=1)) if count > 1 else 0.0
    return PredictiveSamples(float(draws[0] + d.mean()), var, draws)


def bits_per_weight(grid: SupportGrid) -> int:
    return grid.bit_width


def payload_bytes(grid: SupportGrid) -> int:
    return math.ceil(grid.b * grid.bit_width / 8)
