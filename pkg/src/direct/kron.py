"""
Vectors of length prod(dims) stored implicitly as sums of Kronecker products.

A term ``c * f_1 (x) f_2 (x) ... (x) f_b`` keeps only its non-unity factors;
a missing factor stands for the all-ones vector of the right length.  The
dense ordering is the usual Kronecker one: the first variable varies slowest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

DENSE_CAP = 10**6

_TINY = 1e-300
_HUGE = 1e300


class KronError(ValueError):
    """Malformed or incompatible Kronecker-structured input."""


class KronSizeError(KronError):
    pass


@dataclass(frozen=True)
class KronTerm:
    """``coeff * kron(factors)`` with absent factors equal to ones."""

    coeff: float
    factors: Mapping[int, np.ndarray]
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(m) for m in self.dims)
        object.__setattr__(self, "dims", dims)
        clean = {}
        for j, f in self.factors.items():
            j = int(j)
            if not 0 <= j < len(dims):
                raise KronError(f"factor index {j} outside 0..{len(dims) - 1}")
            f = np.asarray(f, dtype=float)
            if f.shape != (dims[j],):
                raise KronError(
                    f"factor {j} has shape {f.shape}, expected ({dims[j]},)")
            f.setflags(write=False)
            clean[j] = f
        object.__setattr__(self, "factors", dict(sorted(clean.items())))
        object.__setattr__(self, "coeff", float(self.coeff))

    def factor(self, j: int) -> np.ndarray:
        f = self.factors.get(j)
        return np.ones(self.dims[j]) if f is None else f


@dataclass(frozen=True)
class KronSumVec:
    terms: tuple[KronTerm, ...]
    dims: tuple[int, ...] = field(default=())

    def __post_init__(self):
        terms = tuple(self.terms)
        dims = tuple(int(m) for m in self.dims) if self.dims else (
            terms[0].dims if terms else ())
        if not dims:
            raise KronError("dims must be given for an empty KronSumVec")
        for t in terms:
            if t.dims != dims:
                raise KronError(f"term dims {t.dims} differ from {dims}")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def ones(cls, dims: Sequence[int], coeff: float = 1.0) -> KronSumVec:
        return cls((KronTerm(coeff, {}, tuple(dims)),), tuple(dims))

    @classmethod
    def single(cls, factors: Mapping[int, np.ndarray], dims: Sequence[int],
               coeff: float = 1.0) -> KronSumVec:
        return cls((KronTerm(coeff, factors, tuple(dims)),), tuple(dims))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> KronSumVec:
        return cls((), tuple(dims))

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def __len__(self):
        return len(self.terms)

    def __add__(self, other: KronSumVec) -> KronSumVec:
        _check_dims(self, other)
        return KronSumVec(self.terms + other.terms, self.dims)

    def scale(self, alpha: float) -> KronSumVec:
        return KronSumVec(
            tuple(KronTerm(alpha * t.coeff, t.factors, t.dims)
                  for t in self.terms), self.dims)


def _check_dims(a: KronSumVec, k: KronSumVec):
    if a.dims != k.dims:
        raise KronError(f"dimension mismatch: {a.dims} vs {k.dims}")


def signed_log_prod(values) -> tuple[float, float]:
    """Return ``(sign, log|prod(values)|)``; sign is 0 for a zero product."""
    v = np.asarray(values, dtype=float)
    if np.any(v == 0):
        return 0.0, -math.inf
    sign = -1.0 if np.count_nonzero(v < 0) % 2 else 1.0
    return sign, float(np.sum(np.log(np.abs(v))))


def safe_prod(values, force_log: bool = False) -> float:
    """Product of ``values``, switching to log-magnitude + sign form when the
    factors or the running product leave the representable range."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return 1.0
    a = np.abs(v)
    if np.any(a == 0):
        return 0.0
    if not force_log and np.all((a >= _TINY) & (a <= _HUGE)):
        with np.errstate(over="ignore", under="ignore"):
            p = float(np.prod(v))
        if p != 0.0 and math.isfinite(p):
            return p
    sign, logabs = signed_log_prod(v)
    if sign == 0.0:
        return 0.0
    with np.errstate(over="ignore"):
        return sign * math.exp(logabs) if logabs < 709.7 else sign * math.inf


def _pair_values(a: KronTerm, k: KronTerm) -> list[float]:
    """Per-variable factor inner products for the variables either term
    constrains, plus the ones.ones contribution for the rest."""
    vals = []
    union = a.factors.keys() | k.factors.keys()
    for j in union:
        fa = a.factors.get(j)
        fk = k.factors.get(j)
        if fa is None:
            vals.append(float(fk.sum()))
        elif fk is None:
            vals.append(float(fa.sum()))
        else:
            vals.append(float(fa @ fk))
    vals.extend(float(a.dims[j]) for j in range(len(a.dims)) if j not in union)
    return vals


def kron_inner(a: KronSumVec, k: KronSumVec) -> float:
    """Inner product ``<a, k>`` without ever forming the dense vectors."""
    _check_dims(a, k)
    total = 0.0
    for ta in a.terms:
        if ta.coeff == 0.0:
            continue
        for tk in k.terms:
            if tk.coeff == 0.0:
                continue
            total += ta.coeff * tk.coeff * safe_prod(_pair_values(ta, tk))
    return total


def kron_log(k: KronSumVec) -> KronSumVec:
    """Elementwise log of a single positive Kronecker product vector.

    The result is the generalised Kronecker sum of the factor logs: one term
    per variable plus a constant term holding ``log(coeff)``.
    """
    if len(k.terms) != 1:
        raise KronError(
            f"kron_log needs exactly one term, got {len(k.terms)}")
    (t,) = k.terms
    if not t.coeff > 0:
        raise KronError("kron_log needs a positive coefficient")
    out = []
    for j, m in enumerate(k.dims):
        f = t.factors.get(j)
        if f is None:
            lf = np.zeros(m)
        else:
            if np.any(f <= 0):
                raise KronError(f"non-positive entry in factor {j}")
            lf = np.log(f)
        out.append(KronTerm(1.0, {j: lf}, k.dims))
    out.append(KronTerm(math.log(t.coeff), {}, k.dims))
    return KronSumVec(tuple(out), k.dims)


def _hadamard_factors(fa: Mapping[int, np.ndarray],
                      fk: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    out = dict(fa)
    for j, f in fk.items():
        out[j] = f if j not in out else out[j] * f
    return out


def kron_hadamard(a: KronSumVec, k: KronSumVec) -> KronSumVec:
    """Elementwise product; term count is ``len(a) * len(k)``."""
    _check_dims(a, k)
    terms = tuple(
        KronTerm(ta.coeff * tk.coeff, _hadamard_factors(ta.factors, tk.factors),
                 a.dims)
        for ta in a.terms for tk in k.terms)
    return KronSumVec(terms, a.dims)


def dense_expand(k: KronSumVec, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialise ``k`` (first variable slowest)."""
    size = k.size
    if size > cap:
        raise KronSizeError(f"dense size {size} exceeds cap {cap}")
    out = np.zeros(size)
    for t in k.terms:
        v = np.array([t.coeff])
        for j in range(len(k.dims)):
            v = np.kron(v, t.factor(j))
        out += v
    return out


def _canonical(factors: Mapping[int, np.ndarray]):
    """Scale each factor so its largest-magnitude entry is 1.

    Returns ``(scale, factors)``; all-ones factors are dropped and a zero
    factor yields ``scale == 0``.
    """
    scale = 1.0
    out = {}
    for j, f in factors.items():
        i = int(np.argmax(np.abs(f)))
        piv = f[i]
        if piv == 0.0:
            return 0.0, {}
        g = f / piv
        scale *= piv
        if not np.all(g == 1.0):
            out[j] = g
    return scale, out


def compact_terms(coeffs: Sequence, factors: Sequence[Mapping[int, np.ndarray]]):
    """Merge terms whose factors agree up to a scalar.

    ``coeffs`` may hold scalars or equal-length arrays (one coefficient per
    data point); returns the merged ``(coeffs, factors)`` lists in first-seen
    order.  Only bit-identical canonical factors are merged.
    """
    merged: dict[tuple, int] = {}
    out_c: list = []
    out_f: list = []
    for c, f in zip(coeffs, factors):
        scale, g = _canonical(f)
        if scale == 0.0:
            continue
        key = tuple((j, v.tobytes()) for j, v in sorted(g.items()))
        c = np.asarray(c, dtype=float) * scale
        pos = merged.get(key)
        if pos is None:
            merged[key] = len(out_c)
            out_c.append(c)
            out_f.append(g)
        else:
            out_c[pos] = out_c[pos] + c
    return out_c, out_f


def kron_compact(k: KronSumVec) -> KronSumVec:
    """Merge proportional terms; the dense expansion is unchanged."""
    coeffs, factors = compact_terms([t.coeff for t in k.terms],
                                    [t.factors for t in k.terms])
    terms = tuple(KronTerm(float(c), f, k.dims)
                  for c, f in zip(coeffs, factors) if float(c) != 0.0)
    return KronSumVec(terms, k.dims)
