"""
Categorical distributions over a discrete support grid.

Mean-field distributions factorise over the ``b`` latent variables, each row
being a softmax of free logits.  Mixtures combine ``r`` mean-field components.
Everything here works on the ``(b, mbar)`` factor arrays; nothing of size
``mbar**b`` is ever formed.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .kron import KronSumVec, KronTerm


class DistributionError(ValueError):
    pass


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain rule through a softmax over the last axis."""
    return probs * (grad_probs - np.sum(probs * grad_probs, axis=-1,
                                        keepdims=True))


@dataclass(frozen=True)
class SupportGrid:
    """Per-variable support values; row ``j`` holds the levels of ``w_j``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise DistributionError("grid values must be a (b, mbar) array")
        if v.shape[1] < 2:
            raise DistributionError("each variable needs at least 2 levels")
        if np.any(np.diff(v, axis=1) <= 0):
            raise DistributionError("grid rows must be strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def shared(cls, levels, b: int) -> SupportGrid:
        return cls(np.tile(np.asarray(levels, dtype=float), (b, 1)))

    @property
    def b(self) -> int:
        return self.values.shape[0]

    @property
    def mbar(self) -> int:
        return self.values.shape[1]

    @property
    def bit_width(self) -> int:
        return max(1, math.ceil(math.log2(self.mbar)))


@dataclass(frozen=True)
class MeanFieldDist:
    """Fully factorised categorical; ``logits`` has shape ``(b, mbar)``."""

    logits: np.ndarray

    def __post_init__(self):
        lg = np.array(self.logits, dtype=float)
        if lg.ndim != 2:
            raise DistributionError("logits must be (b, mbar)")
        lg.setflags(write=False)
        object.__setattr__(self, "logits", lg)

    @classmethod
    def uniform(cls, b: int, mbar: int) -> MeanFieldDist:
        return cls(np.zeros((b, mbar)))

    @classmethod
    def from_probs(cls, probs) -> MeanFieldDist:
        p = np.asarray(probs, dtype=float)
        if np.any(p <= 0):
            raise DistributionError("probabilities must be strictly positive")
        return cls(np.log(p / p.sum(axis=-1, keepdims=True)))

    @cached_property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=-1)

    @cached_property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @property
    def b(self) -> int:
        return self.logits.shape[0]

    @property
    def mbar(self) -> int:
        return self.logits.shape[1]

    def kron(self) -> KronSumVec:
        """Joint pmf as a single Kronecker term."""
        dims = (self.mbar,) * self.b
        return KronSumVec.single(dict(enumerate(self.probs)), dims)


@dataclass(frozen=True)
class MixtureDist:
    """``sum_i alpha_i kron_j q_j^(i)``.

    ``component_logits`` has shape ``(r, b, mbar)``.
    """

    mixture_logits: np.ndarray
    component_logits: np.ndarray

    def __post_init__(self):
        a = np.array(self.mixture_logits, dtype=float).reshape(-1)
        c = np.array(self.component_logits, dtype=float)
        if c.ndim != 3 or c.shape[0] != a.shape[0]:
            raise DistributionError(
                "component logits must be (r, b, mbar) with r mixture logits")
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "mixture_logits", a)
        object.__setattr__(self, "component_logits", c)

    @classmethod
    def from_components(cls, components, weights=None) -> MixtureDist:
        comps = np.stack([c.logits for c in components])
        r = comps.shape[0]
        w = np.full(r, 1.0 / r) if weights is None else np.asarray(weights, float)
        return cls(np.log(w / w.sum()), comps)

    @property
    def r(self) -> int:
        return self.component_logits.shape[0]

    @property
    def b(self) -> int:
        return self.component_logits.shape[1]

    @property
    def mbar(self) -> int:
        return self.component_logits.shape[2]

    @cached_property
    def alpha(self) -> np.ndarray:
        return softmax(self.mixture_logits)

    @cached_property
    def log_alpha(self) -> np.ndarray:
        return log_softmax(self.mixture_logits)

    @cached_property
    def probs(self) -> np.ndarray:
        return softmax(self.component_logits, axis=-1)

    @cached_property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.component_logits, axis=-1)

    @property
    def components(self) -> tuple[MeanFieldDist, ...]:
        return tuple(MeanFieldDist(c) for c in self.component_logits)


Dist = Union[MeanFieldDist, MixtureDist]


@dataclass(frozen=True)
class EntropyAnchor:
    """Taylor centre ``a = kron_i a_i`` for the mixture entropy bound."""

    logits: np.ndarray

    def __post_init__(self):
        lg = np.array(self.logits, dtype=float)
        lg.setflags(write=False)
        object.__setattr__(self, "logits", lg)

    @classmethod
    def from_dist(cls, q: MeanFieldDist) -> EntropyAnchor:
        return cls(q.logits.copy())

    @cached_property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @cached_property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=-1)


def as_mixture(q: Dist) -> MixtureDist:
    if isinstance(q, MixtureDist):
        return q
    return MixtureDist(np.zeros(1), q.logits[None])


def _check_shapes(q, p):
    if (q.b, q.mbar) != (p.b, p.mbar):
        raise DistributionError(
            f"shape mismatch: ({q.b}, {q.mbar}) vs ({p.b}, {p.mbar})")


# ---------------------------------------------------------------------------
# entropy and cross-entropy terms


def mean_field_entropy(q: MeanFieldDist) -> float:
    return float(-np.sum(q.probs * q.log_probs))


def mean_field_entropy_grad(q: MeanFieldDist) -> np.ndarray:
    """Gradient of the entropy w.r.t. the logits."""
    return softmax_backward(q.probs, -q.log_probs - 1.0)


def cross_entropy_factorized(q: MeanFieldDist, p: MeanFieldDist) -> float:
    """``sum_i q_i . log p_i``, i.e. ``q^T log p`` for factorised q and p."""
    _check_shapes(q, p)
    return float(np.sum(q.probs * p.log_probs))


def mixture_prob_vector(q: MixtureDist) -> KronSumVec:
    dims = (q.mbar,) * q.b
    terms = tuple(KronTerm(a, dict(enumerate(c)), dims)
                  for a, c in zip(q.alpha, q.probs))
    return KronSumVec(terms, dims)


def _log_overlap(q: MixtureDist, a: EntropyAnchor):
    """``S[j,k,i] = q_i^(j) . (q_i^(k) / a_i)`` and its log-product over i."""
    ratio = q.probs[None, :, :, :] * (q.probs / a.probs[None])[:, None]
    s = ratio.sum(axis=-1)  # (r, r, b)
    log_m = np.log(s).sum(axis=-1)
    return s, log_m


def mixture_entropy_lower_bound(q: MixtureDist, a: EntropyAnchor) -> float:
    """First-order Taylor lower bound on the mixture entropy about ``a``.

    Exact when ``q`` is a single component equal to ``a``.
    """
    if q.probs.shape[1:] != a.probs.shape:
        raise DistributionError("anchor shape does not match the mixture")
    alpha = q.alpha
    lin = np.einsum("jim,im->j", q.probs, a.log_probs)
    _, log_m = _log_overlap(q, a)
    quad = np.exp(log_m + q.log_alpha[:, None] + q.log_alpha[None, :]).sum()
    return float(1.0 - alpha @ lin - quad)


def mixture_entropy_lower_bound_grad(q: MixtureDist, a: EntropyAnchor):
    """Gradients of the bound w.r.t. ``(mixture_logits, component_logits,
    anchor logits)``."""
    alpha = q.alpha
    qp, ap = q.probs, a.probs
    lin = np.einsum("jim,im->j", qp, a.log_probs)
    s, log_m = _log_overlap(q, a)
    m = np.exp(log_m)  # (r, r)
    w = alpha[:, None] * alpha[None, :] * m  # alpha_j alpha_k M_jk

    g_alpha = -lin - 2.0 * (m @ alpha)
    # d quad / d q^(j)_im = 2 sum_k w_jk q^(k)_im / (a_im S_jki)
    g_q = -alpha[:, None, None] * a.log_probs[None]
    g_q -= 2.0 * np.einsum("jk,jki,kim->jim", w, 1.0 / s, qp) / ap[None]
    # d / d a_im
    g_a = -np.einsum("j,jim->im", alpha, qp) / ap
    g_a += np.einsum("jk,jki,jim,kim->im", w, 1.0 / s, qp, qp) / ap**2
    return (softmax_backward(alpha, g_alpha), softmax_backward(qp, g_q),
            softmax_backward(ap, g_a))


def mixture_prior_lower_bound(q: Dist, p: MixtureDist) -> float:
    """Jensen lower bound ``sum_i beta_i sum_j q_j . log p_j^(i)`` on
    ``q^T log p`` for a mixture prior; ``q`` may itself be a mixture."""
    qm = as_mixture(q)
    _check_shapes(qm, p)
    cross = np.einsum("ajm,kjm->ak", qm.probs, p.log_probs)
    return float(qm.alpha @ cross @ p.alpha)


def prior_term(q: Dist, prior: Dist) -> float:
    """``q^T log p``: exact for a factorised prior, a lower bound otherwise."""
    return mixture_prior_lower_bound(q, as_mixture(prior))


def prior_term_grad(q: Dist, prior: Dist):
    """Gradient of :func:`prior_term` w.r.t. q's logits.

    Returns ``g_q`` for a mean-field q, ``(g_alpha, g_components)`` for a
    mixture.
    """
    pm = as_mixture(prior)
    logp = np.einsum("k,kjm->jm", pm.alpha, pm.log_probs)
    if isinstance(q, MeanFieldDist):
        return softmax_backward(q.probs, logp)
    per = np.einsum("ajm,jm->a", q.probs, logp)
    g_c = softmax_backward(q.probs, q.alpha[:, None, None] * logp[None])
    return softmax_backward(q.alpha, per), g_c


# ---------------------------------------------------------------------------
# sampling and the score-function entropy surrogate


def sample_indices(q: Dist, count: int, rng: np.random.Generator,
                   return_components: bool = False):
    """Draw ``count`` index vectors, shape ``(count, b)``.

    Inverse-CDF per variable: the smallest index whose cumulative
    probability strictly exceeds the uniform draw.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    qm = as_mixture(q)
    if qm.r == 1:
        comp = np.zeros(count, dtype=np.intp)
    else:
        comp = _inverse_cdf(np.cumsum(qm.alpha), rng.random(count))
    cdf = np.cumsum(qm.probs, axis=-1)  # (r, b, m)
    u = rng.random((count, qm.b))
    idx = np.empty((count, qm.b), dtype=np.intp)
    for c in range(qm.r):
        rows = np.nonzero(comp == c)[0]
        if rows.size == 0:
            continue
        uc = u[rows]
        step = max(1, 2**22 // (qm.b * qm.mbar))
        for s in range(0, rows.size, step):
            blk = uc[s:s + step]
            cnt = (cdf[c][None] <= blk[:, :, None]).sum(axis=-1)
            idx[rows[s:s + step]] = np.minimum(cnt, qm.mbar - 1)
    if return_components:
        return idx, comp
    return idx


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)


def log_pmf_indices(q: Dist, idx: np.ndarray) -> np.ndarray:
    """``log q(s)`` for rows of integer indices, LogSumExp over components."""
    qm = as_mixture(q)
    idx = np.asarray(idx)
    if idx.ndim == 1:
        idx = idx[None]
    if idx.shape[1] != qm.b or np.any(idx < 0) or np.any(idx >= qm.mbar):
        raise DistributionError("sample indices out of range")
    return logsumexp(_component_log_probs(qm, idx) + qm.log_alpha, axis=-1)


def scatter_counts(idx: np.ndarray, weights: np.ndarray, mbar: int) -> np.ndarray:
    """``out[j, m] = sum_t weights[t] * [idx[t, j] == m]``."""
    t, b = idx.shape
    key = (np.arange(b) * mbar + idx).reshape(-1)
    return np.bincount(key, weights=np.repeat(weights, b),
                       minlength=b * mbar).reshape(b, mbar)


def _component_log_probs(qm: MixtureDist, idx: np.ndarray) -> np.ndarray:
    """``log q^(c)(s_t)`` as a (t, r) array."""
    return qm.log_probs[:, np.arange(qm.b), idx].sum(axis=-1).T


def _responsibilities(qm: MixtureDist, idx: np.ndarray):
    comp_lp = _component_log_probs(qm, idx) + qm.log_alpha
    lq = logsumexp(comp_lp, axis=-1)
    return lq, np.exp(comp_lp - lq[:, None])  # (t,), (t, r)


def score_weighted_grad(qm: MixtureDist, idx: np.ndarray, weights: np.ndarray):
    """``sum_t weights[t] * grad log q(s_t)`` w.r.t. mixture and component
    logits, plus ``log q(s_t)``.

    ``d log q(s)/d theta^(c)_jm = resp_c(s) * ([s_j == m] - q^(c)_jm)``.
    """
    lq, resp = _responsibilities(qm, idx)
    wr = weights[:, None] * resp  # (t, r)
    g_a = wr.sum(axis=0) - weights.sum() * qm.alpha
    g_c = np.empty_like(qm.component_logits)
    for c in range(qm.r):
        g_c[c] = (scatter_counts(idx, wr[:, c], qm.mbar)
                  - wr[:, c].sum() * qm.probs[c])
    return lq, g_a, g_c


def entropy_surrogate_loss(q: Dist, t: int, rng: np.random.Generator) -> float:
    """``(1/2t) sum_i (log q(s_i) + 1)^2`` with ``s_i ~ q``."""
    idx = sample_indices(q, t, rng)
    lq = log_pmf_indices(q, idx)
    return float(0.5 * np.mean((lq + 1.0) ** 2))


def _surrogate_pass(q: Dist, t: int, rng: np.random.Generator, chunk: int):
    qm = as_mixture(q)
    idx = sample_indices(qm, t, rng)
    value = 0.0
    sum_lq = 0.0
    g_a = np.zeros(qm.r)
    g_c = np.zeros_like(qm.component_logits)
    for s in range(0, t, chunk):
        blk = idx[s:s + chunk]
        lq, _ = _responsibilities(qm, blk)
        w = lq + 1.0
        value += float(0.5 * np.sum(w**2))
        sum_lq += float(lq.sum())
        _, da, dc = score_weighted_grad(qm, blk, w)
        g_a += da
        g_c += dc
    return value / t, sum_lq / t, g_a / t, g_c / t


def entropy_surrogate_grad(q: Dist, t: int, rng: np.random.Generator,
                           chunk: int = 8192):
    """Surrogate value and its gradient, an unbiased estimate of
    ``d(q^T log q)/d theta``.

    Returns ``(value, g_mixture_logits, g_component_logits)`` with the
    component gradient shaped ``(r, b, mbar)``.  Uses the same random
    stream as :func:`entropy_surrogate_loss`.
    """
    value, _, g_a, g_c = _surrogate_pass(q, t, rng, chunk)
    return value, g_a, g_c


def entropy_estimate(q: Dist, t: int, rng: np.random.Generator,
                     chunk: int = 8192):
    """Monte-Carlo entropy ``-mean log q(s)`` and an unbiased estimate of
    its gradient, from the same ``t`` draws."""
    _, mean_lq, g_a, g_c = _surrogate_pass(q, t, rng, chunk)
    return -mean_lq, -g_a, -g_c


@dataclass(frozen=True)
class QuantizedSample:
    """A posterior draw stored as grid indices.

    Binary layout: ``b"DQSW"``, version (u8), b (u32), mbar (u16), then the
    indices packed at ``bit_width`` bits each, least significant bit first.
    """

    indices: np.ndarray
    grid: SupportGrid

    MAGIC = b"DQSW"
    VERSION = 1
    _HEADER = struct.Struct("<4sBIH")

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        if idx.size != self.grid.b:
            raise DistributionError(
                f"{idx.size} indices for a grid with b={self.grid.b}")
        if np.any(idx < 0) or np.any(idx >= self.grid.mbar):
            raise DistributionError("index out of range")
        idx = idx.astype(np.uint8 if self.grid.mbar <= 256 else np.uint16)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def bit_width(self) -> int:
        return self.grid.bit_width

    @property
    def values(self) -> np.ndarray:
        return self.grid.values[np.arange(self.grid.b), self.indices]

    @property
    def payload_nbytes(self) -> int:
        return -(-self.grid.b * self.bit_width // 8)

    def to_bytes(self) -> bytes:
        bw = self.bit_width
        bits = (self.indices[:, None].astype(np.uint32) >> np.arange(bw)) & 1
        payload = np.packbits(bits.astype(np.uint8).reshape(-1),
                              bitorder="little")
        head = self._HEADER.pack(self.MAGIC, self.VERSION, self.grid.b,
                                 self.grid.mbar)
        return head + payload.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, grid: SupportGrid) -> QuantizedSample:
        hs = cls._HEADER.size
        if len(data) < hs:
            raise DistributionError("truncated sample header")
        magic, version, b, mbar = cls._HEADER.unpack(data[:hs])
        if magic != cls.MAGIC:
            raise DistributionError(f"bad magic {magic!r}")
        if version != cls.VERSION:
            raise DistributionError(f"unsupported version {version}")
        if (b, mbar) != (grid.b, grid.mbar):
            raise DistributionError(
                f"sample is for b={b}, mbar={mbar}; grid is "
                f"b={grid.b}, mbar={grid.mbar}")
        bw = grid.bit_width
        need = -(-b * bw // 8)
        payload = np.frombuffer(data[hs:], dtype=np.uint8)
        if payload.size != need:
            raise DistributionError(
                f"payload has {payload.size} bytes, expected {need}")
        bits = np.unpackbits(payload, bitorder="little")[:b * bw]
        idx = (bits.reshape(b, bw).astype(np.int64) << np.arange(bw)).sum(1)
        return cls(idx, grid)


def sample(q: Dist, count: int, rng: np.random.Generator,
           grid: SupportGrid) -> list[QuantizedSample]:
    idx = sample_indices(q, count, rng)
    return [QuantizedSample(row, grid) for row in idx]


def log_pmf(q: Dist, s: QuantizedSample) -> float:
    return float(log_pmf_indices(q, s.indices.astype(np.intp))[0])


def expected_sparsity(q: Dist, grid: SupportGrid) -> float:
    """Expected fraction of exactly-zero weights in a posterior draw."""
    qm = as_mixture(q)
    zero = grid.values == 0.0
    if not zero.any():
        return 0.0
    marg = np.einsum("a,ajm->jm", qm.alpha, qm.probs)
    return float(np.sum(marg * zero) / grid.b)
