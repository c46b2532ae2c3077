"""
Exact ELBO, gradients and predictive moments for discretely relaxed linear
regression ``y = Phi w + eps``, ``eps ~ N(0, sigma^2 I)``, with a discrete
prior on ``sigma^2``.

After :func:`precompute` every quantity here costs ``O(b*mbar + b^2)``,
independent of the number of training points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from scipy.special import log_softmax, softmax

from .variational import (
    DistributionError,
    EntropyAnchor,
    MeanFieldDist,
    MixtureDist,
    SupportGrid,
    mean_field_entropy,
    mean_field_entropy_grad,
    mixture_entropy_lower_bound,
    mixture_entropy_lower_bound_grad,
    prior_term,
    prior_term_grad,
    softmax_backward,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GlmSuffStats:
    yty: float
    phity: np.ndarray
    phitphi: np.ndarray
    n: int

    @classmethod
    def empty(cls, b: int) -> GlmSuffStats:
        return cls(0.0, np.zeros(b), np.zeros((b, b)), 0)

    @property
    def b(self) -> int:
        return self.phity.shape[0]

    @property
    def diag(self) -> np.ndarray:
        return np.diagonal(self.phitphi)

    def h_mat(self, grid: SupportGrid) -> np.ndarray:
        """``H[:, j] = wbar_j**2 * sum_i phi_ij**2``, shape ``(mbar, b)``."""
        return (grid.values**2 * self.diag[:, None]).T

    def update(self, features, targets) -> GlmSuffStats:
        """Fold additional rows into the statistics."""
        phi, y = _check_data(features, targets, self.b)
        return GlmSuffStats(self.yty + float(y @ y),
                            self.phity + phi.T @ y,
                            self.phitphi + phi.T @ phi,
                            self.n + y.shape[0])

    def __add__(self, other: GlmSuffStats) -> GlmSuffStats:
        return GlmSuffStats(self.yty + other.yty, self.phity + other.phity,
                            self.phitphi + other.phitphi, self.n + other.n)


def _check_data(features, targets, b=None):
    phi = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if phi.ndim != 2 or phi.shape[0] != y.shape[0]:
        raise ValueError(
            f"features {phi.shape} do not match {y.shape[0]} targets")
    if b is not None and phi.shape[1] != b:
        raise ValueError(f"expected {b} feature columns, got {phi.shape[1]}")
    return phi, y


def precompute(features, targets, grid: Optional[SupportGrid] = None,
               chunk_rows: Optional[int] = None) -> GlmSuffStats:
    """``y^T y``, ``Phi^T y`` and ``Phi^T Phi`` in one pass over the data.

    ``chunk_rows`` accumulates row blocks sequentially (deterministic order).
    """
    phi, y = _check_data(features, targets)
    if y.shape[0] < 1:
        raise ValueError("need at least one data row")
    if grid is not None and grid.b != phi.shape[1]:
        raise ValueError(f"grid has b={grid.b}, features have {phi.shape[1]}")
    stats = GlmSuffStats.empty(phi.shape[1])
    step = chunk_rows or phi.shape[0]
    for s in range(0, phi.shape[0], step):
        stats = stats.update(phi[s:s + step], y[s:s + step])
    return stats


@dataclass(frozen=True)
class NoiseModel:
    """Discrete support, prior and variational logits for ``sigma^2``."""

    sigma2_values: np.ndarray
    p_sigma: np.ndarray
    q_sigma_logits: np.ndarray

    def __post_init__(self):
        s2 = np.array(self.sigma2_values, dtype=float).reshape(-1)
        p = np.array(self.p_sigma, dtype=float).reshape(-1)
        lg = np.array(self.q_sigma_logits, dtype=float).reshape(-1)
        if np.any(s2 <= 0) or np.any(np.diff(s2) <= 0):
            raise DistributionError(
                "sigma^2 values must be positive and strictly increasing")
        if p.shape != s2.shape or lg.shape != s2.shape:
            raise DistributionError("noise arrays must share one length")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DistributionError("p_sigma must be a positive distribution")
        for a in (s2, p, lg):
            a.setflags(write=False)
        object.__setattr__(self, "sigma2_values", s2)
        object.__setattr__(self, "p_sigma", p)
        object.__setattr__(self, "q_sigma_logits", lg)

    @classmethod
    def log_uniform(cls, center: float, levels: int,
                    span: float = 100.0) -> NoiseModel:
        """Log-spaced grid on ``[center/span, center*span]``, uniform prior,
        variational distribution initialised to the prior."""
        s2 = np.geomspace(center / span, center * span, levels)
        p = np.full(levels, 1.0 / levels)
        return cls(s2, p, np.zeros(levels))

    @property
    def q_sigma(self) -> np.ndarray:
        return softmax(self.q_sigma_logits)

    @property
    def log_q_sigma(self) -> np.ndarray:
        return log_softmax(self.q_sigma_logits)

    @property
    def log_sigma2(self) -> np.ndarray:
        return np.log(self.sigma2_values)

    @property
    def inv_sigma2(self) -> np.ndarray:
        return 1.0 / self.sigma2_values

    @property
    def expected_sigma2(self) -> float:
        return float(self.q_sigma @ self.sigma2_values)

    def with_logits(self, logits) -> NoiseModel:
        return replace(self, q_sigma_logits=np.asarray(logits, dtype=float))


Dist = Union[MeanFieldDist, MixtureDist]


@dataclass(frozen=True)
class GlmModel:
    grid: SupportGrid
    q: Dist
    prior: Dist
    noise: NoiseModel
    stats: GlmSuffStats
    anchor: Optional[EntropyAnchor] = None

    def __post_init__(self):
        if self.grid.b != self.stats.b:
            raise ValueError(
                f"grid has b={self.grid.b} but statistics have b={self.stats.b}")
        for d in (self.q, self.prior):
            if (d.b, d.mbar) != (self.grid.b, self.grid.mbar):
                raise ValueError("distribution shape does not match the grid")

    @property
    def is_mixture(self) -> bool:
        return isinstance(self.q, MixtureDist)


@dataclass
class ElboGrad:
    """Gradients w.r.t. every free logit block of a model."""

    q_logits: np.ndarray
    sigma_logits: np.ndarray
    mixture_logits: Optional[np.ndarray] = None
    anchor_logits: Optional[np.ndarray] = None

    def blocks(self):
        return [g for g in (self.mixture_logits, self.q_logits,
                            self.anchor_logits, self.sigma_logits)
                if g is not None]

    def vector(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.blocks()])

    def __add__(self, other: ElboGrad) -> ElboGrad:
        def add(a, b):
            if a is None:
                return b
            return a if b is None else a + b
        return ElboGrad(self.q_logits + other.q_logits,
                        self.sigma_logits + other.sigma_logits,
                        add(self.mixture_logits, other.mixture_logits),
                        add(self.anchor_logits, other.anchor_logits))


# ---------------------------------------------------------------------------
# likelihood term


def _moments(q: MeanFieldDist, grid: SupportGrid):
    """Per-variable means ``s`` and second moments ``E[w_j^2]``."""
    p = q.probs
    return (p * grid.values).sum(axis=1), (p * grid.values**2).sum(axis=1)


def _sq_residual(stats: GlmSuffStats, s, t):
    """``q^T {||y - Phi w||^2}`` for one mean-field component."""
    d = stats.diag
    return (stats.yty - 2.0 * s @ stats.phity + s @ (stats.phitphi @ s)
            - d @ s**2 + d @ t)


def _sq_residual_grad(stats: GlmSuffStats, grid: SupportGrid, s):
    """d(sq residual)/d q_jk, shape ``(b, mbar)``."""
    d = stats.diag
    lin = -2.0 * stats.phity + 2.0 * (stats.phitphi @ s) - 2.0 * d * s
    return lin[:, None] * grid.values + d[:, None] * grid.values**2


def _components(q: Dist):
    if isinstance(q, MixtureDist):
        return q.alpha, q.components
    return np.ones(1), (q,)


def expected_sq_residual(model: GlmModel) -> float:
    alpha, comps = _components(model.q)
    return float(sum(a * _sq_residual(model.stats, *_moments(c, model.grid))
                     for a, c in zip(alpha, comps)))


def expected_loglik(model: GlmModel) -> float:
    """``(q_sigma (x) q)^T log l`` including the ``-n/2 log 2 pi`` constant."""
    nz = model.noise
    n = model.stats.n
    return float(-0.5 * n * (LOG_2PI + nz.q_sigma @ nz.log_sigma2)
                 - 0.5 * (nz.q_sigma @ nz.inv_sigma2)
                 * expected_sq_residual(model))


def _noise_kl_terms(noise: NoiseModel) -> float:
    q = noise.q_sigma
    return float(q @ np.log(noise.p_sigma) - q @ noise.log_q_sigma)


def entropy_term(model: GlmModel) -> float:
    """Exact entropy for mean-field q, the anchored lower bound for a
    mixture."""
    if model.is_mixture:
        if model.anchor is None:
            raise DistributionError("a mixture q needs an entropy anchor")
        return mixture_entropy_lower_bound(model.q, model.anchor)
    return mean_field_entropy(model.q)


def elbo(model: GlmModel, include_entropy: bool = True) -> float:
    """The ELBO; a lower bound of it when q or the prior is a mixture.

    With ``include_entropy=False`` the weight entropy is left out (used by
    the stochastic mixture path, which estimates it separately).
    """
    val = (expected_loglik(model) + prior_term(model.q, model.prior)
           + _noise_kl_terms(model.noise))
    if include_entropy:
        val += entropy_term(model)
    return float(val)


def elbo_grad(model: GlmModel, include_entropy: bool = True) -> ElboGrad:
    """Exact gradient of :func:`elbo` w.r.t. all logits."""
    nz = model.noise
    stats, grid = model.stats, model.grid
    b_inv = float(nz.q_sigma @ nz.inv_sigma2)
    alpha, comps = _components(model.q)

    sq = np.empty(len(comps))
    g_probs = np.empty((len(comps), grid.b, grid.mbar))
    for i, c in enumerate(comps):
        s, t = _moments(c, grid)
        sq[i] = _sq_residual(stats, s, t)
        g_probs[i] = -0.5 * b_inv * _sq_residual_grad(stats, grid, s)
    e_sq = float(alpha @ sq)

    g_sig = (-0.5 * stats.n * nz.log_sigma2 - 0.5 * nz.inv_sigma2 * e_sq
             + np.log(nz.p_sigma) - nz.log_q_sigma)
    g_sig = softmax_backward(nz.q_sigma, g_sig)

    if not model.is_mixture:
        q = model.q
        g_q = softmax_backward(q.probs, g_probs[0])
        g_q += prior_term_grad(q, model.prior)
        if include_entropy:
            g_q += mean_field_entropy_grad(q)
        return ElboGrad(g_q, g_sig)

    q = model.q
    liks = -0.5 * b_inv * sq
    g_a = softmax_backward(q.alpha, liks)
    g_c = softmax_backward(q.probs, alpha[:, None, None] * g_probs)
    pa, pc = prior_term_grad(q, model.prior)
    g_a += pa
    g_c += pc
    g_anchor = None
    if include_entropy:
        if model.anchor is None:
            raise DistributionError("a mixture q needs an entropy anchor")
        ea, ec, g_anchor = mixture_entropy_lower_bound_grad(q, model.anchor)
        g_a += ea
        g_c += ec
    return ElboGrad(g_c, g_sig, g_a, g_anchor)


# ---------------------------------------------------------------------------
# parameter packing for the optimisers


def get_params(model: GlmModel) -> np.ndarray:
    parts = []
    if model.is_mixture:
        parts += [model.q.mixture_logits, model.q.component_logits.ravel()]
        if model.anchor is not None:
            parts.append(model.anchor.logits.ravel())
    else:
        parts.append(model.q.logits.ravel())
    parts.append(model.noise.q_sigma_logits)
    return np.concatenate(parts)


def with_params(model: GlmModel, vec) -> GlmModel:
    vec = np.asarray(vec, dtype=float)
    b, m = model.grid.b, model.grid.mbar
    pos = 0

    def take(k, shape):
        nonlocal pos
        out = vec[pos:pos + k].reshape(shape)
        pos += k
        return out

    anchor = model.anchor
    if model.is_mixture:
        r = model.q.r
        q = MixtureDist(take(r, (r,)), take(r * b * m, (r, b, m)))
        if anchor is not None:
            anchor = EntropyAnchor(take(b * m, (b, m)))
    else:
        q = MeanFieldDist(take(b * m, (b, m)))
    noise = model.noise.with_logits(take(model.noise.sigma2_values.size, (-1,)))
    if pos != vec.size:
        raise ValueError(f"parameter vector has {vec.size} entries, used {pos}")
    return replace(model, q=q, noise=noise, anchor=anchor)


# ---------------------------------------------------------------------------
# predictive moments


def _as_row(model: GlmModel, test_features) -> np.ndarray:
    x = np.asarray(test_features, dtype=float)
    if x.shape[-1] != model.grid.b:
        raise ValueError(
            f"test features have {x.shape[-1]} columns, expected {model.grid.b}")
    return x


def posterior_means(model: GlmModel) -> np.ndarray:
    """``s_j = E_q[w_j]`` (mixture: alpha-weighted)."""
    alpha, comps = _components(model.q)
    return sum(a * _moments(c, model.grid)[0] for a, c in zip(alpha, comps))


def predict_mean(model: GlmModel, test_features) -> np.ndarray:
    """Exact predictive mean ``Phi_* s``; accepts one row or a matrix."""
    x = _as_row(model, test_features)
    return x @ posterior_means(model)


def predict_variance(model: GlmModel, test_features) -> np.ndarray:
    """Exact predictive variance for mean-field q:
    ``E[sigma^2] + sum_j phi_j^2 (E[w_j^2] - s_j^2)``."""
    if model.is_mixture:
        raise NotImplementedError(
            "exact predictive variance needs a mean-field q; use sampling")
    x = _as_row(model, test_features)
    s, t = _moments(model.q, model.grid)
    return model.noise.expected_sigma2 + x**2 @ (t - s**2)
