"""
Lower bound on the ELBO of discretely relaxed logistic regression.

Class convention: ``Pr(y=0 | w) = sigmoid(phi . w)``.  Each log-likelihood
term is bounded below by its first-order expansion, giving

    q^T log l >= -s^T(Phi^T y)
                 - sum_{y_i=0} prod_j q_j^T exp(-phi_ij wbar_j)
                 - sum_{y_i=1} [prod_j q_j^T exp(phi_ij wbar_j) - sum_j q_j^T phi_ij wbar_j]

The products over ``j`` are formed as ``exp(sum_j logsumexp(log q_j +- phi_ij wbar_j))``
so no intermediate factor over- or underflows.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from .variational import (
    MeanFieldDist,
    SupportGrid,
    mean_field_entropy,
    mean_field_entropy_grad,
    prior_term,
    prior_term_grad,
    sample_indices,
)

DEFAULT_BATCH = 256
_CHUNK_ELEMS = 2**22


@dataclass(frozen=True)
class LogisticModel:
    grid: SupportGrid
    q: MeanFieldDist
    prior: MeanFieldDist
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels).reshape(-1)
        if phi.ndim != 2 or phi.shape[0] != y.shape[0]:
            raise ValueError(
                f"features {phi.shape} do not match {y.shape[0]} labels")
        if phi.shape[1] != self.grid.b:
            raise ValueError(
                f"features have {phi.shape[1]} columns, grid has b={self.grid.b}")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        for d in (self.q, self.prior):
            if (d.b, d.mbar) != (self.grid.b, self.grid.mbar):
                raise ValueError("distribution shape does not match the grid")
        object.__setattr__(self, "features", phi)
        object.__setattr__(self, "labels", y.astype(np.int8))

    @property
    def n(self) -> int:
        return self.labels.shape[0]


def _rows(model: LogisticModel, rows):
    if rows is None:
        return model.features, model.labels
    return model.features[rows], model.labels[rows]


def _chunks(n: int, b: int, m: int):
    step = max(1, _CHUNK_ELEMS // (b * m))
    for s in range(0, n, step):
        yield slice(s, s + step)


def _shifted(model: LogisticModel, phi, y):
    """``log q_jk - sign_i * phi_ij * wbar_jk`` with sign +1 for class 0."""
    sign = np.where(y == 0, 1.0, -1.0)
    z = (sign[:, None] * phi)[:, :, None] * model.grid.values[None]
    return model.q.log_probs[None] - z  # (c, b, m)


def log_products(model: LogisticModel, rows=None) -> np.ndarray:
    """``log prod_j q_j^T exp(-+phi_ij wbar_j)`` for each row; always finite."""
    phi, y = _rows(model, rows)
    out = np.empty(y.shape[0])
    b, m = model.grid.b, model.grid.mbar
    for sl in _chunks(y.shape[0], b, m):
        out[sl] = logsumexp(_shifted(model, phi[sl], y[sl]), axis=2).sum(axis=1)
    return out


def _means(model: LogisticModel) -> np.ndarray:
    return (model.q.probs * model.grid.values).sum(axis=1)


def likelihood_bound(model: LogisticModel, rows=None) -> float:
    """The bound on ``q^T log l``; ``rows`` selects a mini-batch, rescaled by
    ``n / len(batch)`` so the estimate stays unbiased."""
    phi, y = _rows(model, rows)
    s = _means(model)
    with np.errstate(over="ignore"):
        prods = np.exp(log_products(model, rows))
    one = y == 1
    val = (-s @ (phi.T @ y) - prods.sum() + float((phi[one] @ s).sum()))
    return float(val * model.n / max(y.shape[0], 1))


def likelihood_bound_grad(model: LogisticModel, rows=None) -> np.ndarray:
    """Gradient of :func:`likelihood_bound` w.r.t. the q logits."""
    phi, y = _rows(model, rows)
    q = model.q.probs
    wbar = model.grid.values
    b, m = model.grid.b, model.grid.mbar
    # d s_j / d theta_jk = q_jk (wbar_jk - s_j)
    ds = q * (wbar - _means(model)[:, None])
    lin = -(phi.T @ y) + phi[y == 1].sum(axis=0)
    g = lin[:, None] * ds
    for sl in _chunks(y.shape[0], b, m):
        a = _shifted(model, phi[sl], y[sl])
        lse = logsumexp(a, axis=2)
        with np.errstate(over="ignore"):
            prods = np.exp(lse.sum(axis=1))
        # d prod_i / d theta_jk = prod_i * (softmax_k(a_ij) - q_jk)
        resp = np.exp(a - lse[:, :, None])
        g -= np.einsum("c,cjk->jk", prods, resp) - prods.sum() * q
    return g * (model.n / max(y.shape[0], 1))


def elbo_lower_bound(model: LogisticModel, rows=None) -> float:
    """Likelihood bound plus the exact prior and entropy terms."""
    return (likelihood_bound(model, rows) + prior_term(model.q, model.prior)
            + mean_field_entropy(model.q))


def elbo_lower_bound_grad(model: LogisticModel, rows=None) -> np.ndarray:
    return (likelihood_bound_grad(model, rows)
            + prior_term_grad(model.q, model.prior)
            + mean_field_entropy_grad(model.q))


def minibatch(model: LogisticModel, rng: np.random.Generator,
              batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Row indices of a uniformly drawn mini-batch (without replacement)."""
    k = min(batch_size, model.n)
    return np.sort(rng.choice(model.n, size=k, replace=False))


def get_params(model: LogisticModel) -> np.ndarray:
    return model.q.logits.ravel().copy()


def with_params(model: LogisticModel, vec) -> LogisticModel:
    vec = np.asarray(vec, dtype=float)
    if vec.size != model.grid.b * model.grid.mbar:
        raise ValueError(f"expected {model.grid.b * model.grid.mbar} parameters")
    return replace(model, q=MeanFieldDist(vec.reshape(model.grid.b, -1)))


def predict_class_prob(model: LogisticModel, test_features, samples: int,
                       rng: np.random.Generator,
                       return_stderr: bool = False):
    """Monte-Carlo estimate of ``E_q[Pr(y=0 | w)]`` at one test point."""
    if samples < 1:
        raise ValueError("samples must be at least 1")
    x = np.asarray(test_features, dtype=float).reshape(-1)
    if x.size != model.grid.b:
        raise ValueError(f"test point has {x.size} features, expected {model.grid.b}")
    idx = sample_indices(model.q, samples, rng)
    w = model.grid.values[np.arange(model.grid.b), idx]
    p = expit(w @ x)
    if return_stderr:
        se = float(p.std(ddof=1) / np.sqrt(samples)) if samples > 1 else np.inf
        return float(p.mean()), se
    return float(p.mean())


def init_model(grid: SupportGrid, prior: MeanFieldDist, features, labels,
               q: Optional[MeanFieldDist] = None) -> LogisticModel:
    """Model with q initialised to the prior unless given."""
    q = q if q is not None else MeanFieldDist(prior.logits.copy())
    return LogisticModel(grid, q, prior, features, labels)

