"""
Quadratic-activation Bayesian regression networks evaluated over the whole
hypothesis space at once.

A network state holds, for every training point ``l``, the vector of outputs
at all ``mbar**b`` weight settings as ``sum_j C[j, l] * kron_i g_ji``.  The
factors ``g_ji`` are stored sparsely (absent means all-ones) and shared by
every data column, so after :func:`bnn_precompute` the ELBO never touches
the training data again.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .glm import LOG_2PI, ElboGrad, NoiseModel, _noise_kl_terms
from .kron import KronSumVec, KronTerm, compact_terms
from .variational import (
    MeanFieldDist,
    SupportGrid,
    mean_field_entropy,
    mean_field_entropy_grad,
    prior_term,
    prior_term_grad,
    softmax_backward,
)


class AssignmentError(ValueError):
    """A latent variable is consumed twice or the layout does not fit."""


@dataclass(frozen=True)
class BnnArch:
    """Layer widths (last must be 1) and the input dimension.

    Variables are numbered row-major over (layer, neuron, input).
    """

    layer_widths: tuple[int, ...]
    input_dim: int

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if not widths or any(w < 1 for w in widths):
            raise AssignmentError("layer widths must be positive")
        if widths[-1] != 1:
            raise AssignmentError("the final layer must have width 1")
        if int(self.input_dim) < 1:
            raise AssignmentError("input_dim must be positive")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "input_dim", int(self.input_dim))

    @property
    def depth(self) -> int:
        return len(self.layer_widths)

    def fan_in(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.layer_widths[layer - 1]

    @property
    def n_vars(self) -> int:
        return sum(w * self.fan_in(li) for li, w in enumerate(self.layer_widths))

    def variable_index(self, layer: int, neuron: int, inp: int) -> int:
        if not (0 <= layer < self.depth and 0 <= neuron < self.layer_widths[layer]
                and 0 <= inp < self.fan_in(layer)):
            raise AssignmentError(f"no weight at {(layer, neuron, inp)}")
        base = sum(w * self.fan_in(li)
                   for li, w in enumerate(self.layer_widths[:layer]))
        return base + neuron * self.fan_in(layer) + inp

    @property
    def variable_assignment(self) -> dict[tuple[int, int, int], int]:
        return {(li, k, i): self.variable_index(li, k, i)
                for li, w in enumerate(self.layer_widths)
                for k in range(w) for i in range(self.fan_in(li))}


@dataclass(frozen=True)
class BnnState:
    """``u_l = sum_j C[j, l] kron_i g_ji`` for every data column ``l``."""

    C: np.ndarray
    factors: tuple[Mapping[int, np.ndarray], ...]
    dims: tuple[int, ...]
    consumed: frozenset = field(default=frozenset())

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        if C.ndim != 2 or C.shape[0] != len(self.factors):
            raise ValueError(
                f"C has shape {C.shape} for {len(self.factors)} terms")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "dims", tuple(int(m) for m in self.dims))
        object.__setattr__(self, "consumed", frozenset(self.consumed))

    @property
    def h(self) -> int:
        return self.C.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[1]

    @classmethod
    def from_column(cls, column, dims) -> BnnState:
        """The state of a raw input: one term, all factors ones."""
        col = np.asarray(column, dtype=float).reshape(1, -1)
        return cls(col, ({},), dims)

    @classmethod
    def zero(cls, n: int, dims) -> BnnState:
        return cls(np.zeros((0, n)), (), dims)

    def kron(self, column: int) -> KronSumVec:
        """Hypothesis-space outputs for one data column."""
        return KronSumVec(tuple(KronTerm(c, f, self.dims)
                                for c, f in zip(self.C[:, column], self.factors)),
                          self.dims)


def mult_var(state: BnnState, p: int, grid: SupportGrid) -> BnnState:
    """Multiply every hypothesis output by weight ``p``."""
    if p in state.consumed:
        raise AssignmentError(f"variable {p} already consumed on this path")
    wbar = grid.values[p]
    out = []
    for f in state.factors:
        g = dict(f)
        g[p] = wbar if p not in g else g[p] * wbar
        out.append(g)
    return BnnState(state.C, tuple(out), state.dims, state.consumed | {p})


def neuron_sum(states: Sequence[BnnState]) -> BnnState:
    """Sum of states, with proportional terms merged."""
    if not states:
        raise ValueError("neuron_sum needs at least one state")
    dims, n = states[0].dims, states[0].n
    for s in states:
        if s.dims != dims or s.n != n:
            raise ValueError("states disagree on dims or data count")
    rows = [row for s in states for row in s.C]
    facs = [f for s in states for f in s.factors]
    coeffs, factors = compact_terms(rows, facs)
    keep = [i for i, c in enumerate(coeffs) if np.any(c != 0.0)]
    C = np.array([coeffs[i] for i in keep]).reshape(len(keep), n)
    consumed = frozenset().union(*(s.consumed for s in states))
    return BnnState(C, tuple(factors[i] for i in keep), dims, consumed)


def _hadamard(fa, fb):
    out = dict(fa)
    for j, f in fb.items():
        out[j] = f if j not in out else out[j] * f
    return out


def quad_activation(state: BnnState) -> BnnState:
    """Elementwise square: ``h`` terms become ``h(h+1)/2`` (no compaction)."""
    h = state.h
    rows, facs = [], []
    for j in range(h):
        for k in range(j, h):
            c = state.C[j] * state.C[k]
            rows.append(c if j == k else 2.0 * c)
            facs.append(_hadamard(state.factors[j], state.factors[k]))
    C = np.array(rows).reshape(len(rows), state.n)
    return BnnState(C, tuple(facs), state.dims, state.consumed)


def forward_pass(arch: BnnArch, X, grid: SupportGrid) -> BnnState:
    """Final-layer state for every training row of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise AssignmentError(
            f"X has shape {X.shape}, architecture expects {arch.input_dim} inputs")
    if arch.n_vars != grid.b:
        raise AssignmentError(
            f"architecture uses {arch.n_vars} weights but the grid has b={grid.b}")
    dims = (grid.mbar,) * grid.b
    inputs = [BnnState.from_column(X[:, i], dims) for i in range(arch.input_dim)]
    with np.errstate(over="raise"):
        for li, width in enumerate(arch.layer_widths):
            outs = []
            for k in range(width):
                s = neuron_sum([mult_var(inp, arch.variable_index(li, k, i), grid)
                                for i, inp in enumerate(inputs)])
                outs.append(s if li == arch.depth - 1 else quad_activation(s))
            inputs = outs
    return inputs[0]


@dataclass(frozen=True)
class BnnSuffStats:
    yty: float
    p_vec: np.ndarray
    V: np.ndarray
    n: int


def bnn_precompute(state: BnnState, y) -> BnnSuffStats:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != state.n:
        raise ValueError(f"{y.shape[0]} targets for {state.n} data columns")
    return BnnSuffStats(float(y @ y), state.C @ y, state.C @ state.C.T,
                        state.n)


# ---------------------------------------------------------------------------
# ELBO


def _dense_factors(state: BnnState):
    """(h, b, mbar) factor tensor with ones where absent, plus presence mask."""
    h, b, m = state.h, len(state.dims), state.dims[0]
    G = np.ones((h, b, m))
    P = np.zeros((h, b), dtype=bool)
    for j, f in enumerate(state.factors):
        for i, g in f.items():
            G[j, i] = g
            P[j, i] = True
    return G, P


def _prod_and_loo(vals: np.ndarray):
    """Product over the last axis and the leave-one-out products, in
    log-magnitude + sign form so long products neither over- nor underflow."""
    zero = vals == 0.0
    nz = zero.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        la = np.where(zero, 0.0, np.log(np.abs(vals)))
    neg = (vals < 0) & ~zero
    tot_log = la.sum(axis=-1, keepdims=True)
    tot_neg = neg.sum(axis=-1, keepdims=True)
    sgn_all = np.where(tot_neg % 2 == 1, -1.0, 1.0)
    prod = np.where(nz == 0, sgn_all * np.exp(tot_log), 0.0)[..., 0]
    loo_sign = np.where((tot_neg - neg) % 2 == 1, -1.0, 1.0)
    loo_mag = np.exp(tot_log - la)
    loo = np.where(nz == 0, loo_sign * loo_mag,
                   np.where((nz == 1) & zero, loo_sign * loo_mag, 0.0))
    return prod, loo


def _expectations(state: BnnState, q: MeanFieldDist):
    """``a_j = E prod_i g_ji`` and ``B_jk = E prod_i g_ji g_ki`` plus pieces
    for the gradient."""
    G, P = _dense_factors(state)
    probs = q.probs
    va = np.where(P, np.einsum("jim,im->ji", G, probs), 1.0)
    a, loo_a = _prod_and_loo(va)
    GG = G[:, None] * G[None]  # (h, h, b, m)
    PP = P[:, None] | P[None]
    vb = np.where(PP, np.einsum("jkim,im->jki", GG, probs), 1.0)
    B, loo_b = _prod_and_loo(vb)
    return a, B, (G, P, GG, PP, loo_a, loo_b)


def _sq_residual(stats: BnnSuffStats, a, B) -> float:
    return float(stats.yty - 2.0 * stats.p_vec @ a + np.sum(stats.V * B))


def bnn_expected_loglik(state: BnnState, stats: BnnSuffStats,
                        q: MeanFieldDist, noise: NoiseModel) -> float:
    a, B, _ = _expectations(state, q)
    sq = _sq_residual(stats, a, B)
    return float(-0.5 * stats.n * (LOG_2PI + noise.q_sigma @ noise.log_sigma2)
                 - 0.5 * (noise.q_sigma @ noise.inv_sigma2) * sq)


def bnn_elbo(state: BnnState, stats: BnnSuffStats, q: MeanFieldDist,
             prior: MeanFieldDist, noise: NoiseModel) -> float:
    """Exact ELBO of the network (mean-field q over weights and sigma^2)."""
    return (bnn_expected_loglik(state, stats, q, noise) + prior_term(q, prior)
            + mean_field_entropy(q) + _noise_kl_terms(noise))


def bnn_elbo_grad(state: BnnState, stats: BnnSuffStats, q: MeanFieldDist,
                  prior: MeanFieldDist, noise: NoiseModel) -> ElboGrad:
    """Analytic gradient of :func:`bnn_elbo` w.r.t. the q and q_sigma logits."""
    a, B, (G, P, GG, PP, loo_a, loo_b) = _expectations(state, q)
    sq = _sq_residual(stats, a, B)
    b_inv = float(noise.q_sigma @ noise.inv_sigma2)
    # d sq / d q_im
    da = np.einsum("j,ji,jim->im", stats.p_vec, loo_a * P, G)
    db = np.einsum("jk,jki,jkim->im", stats.V, loo_b * PP, GG)
    g_probs = -0.5 * b_inv * (-2.0 * da + db)
    g_q = (softmax_backward(q.probs, g_probs) + prior_term_grad(q, prior)
           + mean_field_entropy_grad(q))
    g_sig = (-0.5 * stats.n * noise.log_sigma2 - 0.5 * noise.inv_sigma2 * sq
             + np.log(noise.p_sigma) - noise.log_q_sigma)
    return ElboGrad(g_q, softmax_backward(noise.q_sigma, g_sig))


# ---------------------------------------------------------------------------
# assembled model for training and prediction


@dataclass(frozen=True)
class BnnModel:
    arch: BnnArch
    grid: SupportGrid
    q: MeanFieldDist
    prior: MeanFieldDist
    noise: NoiseModel
    state: BnnState
    stats: BnnSuffStats

    @classmethod
    def build(cls, arch: BnnArch, grid: SupportGrid, X, y,
              prior: MeanFieldDist, noise: NoiseModel,
              q: Optional[MeanFieldDist] = None) -> BnnModel:
        state = forward_pass(arch, X, grid)
        q = q if q is not None else MeanFieldDist(prior.logits.copy())
        return cls(arch, grid, q, prior, noise, state, bnn_precompute(state, y))

    def elbo(self) -> float:
        return bnn_elbo(self.state, self.stats, self.q, self.prior, self.noise)

    def elbo_grad(self) -> ElboGrad:
        return bnn_elbo_grad(self.state, self.stats, self.q, self.prior,
                             self.noise)


def get_params(model: BnnModel) -> np.ndarray:
    return np.concatenate([model.q.logits.ravel(), model.noise.q_sigma_logits])


def with_params(model: BnnModel, vec) -> BnnModel:
    vec = np.asarray(vec, dtype=float)
    k = model.grid.b * model.grid.mbar
    if vec.size != k + model.noise.sigma2_values.size:
        raise ValueError("parameter vector has the wrong length")
    return replace(model, q=MeanFieldDist(vec[:k].reshape(model.grid.b, -1)),
                   noise=model.noise.with_logits(vec[k:]))


def predict_moments(model: BnnModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Exact predictive mean and variance (including noise) at rows of X."""
    st = forward_pass(model.arch, X, model.grid)
    a, B, _ = _expectations(st, model.q)
    mean = st.C.T @ a
    second = np.einsum("jl,jk,kl->l", st.C, B, st.C)
    return mean, second - mean**2 + model.noise.expected_sigma2


def network_output(arch: BnnArch, X, w) -> np.ndarray:
    """Network output at rows of ``X`` for one concrete weight vector."""
    acts = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != arch.n_vars:
        raise AssignmentError(f"{w.size} weights for an architecture using {arch.n_vars}")
    pos = 0
    for li, width in enumerate(arch.layer_widths):
        k = width * arch.fan_in(li)
        acts = acts @ w[pos:pos + k].reshape(width, -1).T
        pos += k
        if li < arch.depth - 1:
            acts = acts**2
    return acts[:, 0]
