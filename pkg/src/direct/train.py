"""
Optimisers and the score-function baseline.

:func:`fit_deterministic` is a limited-memory BFGS ascent with a strong-Wolfe
line search for exact objectives.  :func:`fit_stochastic` is plain SGD for
unbiased gradient samplers.  :func:`reinforce_elbo_grad` and
:func:`benchmark_direct_vs_reinforce` reproduce the comparison between
exact gradients and the score-function estimator on a synthetic GLM.
"""
from __future__ import annotations

import csv
import math
import os
import time
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import line_search

from . import bnn as bnn_mod
from . import glm
from . import logistic as logistic_mod
from .errors import ConfigError, NumericError
from .features import RffMap, make_support, rff_features
from .variational import (
    MeanFieldDist,
    entropy_estimate,
    sample_indices,
    scatter_counts,
)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]
Sampler = Callable[[np.ndarray, np.random.Generator], tuple[float, np.ndarray]]

OPTIMIZERS = ("quasi-newton", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "quasi-newton"
    max_iter: int = 1000
    tol: float = 1e-7
    lr: float = 0.1
    lr_decay: float = 0.0
    batch_size: int = 256
    mc_samples: int = 3000
    seed: int = 0
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    time_budget: Optional[float] = None

    def __post_init__(self):
        problems = []
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}")
        for name in ("max_iter", "batch_size", "mc_samples", "memory"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be a positive integer")
        if not self.tol > 0:
            problems.append("tol must be positive")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.lr_decay < 0:
            problems.append("lr_decay must be non-negative")
        if not 0 < self.c1 < self.c2 < 1:
            problems.append("need 0 < c1 < c2 < 1")
        if self.time_budget is not None and not self.time_budget > 0:
            problems.append("time_budget must be positive")
        if problems:
            raise ConfigError("invalid training config", problems)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    seconds: float
    objective: float
    grad_norm: float
    exact: float = math.nan


class Trace(list):
    """List of :class:`TraceRecord` with a termination status."""

    status: str = ""

    def append(self, rec: TraceRecord):
        if self and rec.iteration <= self[-1].iteration:
            raise ValueError("trace iterations must increase")
        super().append(rec)

    @property
    def final(self) -> TraceRecord:
        return self[-1]


def write_trace_csv(path, trace: Sequence[TraceRecord]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "seconds", "objective", "grad_norm", "exact_objective"])
        for r in trace:
            w.writerow([r.iteration, repr(r.seconds), repr(r.objective),
                        repr(r.grad_norm), repr(r.exact)])


def _check_finite(f, g, trace, where):
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        trace.status = "non-finite"
        raise NumericError(f"non-finite objective or gradient at {where}", trace)


class _Memo:
    """Remembers recent evaluations; the line search asks for f and f' of
    the same point separately."""

    def __init__(self, objective: Objective, size: int = 8):
        self.objective = objective
        self.cache: dict[bytes, tuple[float, np.ndarray]] = {}
        self.order: deque = deque()
        self.size = size
        self.calls = 0

    def __call__(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        hit = self.cache.get(key)
        if hit is None:
            self.calls += 1
            f, g = self.objective(np.array(x, dtype=float))
            hit = (float(f), np.asarray(g, dtype=float).ravel())
            self.cache[key] = hit
            self.order.append(key)
            if len(self.order) > self.size:
                self.cache.pop(self.order.popleft(), None)
        return hit


def _two_loop(g, S, Y):
    """Approximate inverse-Hessian times ``g`` (for the minimisation view)."""
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Y))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        bta = rho * (y @ q)
        q += s * (a - bta)
    return q


def _backtrack(memo, x, f0, slope, p, c1, max_halvings=60):
    """Armijo backtracking for ascent along ``p``; returns ``(alpha, f, g)``."""
    alpha = 1.0
    for _ in range(max_halvings):
        f, g = memo(x + alpha * p)
        if math.isfinite(f) and f >= f0 + c1 * alpha * slope:
            return alpha, f, g
        alpha *= 0.5
    return None, None, None


def fit_deterministic(objective: Objective, x0, config: Optional[TrainConfig] = None,
                      callback: Optional[Callable] = None):
    """Maximise ``objective`` (returning value and gradient) by L-BFGS.

    Stops when the gradient infinity-norm drops below ``config.tol``, after
    ``config.max_iter`` iterations, when the time budget is spent, or when
    no ascent step can be found.  Returns ``(x, trace)``.
    """
    cfg = config or TrainConfig()
    memo = _Memo(objective)
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float).ravel()
    f, g = memo(x)
    trace = Trace()
    _check_finite(f, g, trace, "the initial point")
    trace.append(TraceRecord(0, time.perf_counter() - t0, f, float(np.abs(g).max(initial=0))))
    S: deque = deque(maxlen=cfg.memory)
    Y: deque = deque(maxlen=cfg.memory)

    def neg_f(z):
        return -memo(z)[0]

    def neg_g(z):
        return -memo(z)[1]

    trace.status = "max_iter"
    for it in range(1, cfg.max_iter + 1):
        if np.abs(g).max(initial=0) < cfg.tol:
            trace.status = "converged"
            break
        if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
            trace.status = "time_budget"
            break
        p = _two_loop(g, S, Y) if S else g / max(1.0, np.linalg.norm(g))
        slope = float(g @ p)
        if not slope > 0:
            S.clear()
            Y.clear()
            p = g / max(1.0, np.linalg.norm(g))
            slope = float(g @ p)
        with warnings.catch_warnings():
            # scipy warns when the strong-Wolfe search fails; we fall back
            warnings.simplefilter("ignore")
            with np.errstate(over="ignore", invalid="ignore"):
                res = line_search(neg_f, neg_g, x, p, gfk=-g, old_fval=-f,
                                  c1=cfg.c1, c2=cfg.c2, maxiter=20)
        alpha = res[0]
        f_new = g_new = None
        if alpha is not None and np.isfinite(alpha):
            f_new, g_new = memo(x + alpha * p)
            if not (math.isfinite(f_new) and f_new >= f):
                alpha = None
        if alpha is None:
            alpha, f_new, g_new = _backtrack(memo, x, f, slope, p, cfg.c1)
            if alpha is None:
                trace.status = "line_search_failed"
                break
        x_new = x + alpha * p
        _check_finite(f_new, g_new, trace, f"iteration {it}")
        s = x_new - x
        y = g - g_new  # gradient change of the minimised function -f
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
        x, f, g = x_new, f_new, g_new
        trace.append(TraceRecord(it, time.perf_counter() - t0, f,
                                 float(np.abs(g).max(initial=0))))
        if callback is not None:
            callback(x, trace)
    else:
        if np.abs(g).max(initial=0) < cfg.tol:
            trace.status = "converged"
    return x, trace


def fit_stochastic(sampler: Sampler, x0, config: Optional[TrainConfig] = None,
                   evaluate: Optional[Callable[[np.ndarray], float]] = None,
                   eval_every: int = 1):
    """Stochastic gradient ascent ``x += lr_t * g`` with
    ``lr_t = lr * (1 + t)**(-lr_decay)``.

    ``sampler(x, rng)`` returns an objective estimate and an unbiased
    gradient sample.  ``evaluate`` (optional) scores iterates exactly every
    ``eval_every`` iterations; its cost is excluded from the clock.
    Returns ``(x, trace)``; bit-reproducible from ``config.seed``.
    """
    cfg = config or TrainConfig(optimizer="sgd")
    rng = np.random.default_rng(cfg.seed)
    x = np.array(x0, dtype=float).ravel()
    trace = Trace()
    excluded = 0.0
    t0 = time.perf_counter()

    def clock():
        return time.perf_counter() - t0 - excluded

    def exact_at(z, it):
        nonlocal excluded
        if evaluate is None or (it % eval_every and it != -1):
            return math.nan
        s = time.perf_counter()
        v = float(evaluate(z))
        excluded += time.perf_counter() - s
        return v

    trace.append(TraceRecord(0, 0.0, math.nan, math.nan, exact_at(x, 0)))
    trace.status = "max_iter"
    for it in range(1, cfg.max_iter + 1):
        if cfg.time_budget is not None and clock() > cfg.time_budget:
            trace.status = "time_budget"
            break
        val, g = sampler(x, rng)
        g = np.asarray(g, dtype=float).ravel()
        _check_finite(val, g, trace, f"iteration {it}")
        lr = cfg.lr * (1.0 + it - 1) ** (-cfg.lr_decay)
        x_new = x + lr * g
        if not np.all(np.isfinite(x_new)):
            trace.status = "non-finite"
            raise NumericError(f"parameters became non-finite at iteration {it}", trace)
        x = x_new
        trace.append(TraceRecord(it, clock(), float(val),
                                 float(np.abs(g).max(initial=0)), exact_at(x, it)))
    if evaluate is not None and math.isnan(trace[-1].exact):
        trace[-1] = replace(trace[-1], exact=exact_at(x, -1))
    return x, trace


# ---------------------------------------------------------------------------
# objective adapters


def glm_objective(model: glm.GlmModel, include_entropy: bool = True) -> Objective:
    def fun(x):
        m = glm.with_params(model, x)
        return (glm.elbo(m, include_entropy),
                glm.elbo_grad(m, include_entropy).vector())
    return fun


def glm_mixture_sampler(model: glm.GlmModel, t: int) -> Sampler:
    """Exact likelihood and prior terms plus a ``t``-sample entropy estimate
    (the entropy gradient is the negated surrogate gradient)."""
    if not model.is_mixture:
        raise ValueError("the sampled-entropy path needs a mixture q")
    bare = replace(model, anchor=None)

    def fun(x, rng):
        m = glm.with_params(bare, x)
        val = glm.elbo(m, include_entropy=False)
        g = glm.elbo_grad(m, include_entropy=False)
        h, ga, gc = entropy_estimate(m.q, t, rng)
        g.mixture_logits = g.mixture_logits + ga
        g.q_logits = g.q_logits + gc
        return val + h, g.vector()
    return fun


def logistic_objective(model: logistic_mod.LogisticModel) -> Objective:
    def fun(x):
        m = logistic_mod.with_params(model, x)
        return (logistic_mod.elbo_lower_bound(m),
                logistic_mod.elbo_lower_bound_grad(m).ravel())
    return fun


def logistic_sampler(model: logistic_mod.LogisticModel, batch_size: int) -> Sampler:
    def fun(x, rng):
        m = logistic_mod.with_params(model, x)
        rows = logistic_mod.minibatch(m, rng, batch_size)
        return (logistic_mod.elbo_lower_bound(m, rows),
                logistic_mod.elbo_lower_bound_grad(m, rows).ravel())
    return fun


def bnn_objective(model: bnn_mod.BnnModel) -> Objective:
    def fun(x):
        m = bnn_mod.with_params(model, x)
        return m.elbo(), m.elbo_grad().vector()
    return fun


# ---------------------------------------------------------------------------
# score-function baseline


@dataclass
class RunningMean:
    count: int = 0
    mean: float = 0.0

    def update(self, values):
        v = np.asarray(values, dtype=float)
        if v.size:
            tot = self.count + v.size
            self.mean += (v.sum() - v.size * self.mean) / tot
            self.count = tot


def sample_rewards(model: glm.GlmModel, t: int, rng: np.random.Generator):
    """Draw ``(w, sigma^2)`` from q and return ``(w_idx, sigma_idx, reward)``
    with reward ``log l + log p - log q`` per draw."""
    if model.is_mixture:
        raise ValueError("the score-function baseline supports mean-field q")
    q, nz, st = model.q, model.noise, model.stats
    b = model.grid.b
    idx = sample_indices(q, t, rng)
    k = np.minimum(np.searchsorted(np.cumsum(nz.q_sigma), rng.random(t),
                                   side="right"), nz.sigma2_values.size - 1)
    W = model.grid.values[np.arange(b), idx]
    rss = st.yty - 2.0 * W @ st.phity + np.einsum("ti,ij,tj->t", W, st.phitphi, W)
    s2 = nz.sigma2_values[k]
    loglik = -0.5 * st.n * (glm.LOG_2PI + np.log(s2)) - 0.5 * rss / s2
    cols = np.arange(b)
    log_pw = model.prior.log_probs[cols, idx].sum(axis=1)
    log_qw = q.log_probs[cols, idx].sum(axis=1)
    reward = (loglik + log_pw + np.log(nz.p_sigma[k]) - log_qw
              - nz.log_q_sigma[k])
    return idx, k, reward


def reinforce_elbo_grad(model: glm.GlmModel, t: int, rng: np.random.Generator,
                        baseline: Optional[RunningMean] = None):
    """Score-function estimate of the ELBO gradient.

    ``baseline`` holds the running mean of rewards from earlier calls; it is
    subtracted before weighting the scores (independent of the current
    draws, so the estimate stays unbiased) and then updated.  Returns
    ``(ElboGrad, mean_reward)``.
    """
    if t < 2:
        raise ValueError("t must be at least 2")
    idx, k, reward = sample_rewards(model, t, rng)
    c = baseline.mean if baseline is not None and baseline.count else 0.0
    adv = reward - c
    q, nz = model.q, model.noise
    g_q = (scatter_counts(idx, adv, q.mbar) - adv.sum() * q.probs) / t
    g_s = (np.bincount(k, weights=adv, minlength=nz.sigma2_values.size)
           - adv.sum() * nz.q_sigma) / t
    if baseline is not None:
        baseline.update(reward)
    return glm.ElboGrad(g_q, g_s), float(reward.mean())


def reinforce_sampler(model: glm.GlmModel, t: int, use_baseline: bool = True) -> Sampler:
    base = RunningMean() if use_baseline else None

    def fun(x, rng):
        g, r = reinforce_elbo_grad(glm.with_params(model, x), t, rng, base)
        return r, g.vector()
    return fun


# ---------------------------------------------------------------------------
# DIRECT vs REINFORCE benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    b: int = 20
    mbar: int = 3
    n: int = 1000
    noise_sd: float = 0.1
    d: int = 2
    lengthscale: float = 1.0


def make_synthetic_glm(spec: SyntheticSpec, seed: int):
    """Targets from a random weighting of ``b`` RFF features; q starts at
    the uniform prior.  Returns ``(model, phi, y)``."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((spec.n, spec.d))
    fmap = RffMap.create(spec.b, np.full(spec.d, spec.lengthscale), 1.0,
                         seed=int(rng.integers(2**31)))
    phi = rff_features(fmap, X)
    w_true = rng.standard_normal(spec.b)
    y = phi @ w_true + spec.noise_sd * rng.standard_normal(spec.n)
    grid = make_support(1.0, spec.mbar, spec.b)
    prior = MeanFieldDist.uniform(spec.b, spec.mbar)
    noise = glm.NoiseModel.log_uniform(0.1 * float(np.var(y)), spec.mbar)
    model = glm.GlmModel(grid, MeanFieldDist.uniform(spec.b, spec.mbar), prior,
                         noise, glm.precompute(phi, y))
    return model, phi, y


@dataclass
class BenchmarkRun:
    method: str
    seed: int
    lr: Optional[float]
    trace: Trace
    final_elbo: float
    seconds: float


@dataclass
class BenchmarkReport:
    spec: SyntheticSpec
    budget: float
    runs: list = field(default_factory=list)

    def for_seed(self, seed: int):
        return [r for r in self.runs if r.seed == seed]

    def best_reinforce(self, seed: int) -> BenchmarkRun:
        rs = [r for r in self.for_seed(seed) if r.method == "reinforce"]
        return max(rs, key=lambda r: r.final_elbo if math.isfinite(r.final_elbo)
                   else -math.inf)

    def direct(self, seed: int) -> BenchmarkRun:
        return next(r for r in self.for_seed(seed) if r.method == "direct")

    @property
    def seeds(self):
        return sorted({r.seed for r in self.runs})

    def summary(self) -> list[dict]:
        rows = []
        for s in self.seeds:
            d, r = self.direct(s), self.best_reinforce(s)
            rows.append({"seed": s, "direct_elbo": d.final_elbo,
                         "direct_iterations": d.trace.final.iteration,
                         "direct_seconds": d.seconds,
                         "reinforce_elbo": r.final_elbo, "reinforce_lr": r.lr,
                         "reinforce_iterations": r.trace.final.iteration,
                         "reinforce_seconds": r.seconds})
        return rows


def _budget_default() -> float:
    return float(os.environ.get("DIRECT_BENCH_BUDGET", "60"))


def benchmark_direct_vs_reinforce(spec: SyntheticSpec = SyntheticSpec(),
                                  seeds: Sequence[int] = (0,),
                                  budget: Optional[float] = None,
                                  lrs: Sequence[float] = (1e-3, 1e-2, 1e-1),
                                  t: int = 100, use_baseline: bool = True,
                                  eval_every: int = 10) -> BenchmarkReport:
    """Run DIRECT (L-BFGS on the exact ELBO) and REINFORCE (SGD, one run per
    learning rate) from the same initial q under a wall-time budget.

    REINFORCE iterates are scored with the exact ELBO every ``eval_every``
    iterations and at the end; that scoring is not charged to its clock.
    """
    budget = _budget_default() if budget is None else float(budget)
    report = BenchmarkReport(spec, budget)
    for seed in seeds:
        model, _, _ = make_synthetic_glm(spec, seed)
        x0 = glm.get_params(model)
        exact = glm_objective(model)

        t0 = time.perf_counter()
        x, tr = fit_deterministic(exact, x0, TrainConfig(time_budget=budget))
        secs = time.perf_counter() - t0
        report.runs.append(BenchmarkRun("direct", seed, None, tr,
                                        exact(x)[0], secs))

        def score(z):
            return glm.elbo(glm.with_params(model, z))

        for lr in lrs:
            cfg = TrainConfig(optimizer="sgd", lr=lr, max_iter=10**9,
                              time_budget=budget, seed=seed)
            try:
                xr, trr = fit_stochastic(reinforce_sampler(model, t, use_baseline),
                                         x0, cfg, evaluate=score,
                                         eval_every=eval_every)
                final = score(xr)
            except NumericError as e:
                trr = e.trace
                done = [r.exact for r in trr if math.isfinite(r.exact)]
                final = done[-1] if done else -math.inf
            report.runs.append(BenchmarkRun("reinforce", seed, lr, trr, final,
                                            trr[-1].seconds))
    return report
