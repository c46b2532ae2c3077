"""
End-to-end training, prediction and cross-validation for the three model
kinds, driven by a :class:`~direct.config.RunConfig`.

Inputs are standardised with training statistics.  Regression targets are
centred and scaled (the GLM has no bias term) and predictions are mapped
back to the original units.  Random Fourier features are built with unit
amplitude; the prior scale ``sigma_w`` lives in the support grid and prior
only.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Any, Optional

import numpy as np

from . import bnn as bnn_mod
from . import glm
from . import logistic as logistic_mod
from . import train as tr
from .config import RunConfig
from .errors import ConfigError, DataError, NumericError
from .features import (
    Dataset,
    RffMap,
    Standardizer,
    discretized_gaussian_prior,
    init_hyperparams,
    kfold,
    load_csv,
    make_support,
    rff_features,
    standardize,
)
from .qinfer import WeightLevels, integer_predict_many, quantize_features
from .variational import (
    EntropyAnchor,
    MeanFieldDist,
    MixtureDist,
    SupportGrid,
    expected_sparsity,
    sample_indices,
)

CHUNK_ROWS = 10_000
MIXTURE_JITTER = 0.5


@dataclass(frozen=True)
class Fitted:
    """A trained model with everything needed to predict on raw inputs."""

    kind: str
    config: dict
    standardizer: Standardizer
    y_mean: float
    y_scale: float
    model: Any
    fmap: Optional[RffMap]
    status: str
    iterations: int
    objective: float

    @property
    def input_dim(self) -> int:
        return self.standardizer.mean.size

    @property
    def grid(self) -> SupportGrid:
        return self.model.grid

    @property
    def q(self):
        return self.model.q


def train_config(cfg: RunConfig) -> tr.TrainConfig:
    o = cfg["optimizer"]
    return tr.TrainConfig(optimizer=o["kind"], max_iter=o["max_iter"], tol=float(o["tol"]),
                          lr=float(o["lr"]), lr_decay=float(o["lr_decay"]),
                          batch_size=o["batch_size"],
                          mc_samples=cfg["variational"]["mc_samples"],
                          seed=cfg["seed"], memory=o["memory"],
                          time_budget=o["time_budget"])


def _lengthscales(cfg: RunConfig, data: Dataset) -> np.ndarray:
    f = cfg["features"]
    if f["lengthscales"] is not None:
        ls = np.asarray(f["lengthscales"], dtype=float)
        if ls.size != data.d:
            raise ConfigError("lengthscale count mismatch",
                              [f"features.lengthscales: {ls.size} values for "
                               f"{data.d} input columns"])
        return ls
    return init_hyperparams(data, cfg["seed"], f["max_rows"]).lengthscales


def _run(objective_kind: str, fun, x0, tcfg: tr.TrainConfig):
    if objective_kind == "exact":
        return tr.fit_deterministic(fun, x0, tcfg)
    return tr.fit_stochastic(fun, x0, tcfg)


def _glm_stats(fmap: RffMap, Xs, ys) -> glm.GlmSuffStats:
    stats = glm.GlmSuffStats.empty(fmap.b)
    for lo in range(0, Xs.shape[0], CHUNK_ROWS):
        stats = stats.update(rff_features(fmap, Xs[lo:lo + CHUNK_ROWS]),
                             ys[lo:lo + CHUNK_ROWS])
    return stats


def _join(first: tr.Trace, second: tr.Trace) -> tr.Trace:
    out = tr.Trace(first)
    it0, t0 = first.final.iteration, first.final.seconds
    for r in second[1:]:
        out.append(replace(r, iteration=r.iteration + it0, seconds=r.seconds + t0))
    out.status = second.status
    return out


def _fit_glm(cfg: RunConfig, tcfg, Xs, ys, ls, sigma_w, noise_var):
    b, seed = cfg["b"], cfg["seed"]
    fmap = RffMap.create(b, ls, 1.0, seed)
    grid = make_support(sigma_w, cfg["mbar"], b)
    prior = discretized_gaussian_prior(grid, sigma_w)
    noise = glm.NoiseModel.log_uniform(noise_var, cfg["mbar_sigma"])
    model = glm.GlmModel(grid, MeanFieldDist(prior.logits.copy()), prior, noise,
                         _glm_stats(fmap, Xs, ys))
    mf_cfg = replace(tcfg, optimizer="quasi-newton")
    x, trace = tr.fit_deterministic(tr.glm_objective(model), glm.get_params(model), mf_cfg)
    model = glm.with_params(model, x)
    var = cfg["variational"]
    if var["kind"] == "mixture":
        rng = np.random.default_rng(seed)
        mf = model.q
        comps = [mf] + [MeanFieldDist(mf.logits + MIXTURE_JITTER * rng.standard_normal(
            mf.logits.shape)) for _ in range(var["r"] - 1)]
        q = MixtureDist.from_components(comps)
        if var["entropy"] == "bound":
            model = replace(model, q=q, anchor=EntropyAnchor.from_dist(mf))
            x, t2 = tr.fit_deterministic(tr.glm_objective(model), glm.get_params(model), tcfg)
        else:
            model = replace(model, q=q, anchor=None)
            x, t2 = tr.fit_stochastic(tr.glm_mixture_sampler(model, var["mc_samples"]),
                                      glm.get_params(model), tcfg)
        model = glm.with_params(model, x)
        trace = _join(trace, t2)
    return model, fmap, trace


def _fit_logistic(cfg: RunConfig, tcfg, Xs, y, ls, sigma_w):
    b = cfg["b"]
    fmap = RffMap.create(b, ls, 1.0, cfg["seed"])
    grid = make_support(sigma_w, cfg["mbar"], b)
    prior = discretized_gaussian_prior(grid, sigma_w)
    try:
        model = logistic_mod.init_model(grid, prior, rff_features(fmap, Xs), y)
    except ValueError as e:
        raise DataError(str(e)) from None
    if tcfg.optimizer == "quasi-newton":
        fun, kind = tr.logistic_objective(model), "exact"
    else:
        fun, kind = tr.logistic_sampler(model, tcfg.batch_size), "stochastic"
    x, trace = _run(kind, fun, logistic_mod.get_params(model), tcfg)
    return logistic_mod.with_params(model, x), fmap, trace


def _fit_bnn(cfg: RunConfig, tcfg, Xs, ys, sigma_w, noise_var):
    arch = bnn_mod.BnnArch(tuple(cfg["bnn"]["layers"]), Xs.shape[1])
    grid = make_support(sigma_w, cfg["mbar"], arch.n_vars)
    prior = discretized_gaussian_prior(grid, sigma_w)
    noise = glm.NoiseModel.log_uniform(noise_var, cfg["mbar_sigma"])
    try:
        model = bnn_mod.BnnModel.build(arch, grid, Xs, ys, prior, noise)
    except FloatingPointError as e:
        raise NumericError(f"network forward pass overflowed: {e}") from None
    x, trace = tr.fit_deterministic(tr.bnn_objective(model), bnn_mod.get_params(model), tcfg)
    return bnn_mod.with_params(model, x), None, trace


def fit_dataset(cfg: RunConfig, data: Dataset):
    """Train on ``data`` as configured.  Returns ``(Fitted, Trace)``."""
    kind = cfg["model"]
    tcfg = train_config(cfg)
    stdz, sdata = standardize(data)
    if kind == "logistic":
        y_mean, y_scale = 0.0, 1.0
    else:
        y_mean, y_scale = float(data.y.mean()), float(data.y.std())
        if not y_scale > 0:
            raise DataError("target column is constant")
    ys = (data.y - y_mean) / y_scale
    sdata = Dataset(sdata.X, ys, data.columns)
    f = cfg["features"]
    sigma_w = float(f["signal_sd"]) if f["signal_sd"] is not None else 1.0
    noise_var = float(f["noise_var"]) if f["noise_var"] is not None else 0.1
    if kind == "glm":
        ls = _lengthscales(cfg, sdata)
        model, fmap, trace = _fit_glm(cfg, tcfg, sdata.X, ys, ls, sigma_w, noise_var)
        model = replace(model, stats=glm.GlmSuffStats.empty(model.grid.b))
    elif kind == "logistic":
        ls = _lengthscales(cfg, sdata)
        model, fmap, trace = _fit_logistic(cfg, tcfg, sdata.X, ys, ls, sigma_w)
    else:
        if data.n < 2:
            raise DataError("need at least two training rows")
        model, fmap, trace = _fit_bnn(cfg, tcfg, sdata.X, ys, sigma_w, noise_var)
    fitted = Fitted(kind, cfg.tree, stdz, y_mean, y_scale, model, fmap,
                    trace.status, trace.final.iteration, float(trace.final.objective))
    return fitted, trace


def train(cfg: RunConfig):
    data = load_csv(cfg.train_path, cfg["data"]["target"])
    return fit_dataset(cfg, data)


# ---------------------------------------------------------------------------
# prediction


def _check_inputs(fitted: Fitted, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != fitted.input_dim:
        raise DataError(f"inputs have {X.shape[1]} columns, the model was trained "
                        f"on {fitted.input_dim}")
    return fitted.standardizer.transform(X)


def _weight_moments(q: MeanFieldDist, grid: SupportGrid):
    p = q.probs
    return (p * grid.values).sum(axis=1), (p * grid.values**2).sum(axis=1)


def _glm_moments(model: glm.GlmModel, phi):
    if not model.is_mixture:
        return glm.predict_mean(model, phi), glm.predict_variance(model, phi)
    qm = model.q
    mean = np.zeros(phi.shape[0])
    second = np.zeros(phi.shape[0])
    for a, lg in zip(qm.alpha, qm.component_logits):
        c = replace(model, q=MeanFieldDist(lg), anchor=None)
        m, v = glm.predict_mean(c, phi), glm.predict_variance(c, phi)
        mean += a * m
        second += a * (v + m**2)
    return mean, second - mean**2


def predict_moments(fitted: Fitted, X) -> dict[str, np.ndarray]:
    """Exact moments.  Regression: predictive ``mean`` and ``variance`` of
    y (noise included).  Logistic: ``logit_mean`` and ``logit_variance`` of
    ``phi . w`` under q."""
    Xs = _check_inputs(fitted, X)
    if fitted.kind == "bnn":
        mean, var = bnn_mod.predict_moments(fitted.model, Xs)
    else:
        phi = rff_features(fitted.fmap, Xs)
        if fitted.kind == "logistic":
            s, t = _weight_moments(fitted.q, fitted.grid)
            return {"logit_mean": phi @ s, "logit_variance": phi**2 @ (t - s**2)}
        mean, var = _glm_moments(fitted.model, phi)
    return {"mean": fitted.y_mean + fitted.y_scale * mean,
            "variance": fitted.y_scale**2 * var}


def predict_samples(fitted: Fitted, X, count: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Posterior draws.  Regression: ``count`` draws of the noise-free
    prediction per row (GLM draws use the integer path).  Logistic: a
    Monte-Carlo ``prob_y0`` with its standard error."""
    if count < 1:
        raise ConfigError("sample count must be at least 1", ["--samples: must be >= 1"])
    Xs = _check_inputs(fitted, X)
    rng = np.random.default_rng(seed)
    grid = fitted.grid
    if fitted.kind == "logistic":
        phi = rff_features(fitted.fmap, Xs)
        est = [logistic_mod.predict_class_prob(fitted.model, row, count, rng, True)
               for row in phi]
        return {"prob_y0": np.array([e[0] for e in est]),
                "stderr": np.array([e[1] for e in est])}
    idx = sample_indices(fitted.q, count, rng)
    if fitted.kind == "glm":
        phi = rff_features(fitted.fmap, Xs)
        wl = WeightLevels.from_grid(grid)
        draws = np.empty((phi.shape[0], count))
        for i, row in enumerate(phi):
            qphi, fq = quantize_features(row)
            draws[i] = integer_predict_many(qphi, idx, fq, wl)
    else:
        W = grid.values[np.arange(grid.b), idx]
        draws = np.stack([bnn_mod.network_output(fitted.model.arch, Xs, w) for w in W],
                         axis=1)
    draws = fitted.y_mean + fitted.y_scale * draws
    width = len(str(count))
    return {f"draw_{k + 1:0{width}d}": draws[:, k] for k in range(count)}


# ---------------------------------------------------------------------------
# artifact payloads


def _q_payload(q) -> dict:
    if isinstance(q, MixtureDist):
        return {"kind": "mixture", "mixture_logits": q.mixture_logits,
                "component_logits": q.component_logits}
    return {"kind": "mean-field", "logits": q.logits}


def _q_from(p: dict):
    if p["kind"] == "mixture":
        return MixtureDist(p["mixture_logits"], p["component_logits"])
    return MeanFieldDist(p["logits"])


def to_payload(fitted: Fitted) -> dict:
    m = fitted.model
    out = {
        "model_type": fitted.kind,
        "config": fitted.config,
        "standardizer": {"mean": fitted.standardizer.mean,
                         "scale": fitted.standardizer.scale},
        "target": {"mean": fitted.y_mean, "scale": fitted.y_scale},
        "grid": fitted.grid.values,
        "prior_logits": m.prior.logits,
        "q": _q_payload(m.q),
        "fit": {"status": fitted.status, "iterations": fitted.iterations,
                "objective": fitted.objective},
    }
    if fitted.fmap is not None:
        f = fitted.fmap
        out["features"] = {"frequencies": f.frequencies, "lengthscales": f.lengthscales,
                           "signal_sd": f.signal_sd, "b": f.b, "seed": f.seed}
    if fitted.kind in ("glm", "bnn"):
        n = m.noise
        out["noise"] = {"sigma2_values": n.sigma2_values, "p_sigma": n.p_sigma,
                        "q_sigma_logits": n.q_sigma_logits}
    if fitted.kind == "bnn":
        out["bnn"] = {"layers": list(m.arch.layer_widths), "input_dim": m.arch.input_dim}
    return out


def from_payload(p: dict) -> Fitted:
    try:
        kind = p["model_type"]
        stdz = Standardizer(np.asarray(p["standardizer"]["mean"], float),
                            np.asarray(p["standardizer"]["scale"], float))
        grid = SupportGrid(p["grid"])
        prior = MeanFieldDist(p["prior_logits"])
        q = _q_from(p["q"])
        fmap = None
        if "features" in p:
            f = p["features"]
            fmap = RffMap(f["frequencies"], f["lengthscales"], f["signal_sd"],
                          f["b"], f["seed"])
        noise = None
        if "noise" in p:
            nz = p["noise"]
            noise = glm.NoiseModel(nz["sigma2_values"], nz["p_sigma"], nz["q_sigma_logits"])
        if kind == "glm":
            model = glm.GlmModel(grid, q, prior, noise, glm.GlmSuffStats.empty(grid.b))
        elif kind == "logistic":
            model = logistic_mod.LogisticModel(grid, q, prior, np.zeros((0, grid.b)),
                                               np.zeros(0))
        elif kind == "bnn":
            arch = bnn_mod.BnnArch(tuple(p["bnn"]["layers"]), p["bnn"]["input_dim"])
            model = bnn_mod.BnnModel(arch, grid, q, prior, noise, None, None)
        else:
            raise DataError(f"unknown model type {kind!r}")
        fit = p["fit"]
        return Fitted(kind, p["config"], stdz, float(p["target"]["mean"]),
                      float(p["target"]["scale"]), model, fmap, fit["status"],
                      int(fit["iterations"]), float(fit["objective"]))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"malformed artifact: {e!r}") from None


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    rmse: float
    train_seconds: float
    expected_sparsity: float


def crossval(cfg: RunConfig, k: int, data: Optional[Dataset] = None) -> list[FoldResult]:
    """k-fold RMSE (original units), training time and expected sparsity."""
    if cfg["model"] == "logistic":
        raise ConfigError("cross-validation reports RMSE and needs a regression model",
                          ["model: crossval supports glm and bnn"])
    data = data if data is not None else load_csv(cfg.train_path, cfg["data"]["target"])
    out = []
    for i, (tr_idx, te_idx) in enumerate(kfold(data, k, cfg["seed"])):
        t0 = time.perf_counter()
        fitted, _ = fit_dataset(cfg, data.subset(tr_idx))
        secs = time.perf_counter() - t0
        test = data.subset(te_idx)
        pred = predict_moments(fitted, test.X)["mean"]
        rmse = math.sqrt(float(np.mean((pred - test.y) ** 2)))
        out.append(FoldResult(i, tr_idx.size, te_idx.size, rmse, secs,
                              expected_sparsity(fitted.q, fitted.grid)))
    return out


def crossval_summary(folds: list[FoldResult]) -> dict[str, float]:
    r = np.array([f.rmse for f in folds])
    return {"rmse_mean": float(r.mean()),
            "rmse_std": float(r.std(ddof=1)) if r.size > 1 else 0.0,
            "train_seconds_mean": float(np.mean([f.train_seconds for f in folds])),
            "expected_sparsity_mean": float(np.mean([f.expected_sparsity for f in folds]))}
