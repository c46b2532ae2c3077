"""
Run configuration: a YAML key-value tree merged over defaults, with
``DIRECT_SECTION__KEY=value`` environment overrides.

Schema (defaults shown)::

    model: glm                # glm | logistic | bnn
    seed: 0
    b: 2000                   # random Fourier features (glm, logistic)
    mbar: 15                  # weight levels per variable
    mbar_sigma: 15            # noise-variance levels (glm, bnn)
    variational:
      kind: mean-field        # mean-field | mixture (glm only)
      r: 5                    # mixture components
      entropy: bound          # bound | sgd
      mc_samples: 3000        # entropy samples per step when entropy = sgd
    optimizer:
      kind: quasi-newton      # quasi-newton | sgd
      max_iter: 1000
      tol: 1.0e-07
      lr: 0.1
      lr_decay: 0.0
      batch_size: 256         # logistic mini-batches under sgd
      memory: 10
      time_budget: null       # seconds
    features:
      lengthscales: null      # list, or null for the median heuristic
      signal_sd: null         # null: sd of the standardised target (1)
      noise_var: null         # null: 0.1 * variance of the standardised target
      max_rows: 1000          # rows used by the heuristic
    bnn:
      layers: [4, 1]          # widths; inputs are the standardised columns
    data:
      train: null             # CSV path, relative to the config file
      target: -1              # column name or index
    output:
      artifact: model.json
      trace: trace.csv
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .errors import ConfigError, DataError

ENV_PREFIX = "DIRECT_"
# environment variables with the prefix that are not config overrides
RESERVED_ENV = frozenset({"DIRECT_BENCH_BUDGET"})

DEFAULTS: dict[str, Any] = {
    "model": "glm",
    "seed": 0,
    "b": 2000,
    "mbar": 15,
    "mbar_sigma": 15,
    "variational": {"kind": "mean-field", "r": 5, "entropy": "bound",
                    "mc_samples": 3000},
    "optimizer": {"kind": "quasi-newton", "max_iter": 1000, "tol": 1e-7,
                  "lr": 0.1, "lr_decay": 0.0, "batch_size": 256, "memory": 10,
                  "time_budget": None},
    "features": {"lengthscales": None, "signal_sd": None, "noise_var": None,
                 "max_rows": 1000},
    "bnn": {"layers": [4, 1]},
    "data": {"train": None, "target": -1},
    "output": {"artifact": "model.json", "trace": "trace.csv"},
}

MODELS = ("glm", "logistic", "bnn")
VARIATIONAL = ("mean-field", "mixture")
ENTROPY = ("bound", "sgd")
OPTIMIZERS = ("quasi-newton", "sgd")


def _merge(base: dict, over: Mapping, path: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            problems.append(f"{key}: unknown key")
        elif isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                problems.append(f"{key}: expected a mapping")
            else:
                out[k] = _merge(base[k], v, key + ".", problems)
        else:
            out[k] = v
    return out


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    """``DIRECT_OPTIMIZER__MAX_ITER=50`` becomes ``{"optimizer": {"max_iter": 50}}``;
    values are parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX) or name in RESERVED_ENV:
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                break
        else:
            node[parts[-1]] = yaml.safe_load(environ[name])
    return tree


def default_tree(environ: Optional[Mapping[str, str]] = None) -> dict:
    """Defaults with environment overrides applied, unvalidated."""
    problems: list[str] = []
    tree = _merge(DEFAULTS, env_overrides(environ), "", problems)
    if problems:
        raise ConfigError("invalid environment overrides", problems)
    return tree


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(t: dict) -> list[str]:
    p = []

    def choice(key, val, options):
        if val not in options:
            p.append(f"{key}: {val!r} is not one of {', '.join(options)}")

    def pos_int(key, val, lo=1):
        if not _is_int(val) or val < lo:
            p.append(f"{key}: must be an integer >= {lo}, got {val!r}")

    def pos_num(key, val, allow_zero=False, allow_none=False):
        if val is None and allow_none:
            return
        if not _is_num(val) or val < 0 or (val == 0 and not allow_zero):
            p.append(f"{key}: must be a {'non-negative' if allow_zero else 'positive'} "
                     f"number, got {val!r}")

    choice("model", t["model"], MODELS)
    pos_int("seed", t["seed"], 0)
    pos_int("b", t["b"], 2)
    if _is_int(t["b"]) and t["b"] % 2:
        p.append(f"b: must be even (paired cos/sin features), got {t['b']}")
    pos_int("mbar", t["mbar"], 2)
    if _is_int(t["mbar"]) and t["mbar"] > 65535:
        p.append("mbar: must fit in 16 bits")
    pos_int("mbar_sigma", t["mbar_sigma"], 2)

    v = t["variational"]
    choice("variational.kind", v["kind"], VARIATIONAL)
    pos_int("variational.r", v["r"])
    choice("variational.entropy", v["entropy"], ENTROPY)
    pos_int("variational.mc_samples", v["mc_samples"], 2)
    if v["kind"] == "mixture" and t["model"] != "glm":
        p.append(f"variational.kind: mixture is only supported for model glm, "
                 f"not {t['model']!r}")

    o = t["optimizer"]
    choice("optimizer.kind", o["kind"], OPTIMIZERS)
    pos_int("optimizer.max_iter", o["max_iter"])
    pos_num("optimizer.tol", o["tol"])
    pos_num("optimizer.lr", o["lr"])
    pos_num("optimizer.lr_decay", o["lr_decay"], allow_zero=True)
    pos_int("optimizer.batch_size", o["batch_size"])
    pos_int("optimizer.memory", o["memory"])
    pos_num("optimizer.time_budget", o["time_budget"], allow_none=True)
    if (v["kind"] == "mixture" and v["entropy"] == "sgd") != (o["kind"] == "sgd") \
            and t["model"] == "glm":
        p.append("optimizer.kind: sgd goes with a mixture using entropy sgd, "
                 "quasi-newton with every exact objective")
    if t["model"] == "bnn" and o["kind"] == "sgd":
        p.append("optimizer.kind: the bnn objective is exact; use quasi-newton")

    f = t["features"]
    ls = f["lengthscales"]
    if ls is not None and (not isinstance(ls, list) or not ls
                           or not all(_is_num(x) and x > 0 for x in ls)):
        p.append(f"features.lengthscales: must be null or a list of positive numbers, "
                 f"got {ls!r}")
    pos_num("features.signal_sd", f["signal_sd"], allow_none=True)
    pos_num("features.noise_var", f["noise_var"], allow_none=True)
    pos_int("features.max_rows", f["max_rows"], 2)

    layers = t["bnn"]["layers"]
    if (not isinstance(layers, list) or not layers
            or not all(_is_int(w) and w >= 1 for w in layers) or layers[-1] != 1):
        p.append(f"bnn.layers: must be a list of positive widths ending in 1, "
                 f"got {layers!r}")

    d = t["data"]
    if d["train"] is None:
        p.append("data.train: required")
    elif not isinstance(d["train"], str):
        p.append("data.train: must be a path")
    if not (_is_int(d["target"]) or isinstance(d["target"], str)):
        p.append("data.target: must be a column name or index")
    for k in ("artifact", "trace"):
        if not isinstance(t["output"][k], str) or not t["output"][k]:
            p.append(f"output.{k}: must be a path")
    return p


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration tree plus the directory relative paths use."""

    tree: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key):
        return self.tree[key]

    def path(self, section: str, key: str) -> Path:
        p = Path(os.path.expanduser(self.tree[section][key]))
        return p if p.is_absolute() else self.base_dir / p

    @property
    def train_path(self) -> Path:
        return self.path("data", "train")

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False)

    def replace(self, **updates) -> RunConfig:
        """Copy with top-level or dotted-key updates, revalidated."""
        tree = copy.deepcopy(self.tree)
        for k, v in updates.items():
            node = tree
            *head, last = k.split(".")
            for h in head:
                node = node[h]
            node[last] = v
        return from_tree(tree, self.base_dir, environ={})


def from_tree(tree: Mapping, base_dir=None, environ=None,
              check_paths: bool = True) -> RunConfig:
    problems: list[str] = []
    merged = _merge(DEFAULTS, tree or {}, "", problems)
    merged = _merge(merged, env_overrides(environ), "", problems)
    problems += _validate(merged)
    if problems:
        raise ConfigError("invalid configuration", problems)
    cfg = RunConfig(merged, Path(base_dir) if base_dir is not None else Path.cwd())
    if check_paths and not cfg.train_path.is_file():
        raise DataError(f"training data not found: {cfg.train_path}")
    return cfg


def load_config(path, environ: Optional[Mapping[str, str]] = None,
                check_paths: bool = True) -> RunConfig:
    """Read, merge over defaults, apply environment overrides and validate.

    Every invalid key is reported in one :class:`ConfigError`; a missing
    training file raises :class:`DataError`.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", [f"{path}: missing"])
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML", [str(e)]) from None
    if tree is not None and not isinstance(tree, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping",
                          ["<root>: expected a mapping"])
    return from_tree(tree or {}, path.resolve().parent, environ, check_paths)
