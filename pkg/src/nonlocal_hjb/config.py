"""Flat ``section.key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Lists are comma separated
and matrices use ``;`` between rows.  Later sources win: built-in
defaults, then problem defaults, then the file, then ``--set`` overrides.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

PROBLEMS = ("linear-manufactured", "nonlinear-manufactured", "lq-scalar", "exp-utility",
            "power-utility", "fk-verify", "norms")
SOLVER_MODES = ("causal", "picard", "lambda", "continuation")


def _positive(x):
    return x > 0


def _u64(x):
    return 0 <= x < 2**64


# key -> (kind, default, validator, message)
SCHEMA = {
    "run.problem": ("choice", None, PROBLEMS, "unknown problem"),
    "run.output_dir": ("str", "out", None, ""),
    "run.figures": ("bool", True, None, ""),
    "grid.T": ("float", 1.0, _positive, "must be positive"),
    "grid.N": ("int", 32, lambda n: n >= 2, "must be at least 2"),
    "grid.y_min": ("float", -math.pi, None, ""),
    "grid.y_max": ("float", math.pi, None, ""),
    "grid.M": ("int", 65, lambda n: n >= 5, "must be at least 5"),
    "grid.d": ("int", 1, lambda n: n == 1, "only d = 1 is supported"),
    "solver.mode": ("choice", "causal", SOLVER_MODES, "unknown solver mode"),
    "solver.tol": ("float", 1e-8, _positive, "must be positive"),
    "solver.max_iter": ("int", 50, lambda n: n >= 1, "must be at least 1"),
    "solver.damping": ("float", 1.0, lambda w: 0 < w <= 1, "must lie in (0, 1]"),
    "solver.theta": ("float", 1.0, lambda th: 0.5 <= th <= 1, "must lie in [0.5, 1]"),
    "solver.stage_length": ("float", 0.0, lambda x: x >= 0, "must be nonnegative"),
    "solver.diagonal": ("choice", "implicit", ("implicit", "lagged"), "unknown diagonal treatment"),
    "mc.n_paths": ("int", 10_000, lambda n: n >= 100, "must be at least 100"),
    "mc.n_steps": ("int", 200, lambda n: n >= 10, "must be at least 10"),
    "mc.seed": ("int", 0, _u64, "must be an unsigned 64-bit integer"),
}

# model keys per problem: key -> (kind, default)
MODEL_KEYS = {
    "linear-manufactured": {"B": ("float", 1.0)},
    "nonlinear-manufactured": {"eps": ("float", 0.2), "kappa": ("float", 0.3), "nu": ("float", 0.1)},
    "lq-scalar": {"A1": ("float", 2.0), "A2": ("float", 0.5), "B1": ("float", 0.0), "B2": ("float", 1.0),
                  "C1": ("float", 0.0), "C2": ("float", 4.0), "tic": ("float", 1.0)},
    "exp-utility": {"mu": ("list", [0.08]), "sigma": ("list", [0.2]), "r": ("float", 0.02),
                    "eta": ("float", 1.0), "R": ("matrix", [[0.1]]), "Tvec": ("list", [1.0])},
    "power-utility": {"mu": ("list", [0.08]), "sigma": ("list", [0.2]), "r": ("float", 0.02),
                      "beta": ("float", 0.5), "v": ("matrix", [[1.0]]), "w": ("matrix", [[0.0]]),
                      "g": ("list", [1.0]), "n_nodes": ("int", 201), "delta": ("float", 0.0)},
    "fk-verify": {"y0": ("float", 0.3), "t": ("float", 0.0), "perturb": ("float", 0.1),
                  "quad_M": ("int", 49)},
    "norms": {"alpha": ("float", 0.5), "rho0": ("float", 1.0), "S": ("float", 0.1)},
}

PROBLEM_DEFAULTS = {
    "linear-manufactured": {"grid.N": 32, "grid.M": 65},
    "nonlinear-manufactured": {"grid.T": 0.25, "grid.N": 8, "grid.M": 33, "solver.mode": "picard"},
    "lq-scalar": {"grid.T": 0.25, "grid.N": 16, "grid.y_min": -3.0, "grid.y_max": 3.0, "grid.M": 61},
    "exp-utility": {"grid.N": 64, "grid.y_min": -6.5, "grid.y_max": 6.5, "grid.M": 201},
    "power-utility": {"grid.N": 64, "grid.y_min": 0.1, "grid.y_max": 4.0, "grid.M": 40,
                      "solver.tol": 1e-12, "solver.max_iter": 200},
    "fk-verify": {"grid.N": 50, "grid.y_min": -6.0, "grid.y_max": 6.0, "grid.M": 481},
    "norms": {"grid.N": 8, "grid.y_min": -4.0, "grid.y_max": 4.0, "grid.M": 81},
}


@dataclass
class RunConfig:
    problem: str
    values: dict
    model: dict
    sources: dict = field(default_factory=dict)     # key -> "default" | "file:LINE" | "set"

    def __getitem__(self, key):
        return self.values[key]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["run.output_dir"])

    @property
    def box(self):
        return (self.values["grid.y_min"], self.values["grid.y_max"])

    def items(self):
        out = [(k, self.values[k]) for k in sorted(self.values)]
        out += [(f"model.{k}", self.model[k]) for k in sorted(self.model)]
        return out


def _convert(kind, raw, key, line=None):
    raw = raw.strip()
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            v = float(raw)
            if v != int(v):
                raise ValueError
            return int(v)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "list":
            return [float(x) for x in raw.split(",") if x.strip()]
        if kind == "matrix":
            return [[float(x) for x in row.split(",") if x.strip()] for row in raw.split(";") if row.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {kind} for {key}", line, key) from None


def parse_text(text: str, origin: str = "config"):
    """Raw (key, value, line) triples from config text."""
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{n}: expected 'section.key = value'", n)
        key, val = (part.strip() for part in body.split("=", 1))
        if "." not in key or not all(key.split(".")):
            raise ConfigError(f"{origin}:{n}: malformed key {key!r}", n, key)
        out.append((key, val, n))
    return out


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value", None, item)
    key, val = (p.strip() for p in item.split("=", 1))
    return key, val


def parse_config(path=None, overrides=(), problem=None) -> RunConfig:
    """Build a validated RunConfig from an optional file plus overrides."""
    entries = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        entries = [(k, v, f"file:{n}", n) for k, v, n in parse_text(p.read_text(encoding="utf-8"), str(p))]
    entries += [(k, v, "set", None) for k, v in map(_parse_override, overrides)]

    chosen = problem
    for k, v, src, n in entries:
        if k == "run.problem" and problem is None:
            chosen = v.strip()
    if chosen is None:
        raise ConfigError("no problem given (run.problem)", None, "run.problem")
    if chosen not in PROBLEMS:
        raise ConfigError(f"unknown problem {chosen!r}; choose from {', '.join(PROBLEMS)}", None, "run.problem")

    values = {k: spec[1] for k, spec in SCHEMA.items()}
    sources = {k: "default" for k in values}
    values.update(PROBLEM_DEFAULTS[chosen])
    model_schema = MODEL_KEYS[chosen]
    model = {k: v[1] for k, v in model_schema.items()}
    for k, v, src, n in entries:
        if k.startswith("model."):
            name = k[len("model."):]
            if name not in model_schema:
                raise ConfigError(f"unknown key {k} for problem {chosen}", n, k)
            model[name] = _convert(model_schema[name][0], v, k, n)
        elif k in SCHEMA:
            kind = SCHEMA[k][0]
            values[k] = v.strip() if kind == "choice" else _convert(kind, v, k, n)
        else:
            raise ConfigError(f"unknown key {k}" + (f" (line {n})" if n else ""), n, k)
        sources[k] = src
    values["run.problem"] = chosen

    for k, (kind, _, check, msg) in SCHEMA.items():
        val = values[k]
        if kind == "choice" and val not in check:
            raise ConfigError(f"{k}: {msg} {val!r}", None, k)
        if kind in ("float", "int") and check is not None and not check(val):
            raise ConfigError(f"{k} = {val}: {msg}", None, k)
    if not values["grid.y_min"] < values["grid.y_max"]:
        raise ConfigError("grid.y_min must be below grid.y_max", None, "grid.y_min")
    _validate_model(chosen, model)
    return RunConfig(chosen, values, model, sources)


def _validate_model(problem, model):
    if problem in ("exp-utility", "power-utility"):
        m = len(model["mu"])
        if len(model["sigma"]) != m:
            raise ConfigError("model.sigma needs one entry per player", None, "model.sigma")
        if any(s <= 0 for s in model["sigma"]):
            raise ConfigError("model.sigma must be positive", None, "model.sigma")
        for key in ("R",) if problem == "exp-utility" else ("v", "w"):
            mat = model[key]
            if len(mat) != m or any(len(row) != m for row in mat):
                raise ConfigError(f"model.{key} must be {m}x{m}", None, f"model.{key}")
        vec = "Tvec" if problem == "exp-utility" else "g"
        if len(model[vec]) != m or any(x <= 0 for x in model[vec]):
            raise ConfigError(f"model.{vec} needs {m} positive entries", None, f"model.{vec}")
        if problem == "exp-utility" and model["eta"] <= 0:
            raise ConfigError("model.eta must be positive", None, "model.eta")
        if problem == "power-utility" and not 0 < model["beta"] < 1:
            raise ConfigError("model.beta must lie in (0, 1)", None, "model.beta")
    if problem == "norms" and not 0 < model["alpha"] < 1:
        raise ConfigError("model.alpha must lie in (0, 1)", None, "model.alpha")
