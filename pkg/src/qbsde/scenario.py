"""Scenario configuration: JSON schema, defaults, validation and builtins.

A configuration is a JSON object.  Missing sections take the defaults in
:data:`DEFAULTS`; unknown keys and unknown family names are rejected with a
:class:`~qbsde.errors.ValidationError` naming the offending field.
"""

from __future__ import annotations

import copy
import json
import math
import os

import numpy as np

from .bsde import SolverOptions
from .errors import ValidationError
from .generator import affine_in_y, entropic_linear_y, pure_quadratic
from .paths import brownian, linear_sde, ornstein_uhlenbeck
from .regression import PolynomialBasis

__all__ = [
    "DEFAULTS",
    "STAGES",
    "ScenarioConfig",
    "BUILTINS",
    "list_builtin_scenarios",
    "builtin_config",
    "load_config",
]

STAGES = ("solve", "sandwich", "moments", "dual", "ladder", "partition", "pde")

DEFAULTS = {
    "name": "custom",
    "description": "",
    "seed": None,
    "horizon": 1.0,
    "x0": None,
    "generator": {"family": "pure-quadratic"},
    "terminal": {"family": "linear"},
    "sde": {"family": "brownian"},
    "grid": {"steps": 50, "paths": 65536},
    "basis": {"degree": 4, "ridge": 1e-10},
    "solver": {"z_clamp": None, "fixed_point_iterations": 10, "fixed_point_tol": 1e-10},
    "pipeline": ["solve", "sandwich", "dual"],
    "oracle": None,
    "controls": {"battery_size": 20, "constants": [-2.0, -1.0, 0.0, 1.0], "tolerance": 0.05,
                 "min_admissible": 0},
    "partition": {"p": 2.0, "epsilon": 1.0, "n_intervals": None},
    "ladder": {"n_list": [4, 8, 16]},
    "pde": {"time_nodes": 101, "space_nodes": 401, "radius": 6.0, "theta": 1.0,
            "points": [[0.0, 0.0]], "tolerance": 0.05, "r": 2.5, "alpha": 0.0, "alpha_prime": 0.1,
            "csv_time_stride": 10, "csv_space_stride": 10},
    "csv_paths": 32,
    "output_dir": None,
    "threads": 1,
}

# parameters of each family with their defaults
GENERATOR_FAMILIES = {
    "pure-quadratic": {"gamma": 1.0, "dim": 1},
    "entropic-with-linear-y": {"gamma": 1.0, "beta": 0.0, "alpha0": 0.0, "dim": 1},
    "affine-in-y": {"a": 0.0, "b": None, "c": 0.0, "gamma_bar": 1.0, "dim": 1},
}
TERMINAL_FAMILIES = {
    "linear": {"coef": None, "offset": 0.0},
    "square-norm": {"scale": 1.0, "offset": 0.0},
    "constant": {"value": 0.0},
    "sine": {"amplitude": 1.0, "frequency": 1.0},
    "positive-part": {"strike": 0.0},
}
SDE_FAMILIES = {
    "brownian": {"sigma": 1.0},
    "ornstein-uhlenbeck": {"kappa": 1.0, "theta": 0.0, "sigma": 1.0},
    "linear": {"A": None, "c": None, "sigma": None},
}


def _merge(defaults, given, where):
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ValidationError(f"{where}: expected an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ValidationError(f"{where}: unknown field(s) {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _family(section, families, where):
    if not isinstance(section, dict) or "family" not in section:
        raise ValidationError(f"{where}.family: missing")
    name = section["family"]
    if name not in families:
        raise ValidationError(f"{where}.family: unknown family {name!r} (known: {', '.join(sorted(families))})")
    params = {k: v for k, v in section.items() if k != "family"}
    merged = _merge(families[name], params, where)
    merged["family"] = name
    return merged


def _number(value, where, lo=-math.inf, hi=math.inf, integer=False, strict_lo=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ValidationError(f"{where}: expected an integer")
    if not math.isfinite(value) or value < lo or value > hi or (strict_lo and value == lo):
        raise ValidationError(f"{where}: {value} outside the allowed range")
    return int(value) if integer else float(value)


class ScenarioConfig:
    """A validated, fully resolved scenario."""

    def __init__(self, data):
        if not isinstance(data, dict):
            raise ValidationError("config: expected a JSON object")
        d = _merge(DEFAULTS, data, "config")
        for key in ("grid", "basis", "solver", "controls", "partition", "ladder", "pde"):
            d[key] = _merge(DEFAULTS[key], data.get(key), key)
        d["generator"] = _family(d["generator"], GENERATOR_FAMILIES, "generator")
        d["terminal"] = _family(d["terminal"], TERMINAL_FAMILIES, "terminal")
        d["sde"] = _family(d["sde"], SDE_FAMILIES, "sde")
        if d["seed"] is None:
            raise ValidationError("seed: required (no entropy is taken from the environment)")
        d["seed"] = _number(d["seed"], "seed", 0, 2**63 - 1, integer=True)
        d["horizon"] = _number(d["horizon"], "horizon", 0.0, strict_lo=True)
        d["threads"] = _number(d["threads"], "threads", 1, 256, integer=True)
        d["csv_paths"] = _number(d["csv_paths"], "csv_paths", 0, 2**20, integer=True)
        g = d["grid"]
        g["steps"] = _number(g["steps"], "grid.steps", 1, 100000, integer=True)
        g["paths"] = _number(g["paths"], "grid.paths", 16, 2**24, integer=True)
        b = d["basis"]
        b["degree"] = _number(b["degree"], "basis.degree", 1, 8, integer=True)
        b["ridge"] = _number(b["ridge"], "basis.ridge", 0.0, 1.0)
        s = d["solver"]
        if s["z_clamp"] is not None:
            s["z_clamp"] = _number(s["z_clamp"], "solver.z_clamp", 0.0, strict_lo=True)
        s["fixed_point_iterations"] = _number(s["fixed_point_iterations"], "solver.fixed_point_iterations",
                                              1, 10000, integer=True)
        s["fixed_point_tol"] = _number(s["fixed_point_tol"], "solver.fixed_point_tol", 0.0, 1.0, strict_lo=True)
        if not isinstance(d["pipeline"], list) or not d["pipeline"]:
            raise ValidationError("pipeline: expected a nonempty list of stages")
        for stage in d["pipeline"]:
            if stage not in STAGES:
                raise ValidationError(f"pipeline: unknown stage {stage!r} (known: {', '.join(STAGES)})")
        if "solve" not in d["pipeline"]:
            d["pipeline"] = ["solve"] + d["pipeline"]
        d["pipeline"] = [st for st in STAGES if st in d["pipeline"]]
        c = d["controls"]
        c["battery_size"] = _number(c["battery_size"], "controls.battery_size", 0, 1000, integer=True)
        c["constants"] = [_number(v, "controls.constants", -10, 10) for v in c["constants"]]
        c["tolerance"] = _number(c["tolerance"], "controls.tolerance", 0.0, strict_lo=True)
        c["min_admissible"] = _number(c["min_admissible"], "controls.min_admissible", 0, 1000, integer=True)
        p = d["partition"]
        p["p"] = _number(p["p"], "partition.p", 0.0, strict_lo=True)
        p["epsilon"] = _number(p["epsilon"], "partition.epsilon", 0.0, strict_lo=True)
        if p["n_intervals"] is not None:
            p["n_intervals"] = _number(p["n_intervals"], "partition.n_intervals", 1, g["steps"], integer=True)
        n_list = d["ladder"]["n_list"]
        if not isinstance(n_list, list) or not n_list:
            raise ValidationError("ladder.n_list: expected a nonempty list")
        d["ladder"]["n_list"] = [_number(v, "ladder.n_list", 1, 10**6, integer=True) for v in n_list]
        if any(b2 <= a2 for a2, b2 in zip(d["ladder"]["n_list"], d["ladder"]["n_list"][1:])):
            raise ValidationError("ladder.n_list: must be strictly increasing")
        pd = d["pde"]
        pd["time_nodes"] = _number(pd["time_nodes"], "pde.time_nodes", 2, 10**5, integer=True)
        pd["space_nodes"] = _number(pd["space_nodes"], "pde.space_nodes", 5, 10**5, integer=True)
        pd["radius"] = _number(pd["radius"], "pde.radius", 0.0, strict_lo=True)
        pd["theta"] = _number(pd["theta"], "pde.theta", 0.0, 1.0)
        pd["tolerance"] = _number(pd["tolerance"], "pde.tolerance", 0.0, strict_lo=True)
        for key in ("r", "alpha", "alpha_prime"):
            pd[key] = _number(pd[key], f"pde.{key}", 0.0)
        for key in ("csv_time_stride", "csv_space_stride"):
            pd[key] = _number(pd[key], f"pde.{key}", 1, 10**6, integer=True)
        if not isinstance(pd["points"], list) or any(not isinstance(q, list) or len(q) != 2 for q in pd["points"]):
            raise ValidationError("pde.points: expected a list of [t, x] pairs")
        pd["points"] = [[_number(q[0], "pde.points", 0.0, d["horizon"]), _number(q[1], "pde.points")]
                        for q in pd["points"]]
        if d["oracle"] is not None:
            d["oracle"] = _merge({"y0": None, "tolerance": 0.05}, d["oracle"], "oracle")
            d["oracle"]["y0"] = _number(d["oracle"]["y0"], "oracle.y0")
            d["oracle"]["tolerance"] = _number(d["oracle"]["tolerance"], "oracle.tolerance", 0.0, strict_lo=True)
        if d["output_dir"] is None:
            d["output_dir"] = os.path.join("qbsde-out", str(d["name"]))
        if not isinstance(d["output_dir"], str):
            raise ValidationError("output_dir: expected a string")
        self.data = d
        # build once so family parameters are validated eagerly
        self.generator()
        sde = self.sde()
        if d["x0"] is None:
            d["x0"] = [0.0] * sde.x_dim
        if not isinstance(d["x0"], list) or len(d["x0"]) != sde.x_dim:
            raise ValidationError(f"x0: expected a list of {sde.x_dim} numbers")
        d["x0"] = [_number(v, "x0") for v in d["x0"]]
        self.terminal()(np.zeros((2, sde.x_dim)))

    # -- accessors -----------------------------------------------------

    def __getitem__(self, key):
        return self.data[key]

    def to_dict(self):
        return copy.deepcopy(self.data)

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2)

    def with_overrides(self, **kw):
        """Copy with top-level or ``grid``/``seed`` overrides (``None`` values ignored).

        A ``steps`` override lowers an explicit ``partition.n_intervals`` to the
        largest divisor of the new step count not above it.
        """
        d = self.to_dict()
        for key, value in kw.items():
            if value is None:
                continue
            if key in ("paths", "steps"):
                d["grid"][key] = value
            else:
                d[key] = value
        n_int = d.get("partition", {}).get("n_intervals")
        if kw.get("steps") is not None and n_int:
            # keep an explicit partition valid on the new grid
            steps = int(kw["steps"])
            d["partition"]["n_intervals"] = max(k for k in range(1, min(n_int, steps) + 1) if steps % k == 0)
        return ScenarioConfig(d)

    @property
    def dim(self):
        return int(self.data["generator"]["dim"])

    def generator(self):
        g = self.data["generator"]
        fam = g["family"]
        dim = _number(g["dim"], "generator.dim", 1, 64, integer=True)
        if fam == "pure-quadratic":
            return pure_quadratic(_number(g["gamma"], "generator.gamma", 0.0, strict_lo=True), dim)
        if fam == "entropic-with-linear-y":
            return entropic_linear_y(_number(g["gamma"], "generator.gamma", 0.0, strict_lo=True),
                                     _number(g["beta"], "generator.beta"),
                                     _number(g["alpha0"], "generator.alpha0"), dim)
        bvec = [0.0] * dim if g["b"] is None else g["b"]
        if not isinstance(bvec, list) or len(bvec) != dim:
            raise ValidationError(f"generator.b: expected a list of {dim} numbers")
        return affine_in_y(_number(g["a"], "generator.a"), [_number(v, "generator.b") for v in bvec],
                           _number(g["c"], "generator.c"), dim,
                           _number(g["gamma_bar"], "generator.gamma_bar", 0.0, strict_lo=True))

    def sde(self):
        s = self.data["sde"]
        fam = s["family"]
        dim = self.dim
        if fam == "brownian":
            return brownian(dim, _number(s["sigma"], "sde.sigma"))
        if fam == "ornstein-uhlenbeck":
            return ornstein_uhlenbeck(_number(s["kappa"], "sde.kappa"), _number(s["theta"], "sde.theta"),
                                      _number(s["sigma"], "sde.sigma"), dim)
        try:
            A = np.asarray(s["A"] if s["A"] is not None else np.zeros((dim, dim)), dtype=float)
            c = np.asarray(s["c"] if s["c"] is not None else np.zeros(A.shape[0]), dtype=float)
            sig = np.asarray(s["sigma"] if s["sigma"] is not None else np.eye(A.shape[0], dim), dtype=float)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"sde: malformed matrix ({exc})") from None
        if A.ndim != 2 or A.shape[0] != A.shape[1] or c.shape != (A.shape[0],) or sig.shape != (A.shape[0], dim):
            raise ValidationError(f"sde: need A (n x n), c (n,), sigma (n x {dim})")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c)) and np.all(np.isfinite(sig))):
            raise ValidationError("sde: coefficients must be finite")
        return linear_sde(A, c, sig)

    def terminal(self):
        """Terminal function of the state ``X_T`` (shape ``(n, x_dim)`` to ``(n,)``)."""
        t = self.data["terminal"]
        fam = t["family"]
        if fam == "linear":
            coef = t["coef"]
            if coef is None:
                coef = [1.0] + [0.0] * (self.sde_dim - 1)
            coef = np.asarray([_number(v, "terminal.coef") for v in coef])
            if coef.size != self.sde_dim:
                raise ValidationError(f"terminal.coef: expected {self.sde_dim} numbers")
            off = _number(t["offset"], "terminal.offset")
            return lambda x: x @ coef + off
        if fam == "square-norm":
            scale = _number(t["scale"], "terminal.scale")
            off = _number(t["offset"], "terminal.offset")
            return lambda x: scale * np.sum(x * x, axis=1) + off
        if fam == "constant":
            value = _number(t["value"], "terminal.value")
            return lambda x: np.full(x.shape[0], value)
        if fam == "sine":
            amp = _number(t["amplitude"], "terminal.amplitude")
            freq = _number(t["frequency"], "terminal.frequency")
            return lambda x: amp * np.sin(freq * x[:, 0])
        strike = _number(t["strike"], "terminal.strike")
        return lambda x: np.maximum(x[:, 0] - strike, 0.0)

    @property
    def sde_dim(self):
        s = self.data["sde"]
        if s["family"] == "linear" and s["A"] is not None:
            return len(s["A"])
        return self.dim

    def basis(self):
        return PolynomialBasis(self.data["basis"]["degree"], self.data["basis"]["ridge"])

    def solver_options(self):
        return SolverOptions(**self.data["solver"])


BUILTINS = {
    "entropic-1d": {
        "description": "pure-quadratic driver (gamma=1), xi=W_1: Y_0=-1/2, duality certified by q*",
        "seed": 7,
        "generator": {"family": "pure-quadratic", "gamma": 1.0},
        "terminal": {"family": "linear", "coef": [1.0]},
        "pipeline": ["solve", "sandwich", "moments", "dual", "partition"],
        "partition": {"p": 1.5, "epsilon": 1.0, "n_intervals": 5},
        "controls": {"battery_size": 28, "min_admissible": 20},
        "oracle": {"y0": -0.5, "tolerance": 0.05},
    },
    "conditional-expectation": {
        "description": "zero driver, xi=|W_1|^2: Y_0 = E|W_1|^2 = 1",
        "seed": 11,
        "generator": {"family": "affine-in-y", "a": 0.0, "b": [0.0], "c": 0.0},
        "terminal": {"family": "square-norm"},
        "pipeline": ["solve", "sandwich", "dual"],
        "controls": {"battery_size": 0, "constants": [0.0]},
        "oracle": {"y0": 1.0, "tolerance": 0.03},
    },
    "linear-in-y": {
        "description": "driver g=y, xi=1: Y_0 = exp(-1)",
        "seed": 13,
        "generator": {"family": "affine-in-y", "a": 1.0, "b": [0.0], "c": 0.0},
        "terminal": {"family": "constant", "value": 1.0},
        "pipeline": ["solve", "sandwich", "dual"],
        "controls": {"battery_size": 0, "constants": [0.0]},
        "oracle": {"y0": 0.36787944117144233, "tolerance": 0.01},
    },
    "fk-crosscheck": {
        "description": "entropic scenario solved by finite differences, Cole-Hopf and regression Monte Carlo",
        "seed": 7,
        "generator": {"family": "pure-quadratic", "gamma": 1.0},
        "terminal": {"family": "linear", "coef": [1.0]},
        "pipeline": ["solve", "pde"],
        "pde": {"points": [[0.0, 0.0]]},
        "oracle": {"y0": -0.5, "tolerance": 0.05},
    },
    "ladder-gn": {
        "description": "Lipschitz approximants g_n of the entropic driver: Y^n_0 decreases to -1/2",
        "seed": 7,
        "generator": {"family": "pure-quadratic", "gamma": 1.0},
        "terminal": {"family": "linear", "coef": [1.0]},
        "pipeline": ["solve", "ladder"],
        "ladder": {"n_list": [1, 2, 4, 8, 16]},
        "oracle": {"y0": -0.5, "tolerance": 0.05},
    },
}


def list_builtin_scenarios():
    """``[(name, description), ...]`` in a fixed order."""
    return [(name, BUILTINS[name]["description"]) for name in BUILTINS]


def builtin_config(name):
    if name not in BUILTINS:
        raise ValidationError(f"unknown builtin scenario {name!r}")
    data = copy.deepcopy(BUILTINS[name])
    data["name"] = name
    return ScenarioConfig(data)


def load_config(source):
    """A builtin name, or a path to a JSON file."""
    if source in BUILTINS and not os.path.exists(source):
        return builtin_config(source)
    try:
        with open(source) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config: no such file or builtin scenario {source!r}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config: invalid JSON ({exc})") from None
    return ScenarioConfig(data)
