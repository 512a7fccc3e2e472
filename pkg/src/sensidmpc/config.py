"""Scenario configuration files.

A scenario is a YAML document with the sections ``system``, ``horizon``,
``algorithm``, ``terminal``, ``simulation`` and ``output``.  Missing keys are
filled from :data:`DEFAULTS`, which describe the coupled oscillator
benchmark.  Errors name the offending key and, when the value came from a
file, its line.
"""
import copy
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .models import BUILTINS, builtin_network
from .ocp import SolverConfig
from .sensi import MODES, AlgorithmConfig

DEFAULTS = {
    "system": {"builtin": "coupled-vdp", "params": {}},
    "horizon": {"T": 3.0, "dt": 0.05, "n_disc": 21},
    "algorithm": {
        "mode": "criterion",
        "d": 0.1,
        "q_max": 100,
        "damping": 0.0,
        "inner": {"tol_u": 1e-6, "max_iter": 100},
    },
    "terminal": {"gamma": 1.2, "beta": "auto", "ingredients_file": None},
    "simulation": {
        "t_final": 6.0,
        "x0": [[0.7, 0.0], [0.28, 0.0], [-0.61, 0.0]],
        "oracle": False,
        "seed": 0,
    },
    "output": {"dir": "out", "emit": ["trace", "convergence", "comm"]},
}

EMITTABLE = ("trace", "convergence", "comm")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-6`` style numbers as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _load(text):
    return yaml.load(text, Loader=_Loader)
SYSTEM_PARAMS = {"coupled-vdp": ("u_max",), "scalar-coupled": ("mu", "eps", "q", "r", "u_max")}


@dataclass
class ScenarioConfig:
    """Validated scenario; ``raw`` keeps the merged nested mapping."""

    raw: dict
    source: object = None

    # convenience accessors -------------------------------------------------
    @property
    def system(self):
        return self.raw["system"]

    @property
    def terminal(self):
        return self.raw["terminal"]

    @property
    def simulation(self):
        return self.raw["simulation"]

    @property
    def output(self):
        return self.raw["output"]

    @property
    def seed(self):
        return int(self.simulation["seed"])

    @property
    def x0(self):
        return np.concatenate([np.atleast_1d(np.asarray(v, float)) for v in self.simulation["x0"]])

    def algorithm(self):
        a, h = self.raw["algorithm"], self.raw["horizon"]
        inner = SolverConfig(max_iter=int(a["inner"]["max_iter"]), tol_u=float(a["inner"]["tol_u"]))
        return AlgorithmConfig(T=float(h["T"]), n_disc=int(h["n_disc"]), dt=float(h["dt"]),
                               mode=a["mode"], d=float(a["d"]), q_max=int(a["q_max"]),
                               damping=float(a["damping"]), inner=inner)

    def network(self, P=None):
        return builtin_network(self.system["builtin"], self.system.get("params") or {}, P)

    def step_count(self):
        return int(round(float(self.simulation["t_final"]) / float(self.raw["horizon"]["dt"])))


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _key_lines(text):
    """Map dotted key paths of a YAML document to 1-based line numbers."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


def parse_override(item):
    """Split ``key.path=value`` and parse the value as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    try:
        parsed = _load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key!r}: cannot parse value {value!r}") from exc
    node = parsed
    for part in reversed(key.strip().split(".")):
        node = {part: node}
    return node


def _check(cond, key, message, lines):
    if not cond:
        line = lines.get(key)
        where = f"{key!r}" + (f" (line {line})" if line else "")
        raise ConfigError(f"{where}: {message}")


def validate(raw, lines=None, base_dir=None):
    """Check a merged mapping and return it; raises :class:`ConfigError`."""
    lines = lines or {}
    sys_, hor, alg = raw["system"], raw["horizon"], raw["algorithm"]
    term, sim, out = raw["terminal"], raw["simulation"], raw["output"]
    _check(sys_["builtin"] in BUILTINS, "system.builtin", f"choose from {sorted(BUILTINS)}", lines)
    params = sys_.get("params") or {}
    _check(isinstance(params, dict), "system.params", "must be a mapping", lines)
    for key in params:
        _check(key in SYSTEM_PARAMS[sys_["builtin"]], f"system.params.{key}",
               f"not a parameter of {sys_['builtin']}", lines)
    try:
        T, dt, n_disc = float(hor["T"]), float(hor["dt"]), hor["n_disc"]
    except (TypeError, ValueError):
        raise ConfigError("horizon values must be numbers") from None
    _check(T > 0, "horizon.T", "must be positive", lines)
    _check(0 < dt < T, "horizon.dt", "must satisfy 0 < dt < T", lines)
    _check(isinstance(n_disc, int) and n_disc >= 2, "horizon.n_disc", "must be an integer >= 2", lines)
    _check(alg["mode"] in MODES, "algorithm.mode", f"choose from {MODES}", lines)
    _check(alg["mode"] == "fixed" or float(alg["d"]) > 0, "algorithm.d",
           "must be positive unless mode is fixed", lines)
    _check(isinstance(alg["q_max"], int) and alg["q_max"] >= 1, "algorithm.q_max",
           "must be a positive integer", lines)
    _check(0 <= float(alg["damping"]) < 1, "algorithm.damping", "must lie in [0, 1)", lines)
    _check(float(alg["inner"]["tol_u"]) > 0, "algorithm.inner.tol_u", "must be positive", lines)
    _check(isinstance(alg["inner"]["max_iter"], int) and alg["inner"]["max_iter"] >= 1,
           "algorithm.inner.max_iter", "must be a positive integer", lines)
    _check(float(term["gamma"]) > 1, "terminal.gamma", "must exceed 1", lines)
    beta = term["beta"]
    _check(beta == "auto" or (isinstance(beta, (int, float)) and beta > 0), "terminal.beta",
           "must be 'auto' or a positive number", lines)
    if term["ingredients_file"] is not None:
        path = Path(term["ingredients_file"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        _check(path.is_file(), "terminal.ingredients_file", f"file {str(path)!r} does not exist", lines)
        term["ingredients_file"] = str(path)
    _check(float(sim["t_final"]) >= 0, "simulation.t_final", "must be non-negative", lines)
    _check(isinstance(sim["oracle"], bool), "simulation.oracle", "must be true or false", lines)
    _check(isinstance(sim["seed"], int), "simulation.seed", "must be an integer", lines)
    try:
        x0 = [np.atleast_1d(np.asarray(v, float)) for v in sim["x0"]]
    except (TypeError, ValueError):
        raise ConfigError("'simulation.x0' must be a list of per-agent vectors") from None
    _check(all(np.all(np.isfinite(v)) for v in x0), "simulation.x0", "must be finite", lines)
    emit = out["emit"]
    _check(isinstance(emit, list) and all(e in EMITTABLE for e in emit), "output.emit",
           f"must be a list drawn from {EMITTABLE}", lines)
    try:
        net = builtin_network(sys_["builtin"], params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'system.params': {exc}") from exc
    _check(len(x0) == net.agent_count and all(v.size == n for v, n in zip(x0, net.state_dims)),
           "simulation.x0", f"expected {net.agent_count} agents with dimensions {list(net.state_dims)}",
           lines)
    return raw


def load_config(path=None, overrides=(), text=None):
    """Read, merge with defaults, apply ``key=value`` overrides and validate."""
    base_dir = None
    lines = {}
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} does not exist")
        text = path.read_text()
        base_dir = path.parent
    if text is not None:
        try:
            data = _load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping at top level")
        lines = _key_lines(text)
    raw = _merge(DEFAULTS, data)
    for item in overrides:
        raw = _merge(DEFAULTS, _deep_update(raw, parse_override(item)))
    return ScenarioConfig(validate(raw, lines, base_dir), path)


def _deep_update(base, update):
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "params":
            out[key] = _deep_update(out[key], value)
        elif isinstance(value, dict) and key == "params" and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out
