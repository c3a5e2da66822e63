"""Run configuration: a TOML file with ``[space]``, ``[times]``, ``[checks]`` and ``[rng]`` tables."""

from __future__ import annotations

import math
import sys
from copy import deepcopy
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InvalidInput
from .examples import build_example
from .space import DynamicSpace, make_graph_space, make_grid_space

DEFAULTS = {
    "space": {
        "example": "wandering-gaussian",
        "params": {"R": 4.0, "n": 201},
    },
    "times": {
        "pairs": [[0.2, 0.6]],
        "steps": 64,
        "bochner_times": [0.5],
        "convexity_time": 0.5,
    },
    "checks": {
        "alphas": [0.5, 0.75, 1.0],
        "p_values": [1.0, 2.0, 4.0, "inf"],
        "trials": 100,
        "measure_pairs": 20,
        "measure_kind": "bump",
        "bochner_trials": 200,
        "tol_scale": 1.0,
        "transport_rel_tol": 1e-6,
        "boundary_width": 2,
        "da": 0.05,
        "dt_step": 0.001,
        "convexity_pairs": 5,
        "energy_L": "auto",
        "heat_vertices": 50,
        "n_paths": 10000,
        "level": 6,
        "kernel_steps": 8,
        "x": -0.5,
        "y": 0.5,
        "mode": "winf",
        "allowed_fraction": 0.01,
        "scaling_p": [2.0, 4.0],
        "export_paths": 100,
    },
    "rng": {"seed": 0},
}

TEMPLATE = """\
# srflab run configuration. Every value shown is the built-in default.

[space]
# A named example: two-point, flat, gaussian-base, wandering-gaussian,
# violating, homothetic, static. Parameters go in [space.params].
example = "wandering-gaussian"

[space.params]
R = 4.0
n = 201

# Inline alternative (remove `example`):
#   kind = "grid"                 # or "graph"
#   interval = [-1.0, 1.0]        # grid only
#   n = 101
#   horizon = [0.0, 1.0]
#   edges = [[0, 1, 1.0], [1, 2, 0.5]]   # graph only: i, j, length[, conductance]
#   [space.weight]                # f(t, x) sampled per vertex, linear in t
#   times = [0.0, 1.0]
#   values = [[...n values...], [...n values...]]
#   [space.log_rate]              # h_t shared by all pairs, linear in t
#   times = [0.0, 1.0]
#   values = [0.0, 0.0]

[times]
pairs = [[0.2, 0.6]]      # (s, t) pairs for gradient and transport checks
steps = 64                # implicit Euler steps per propagator
bochner_times = [0.5]
convexity_time = 0.5

[checks]
alphas = [0.5, 0.75, 1.0]
p_values = [1.0, 2.0, 4.0, "inf"]
trials = 100              # random fields per gradient check
measure_pairs = 20
measure_kind = "bump"     # or "dirac"
bochner_trials = 200
tol_scale = 1.0           # mesh tolerances are tol_scale * dx
transport_rel_tol = 1e-6
boundary_width = 2
da = 0.05
dt_step = 0.001
convexity_pairs = 5
energy_L = "auto"         # or a number
heat_vertices = 50
n_paths = 10000
level = 6                 # dyadic level of the coupling grid
kernel_steps = 8
x = -0.5                  # coupled start points (nearest vertices)
y = 0.5
mode = "winf"             # winf, wp or independent
allowed_fraction = 0.01
scaling_p = [2.0, 4.0]
export_paths = 100

[rng]
seed = 0
"""


def _merge(base: dict, extra: dict) -> dict:
    out = deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "params":
            out[key] = _merge(out[key], val)
        else:
            out[key] = deepcopy(val)
    return out


def load_config(path) -> dict:
    raw = {} if path is None else tomllib.loads(Path(path).read_text())
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise InvalidInput(f"unknown config sections: {sorted(unknown)}")
    if "space" in raw and "example" not in raw["space"] and "kind" in raw["space"]:
        cfg = _merge({k: v for k, v in DEFAULTS.items() if k != "space"}, {"space": {}})
        return _merge(cfg, raw)
    cfg = _merge(DEFAULTS, raw)
    if raw.get("space", {}).get("example", DEFAULTS["space"]["example"]) != DEFAULTS["space"]["example"]:
        # default parameters belong to the default example only
        cfg["space"]["params"] = deepcopy(raw["space"].get("params", {}))
    return cfg


def parse_p(p) -> float:
    if isinstance(p, str):
        if p.lower() in ("inf", "infinity"):
            return math.inf
        raise InvalidInput(f"bad exponent {p!r}")
    return float(p)


def _table(spec, name):
    times = np.asarray(spec["times"], dtype=float)
    values = np.asarray(spec["values"], dtype=float)
    if times.ndim != 1 or values.shape[0] != times.size or np.any(np.diff(times) <= 0):
        raise InvalidInput(f"[space.{name}] needs increasing times and one row of values per time")
    return times, values


def _weight_from_table(spec, n):
    times, values = _table(spec, "weight")
    if values.shape != (times.size, n):
        raise InvalidInput("[space.weight] values must have one entry per vertex")

    def weight(t, x):
        k = np.clip(np.searchsorted(times, t) - 1, 0, max(times.size - 2, 0))
        if times.size == 1:
            return values[0].copy()
        w = np.clip((t - times[k]) / (times[k + 1] - times[k]), 0.0, 1.0)
        return (1 - w) * values[k] + w * values[k + 1]

    static = bool(np.all(values == values[0]))
    return weight, static


def _rate_from_table(spec):
    times, values = _table(spec, "log_rate")

    def rate(r, *xs):
        return np.full(np.broadcast(*xs).shape, np.interp(r, times, values))

    return rate, bool(np.all(values == 0))


def build_space(cfg: dict, refine: int = 0) -> DynamicSpace:
    """Build the configured space, refined ``refine`` times by halving the grid spacing."""
    spec = cfg["space"]
    if "example" in spec:
        params = deepcopy(spec.get("params", {}))
        target = params
        if spec["example"] in ("homothetic", "static"):
            target = params.setdefault("base_params", {})
        if refine and "n" in target:
            target["n"] = (int(target["n"]) - 1) * 2**refine + 1
        elif refine:
            raise InvalidInput("refinement needs an explicit grid size n")
        return build_example(spec["example"], **params)
    kind = spec.get("kind", "grid")
    n = int(spec["n"])
    horizon = tuple(spec.get("horizon", (0.0, 1.0)))
    weight = rate = None
    static_w = static_m = True
    if kind == "grid":
        if refine:
            if "weight" in spec:
                raise InvalidInput("tabulated weights cannot be refined")
            n = (n - 1) * 2**refine + 1
    elif refine:
        raise InvalidInput("graph spaces cannot be refined")
    if "weight" in spec:
        weight, static_w = _weight_from_table(spec["weight"], n)
    if "log_rate" in spec:
        rate, static_m = _rate_from_table(spec["log_rate"])
    if kind == "grid":
        return make_grid_space(spec["interval"], n, weight, rate, rate, horizon=horizon,
                               static_weight=static_w, static_metric=static_m, name="config-grid")
    if kind == "graph":
        return make_graph_space(n, [tuple(e) for e in spec["edges"]], weight, rate, rate, horizon=horizon,
                                static_weight=static_w, static_metric=static_m, name="config-graph")
    raise InvalidInput(f"unknown space kind {kind!r}")
