"""Factories for the example flows and a negative control."""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidHorizon, InvalidInput, InvalidParameter
from .space import DynamicSpace, make_grid_space


def _frozen_weight(base: DynamicSpace, t: float):
    f0 = base.weight(t).copy()
    coords = base.coords.copy()

    def weight(_t, x):
        return np.interp(x, coords, f0)

    return weight


def _zero_pair(r, x, y):
    return np.zeros(np.broadcast(x, y).shape)


def _zero_local(r, x):
    return np.zeros(np.shape(x))


def static_space(base: DynamicSpace) -> DynamicSpace:
    """Freeze ``base`` at its reference time: constant metric and weight."""
    return base.replace(
        weight_fn=_frozen_weight(base, base.t0),
        log_derivative=_zero_pair,
        local_log_derivative=_zero_local,
        weight_rate=None,
        log_derivative_integral=None,
        local_log_derivative_integral=None,
        static_weight=True,
        static_metric=True,
        h_bound=0.0,
        name=f"static({base.name})",
    )


def flat_grid(R: float = 1.0, n: int = 101, horizon=(0.0, 1.0)) -> DynamicSpace:
    return make_grid_space((-R, R), n, horizon=horizon, name="flat")


def gaussian_base(R: float = 4.0, n: int = 200, curvature: float = 1.0, horizon=(0.0, 1.0)) -> DynamicSpace:
    """Static grid weighted by ``exp(-curvature * x^2 / 2)``."""
    k = float(curvature)

    def weight(t, x):
        return 0.5 * k * np.asarray(x, dtype=float) ** 2

    return make_grid_space(
        (-R, R), n, weight, horizon=horizon, static_weight=True, name="gaussian-base",
        meta={"curvature": k},
    )


def wandering_gaussian(
    alpha_fn=lambda t: 1.0 + 0.5 * t,
    beta_fn=math.sin,
    gamma_fn=lambda t: 0.0,
    R: float = 4.0,
    n: int = 201,
    horizon=(0.0, 1.0),
) -> DynamicSpace:
    """Grid on ``[-R, R]`` with ``f_t(x) = (x alpha_t)^2 + x beta_t + gamma_t`` and static metric."""

    def weight(t, x):
        x = np.asarray(x, dtype=float)
        return (x * alpha_fn(t)) ** 2 + x * beta_fn(t) + gamma_fn(t)

    return make_grid_space((-R, R), n, weight, horizon=horizon, h_bound=0.0,
                           name="wandering-gaussian", meta={"R": R})


def homothetic(base: DynamicSpace, K: float, eps: float = 1e-3) -> DynamicSpace:
    """Scale the static ``base`` metric by ``sqrt(1 - 2Kt)``, keeping the measure.

    The horizon is trimmed so that ``1 - 2Kt >= eps`` throughout.
    """
    if not (base.static_metric and base.static_weight):
        raise InvalidInput("homothetic flows need a static base space")
    if K == 0:
        return static_space(base)
    K = float(K)
    lo, hi = base.horizon
    if K > 0:
        hi = min(hi, (1.0 - eps) / (2.0 * K))
    else:
        lo = max(lo, (1.0 - eps) / (2.0 * K))
    if not lo < hi:
        raise InvalidHorizon(f"no admissible times with 1 - 2Kt >= {eps} in {base.horizon}")
    if not lo <= base.t0 <= hi:
        raise InvalidHorizon("reference time falls outside the trimmed horizon")

    def rate(r, *xs):
        return np.full(np.broadcast(*xs).shape, -K / (1.0 - 2.0 * K * r))

    def integral(s, t, *xs):
        val = 0.5 * math.log((1.0 - 2.0 * K * t) / (1.0 - 2.0 * K * s))
        return np.full(np.broadcast(*xs).shape, val)

    h_bound = max(abs(K) / (1.0 - 2.0 * K * r) for r in (lo, hi))
    return base.replace(
        log_derivative=rate,
        local_log_derivative=rate,
        log_derivative_integral=integral,
        local_log_derivative_integral=integral,
        static_metric=False,
        horizon=(lo, hi),
        h_bound=h_bound,
        name=f"homothetic({base.name}, K={K:g})",
        meta={**base.meta, "K": K},
    )


def violating_flow(R: float = 2.0, n: int = 201, c: float = 1.0, horizon=(0.0, 1.0)) -> DynamicSpace:
    """Static metric with concave weight ``f = -c x^2``: negative Bakry-Emery curvature."""
    if c <= 0:
        raise InvalidParameter("c must be positive")

    def weight(t, x):
        return -c * np.asarray(x, dtype=float) ** 2

    return make_grid_space((-R, R), n, weight, horizon=horizon, static_weight=True,
                           name="violating", meta={"c": c})


def constant_rate(base: DynamicSpace, c: float) -> DynamicSpace:
    """Metric ``d_t = d exp(c (t - t0))`` on a static base."""
    c = float(c)
    t0 = base.t0

    def rate(r, *xs):
        return np.full(np.broadcast(*xs).shape, c)

    def integral(s, t, *xs):
        return np.full(np.broadcast(*xs).shape, c * (t - s))

    return base.replace(
        log_derivative=rate,
        local_log_derivative=rate,
        log_derivative_integral=integral,
        local_log_derivative_integral=integral,
        static_metric=False,
        h_bound=abs(c),
        name=f"constant-rate({base.name}, c={c:g}, t0={t0:g})",
    )


def two_point_space(horizon=(0.0, 1.0)) -> DynamicSpace:
    return make_grid_space((0.0, 1.0), 2, horizon=horizon, name="two-point")


EXAMPLES = {
    "two-point": two_point_space,
    "flat": flat_grid,
    "gaussian-base": gaussian_base,
    "wandering-gaussian": wandering_gaussian,
    "violating": violating_flow,
}


def build_example(name: str, **params) -> DynamicSpace:
    """Build a named example; ``homothetic`` and ``static`` wrap a ``base`` spec."""
    if name == "homothetic":
        base = build_example(params.pop("base", "gaussian-base"), **params.pop("base_params", {}))
        return homothetic(base, **params)
    if name == "static":
        base = build_example(params.pop("base", "flat"), **params.pop("base_params", {}))
        return static_space(base)
    if name not in EXAMPLES:
        raise InvalidInput(f"unknown example {name!r}; known: {sorted(EXAMPLES) + ['homothetic', 'static']}")
    return EXAMPLES[name](**params)


__all__ = [
    "static_space",
    "flat_grid",
    "gaussian_base",
    "wandering_gaussian",
    "homothetic",
    "violating_flow",
    "constant_rate",
    "two_point_space",
    "EXAMPLES",
    "build_example",
]
