"""Backward Brownian motion on a dynamic space and its couplings.

A backward Brownian motion runs from a terminal time ``t`` down a
decreasing time grid; the transition from ``s_k`` to ``s_{k+1}`` is the row
of the heat propagator ``P_{s_k, s_{k+1}}`` at the current vertex.

Randomness is drawn from one stream per (seed, step) pair and indexed by
path, so every path is reproducible independently of how many paths are
sampled alongside it, and steps can be generated in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadInterval, InvalidGrid, InvalidInput, InvalidMeasure, InvalidParameter
from .heat import propagator_matrix
from .report import CheckReport
from .space import DynamicSpace, MeasureOnSpace, distance_at, masses_of
from .transport import MASS_TOL, TransportPlan, monotone_coupling, wasserstein_inf, wasserstein_p

MODES = ("winf", "wp", "independent")


@dataclass(frozen=True)
class PathEnsemble:
    """Sampled vertex paths; ``paths`` has shape ``(n_paths, K+1)`` or ``(n_paths, K+1, 2)`` when coupled."""

    times: np.ndarray
    paths: np.ndarray
    seed: int
    kernel_steps: int
    mode: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def coupled(self) -> bool:
        return self.paths.ndim == 3

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    def to_csv(self, path) -> None:
        n, k = self.paths.shape[:2]
        ids = np.repeat(np.arange(n), k)
        times = np.tile(self.times, n)
        cols = [ids, times]
        header = "path_id,time,vertex1"
        if self.coupled:
            cols += [self.paths[..., 0].ravel(), self.paths[..., 1].ravel()]
            header += ",vertex2"
        else:
            cols.append(self.paths.ravel())
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in zip(*cols):
                fh.write(f"{row[0]},{float(row[1])!r}," + ",".join(str(int(v)) for v in row[2:]) + "\n")


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def _check_times(space: DynamicSpace, times) -> np.ndarray:
    times = np.asarray(times, dtype=float).ravel()
    if times.size == 0:
        raise InvalidGrid("empty time grid")
    if np.any(np.diff(times) >= 0):
        raise InvalidGrid("times must be strictly decreasing")
    for s in (times[0], times[-1]):
        try:
            space.check_time(s)
        except ValueError as exc:
            raise InvalidGrid(str(exc)) from exc
    return times


def transition_matrix(space: DynamicSpace, s_hi: float, s_lo: float, steps: int = 8) -> np.ndarray:
    """Row-stochastic matrix of one backward transition ``s_hi -> s_lo``."""
    q = np.clip(propagator_matrix(space, s_lo, s_hi, steps).matrix, 0.0, None)
    return q / q.sum(axis=1, keepdims=True)


def _draw_rows(cdf: np.ndarray, states: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cdf[states] < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def sample_backward_bm(
    space: DynamicSpace, terminal, times, n_paths: int, steps: int = 8, seed: int = 0
) -> PathEnsemble:
    """Sample ``n_paths`` backward Brownian paths started from ``terminal`` at ``times[0]``."""
    times = _check_times(space, times)
    mass = masses_of(terminal)
    if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-12:
        raise InvalidMeasure("terminal law must be a probability measure")
    if n_paths < 1:
        raise InvalidParameter("n_paths must be positive")
    paths = np.empty((n_paths, times.size), dtype=np.int64)
    cdf0 = np.cumsum(mass)[None, :]
    paths[:, 0] = _draw_rows(cdf0, np.zeros(n_paths, dtype=np.int64), _step_rng(seed, 0).random(n_paths))
    for k in range(times.size - 1):
        cdf = np.cumsum(transition_matrix(space, times[k], times[k + 1], steps), axis=1)
        paths[:, k + 1] = _draw_rows(cdf, paths[:, k], _step_rng(seed, k + 1).random(n_paths))
    return PathEnsemble(times, paths, int(seed), int(steps))


# coupling kernels -------------------------------------------------------


def _line_metric(space: DynamicSpace) -> bool:
    """True when every ``d_t`` is a time-dependent multiple of the grid distance."""
    if "line_metric" not in space._cache:
        ok = space.kind == "grid"
        if ok and not space.static_metric:
            lo, hi = space.horizon
            x = space.coords
            for t in (lo, 0.5 * (lo + hi), hi):
                h = np.asarray(space.log_derivative(t, x[:, None], x[None, :]), dtype=float)
                ok = ok and np.ptp(h) == 0
        space._cache["line_metric"] = bool(ok)
    return space._cache["line_metric"]


def coupling_kernel(
    space: DynamicSpace,
    s_hi: float,
    s_lo: float,
    x: int,
    y: int,
    mode: str = "winf",
    steps: int = 8,
    p: float = 2.0,
    method: str = "lp",
) -> TransportPlan:
    """Coupling of the backward transition laws from ``x`` and ``y``.

    ``method="lp"`` solves the transport problem exactly; ``"monotone"`` uses
    the quantile coupling, which is optimal for both ``winf`` and ``wp`` on
    line metrics; ``"auto"`` picks ``"monotone"`` whenever that is valid.
    ``plan.meta["excess"]`` is the largest ``d_{s_lo}`` on the support minus
    ``d_{s_hi}(x, y)``.
    """
    if mode not in MODES:
        raise InvalidParameter(f"unknown mode {mode!r}")
    if not s_lo < s_hi:
        raise BadInterval(f"need s_lo < s_hi, got {s_lo}, {s_hi}")
    q = transition_matrix(space, s_hi, s_lo, steps)
    a, b = q[x], q[y]
    d_lo = distance_at(space, s_lo)
    if method == "auto":
        method = "monotone" if _line_metric(space) else "lp"
    if mode == "independent":
        joint = np.outer(a, b)
        plan = TransportPlan(joint, MeasureOnSpace(a), MeasureOnSpace(b), float((joint * d_lo**2).sum()), 2.0)
    elif x == y:
        plan = TransportPlan(np.diag(a), MeasureOnSpace(a), MeasureOnSpace(b), 0.0, math.inf if mode == "winf" else p)
    elif method == "monotone":
        i, j, w = monotone_coupling(a, b)
        joint = np.zeros((a.size, b.size))
        np.add.at(joint, (i, j), w)
        cost = float(d_lo[i, j].max()) if mode == "winf" else float((w * d_lo[i, j] ** p).sum())
        plan = TransportPlan(joint, MeasureOnSpace(a), MeasureOnSpace(b), cost, math.inf if mode == "winf" else p)
    elif method == "lp":
        plan = wasserstein_inf(d_lo, a, b)[1] if mode == "winf" else wasserstein_p(d_lo, p, a, b)[1]
    else:
        raise InvalidParameter(f"unknown method {method!r}")
    d_hi = distance_at(space, s_hi)[x, y]
    plan.meta["excess"] = plan.support_max(d_lo, MASS_TOL) - d_hi
    plan.meta["mode"] = mode
    return plan


def dyadic_times(t: float, level: int, start: float = 0.0) -> np.ndarray:
    """Level-``level`` dyadic grid of ``[start, t]`` in decreasing order."""
    if level < 0:
        raise InvalidGrid("level must be nonnegative")
    k = np.arange(2**level + 1)
    return t - (t - start) * k / 2**level


def _dyadic_index(value: float, grid: np.ndarray) -> int:
    k = int(np.argmin(np.abs(grid - value)))
    if abs(grid[k] - value) > 1e-12 * max(1.0, abs(value)):
        raise InvalidGrid(f"time {value} is not on the dyadic grid")
    return k


class _PlanCache:
    """Memoised one-step couplings keyed by ``(s_hi, s_lo, a, b, mode)``, stored as sampling tables."""

    def __init__(self, space, mode, steps, p, method):
        self.space, self.mode, self.steps, self.p, self.method = space, mode, steps, p, method
        self.tables = {}

    def table(self, s_hi, s_lo, a, b):
        key = (s_hi, s_lo, int(a), int(b), self.mode)
        if key not in self.tables:
            monotone = self.method == "monotone" or (self.method == "auto" and _line_metric(self.space))
            if monotone and a != b:
                q = transition_matrix(self.space, s_hi, s_lo, self.steps)
                i, j, w = monotone_coupling(q[a], q[b])
            else:
                plan = coupling_kernel(self.space, s_hi, s_lo, int(a), int(b), self.mode, self.steps, self.p,
                                       self.method)
                i, j = np.nonzero(plan.joint > 0)
                w = plan.joint[i, j]
            self.tables[key] = (i, j, np.cumsum(w) / w.sum())
        return self.tables[key]


def dyadic_coupling_step(
    space: DynamicSpace,
    level: int,
    s_hi: float,
    s_lo: float,
    x: int,
    y: int,
    mode: str = "winf",
    steps: int = 8,
    t: float | None = None,
    start: float | None = None,
    p: float = 2.0,
    method: str = "lp",
) -> TransportPlan:
    """Compose one-step couplings across the level-``level`` dyadic times between ``s_hi`` and ``s_lo``."""
    t = space.horizon[1] if t is None else t
    start = space.horizon[0] if start is None else start
    grid = dyadic_times(t, level, start)
    k_hi, k_lo = _dyadic_index(s_hi, grid), _dyadic_index(s_lo, grid)
    if not k_hi < k_lo:
        raise InvalidGrid("need s_lo < s_hi on the grid")
    joint = {(int(x), int(y)): 1.0}
    plans = {}
    for k in range(k_hi, k_lo):
        nxt = {}
        for (a, b), w in joint.items():
            key = (k, a, b)
            if key not in plans:
                plans[key] = coupling_kernel(space, grid[k], grid[k + 1], a, b, mode, steps, p, method).joint
            ii, jj = np.nonzero(plans[key])
            for i, j, v in zip(ii, jj, plans[key][ii, jj]):
                nxt[(i, j)] = nxt.get((i, j), 0.0) + w * v
        joint = nxt
    out = np.zeros((space.n, space.n))
    for (i, j), w in joint.items():
        out[i, j] = w
    d_lo = distance_at(space, grid[k_lo])
    plan = TransportPlan(out, MeasureOnSpace(out.sum(axis=1)), MeasureOnSpace(out.sum(axis=0)),
                         float((out * d_lo**2).sum()), 2.0)
    plan.meta["excess"] = plan.support_max(d_lo, MASS_TOL) - distance_at(space, grid[k_hi])[x, y]
    plan.meta["mode"] = mode
    return plan


def sample_coupled_bm(
    space: DynamicSpace,
    x: int,
    y: int,
    times,
    n_paths: int,
    mode: str = "winf",
    steps: int = 8,
    seed: int = 0,
    p: float = 2.0,
    method: str = "auto",
) -> PathEnsemble:
    """Paired backward Brownian paths from ``(x, y)`` at ``times[0]`` on a dyadic grid.

    Each step draws the next pair from the coupling built for the current pair.
    """
    if mode not in MODES:
        raise InvalidParameter(f"unknown mode {mode!r}")
    times = _check_times(space, times)
    gaps = -np.diff(times)
    k = gaps.size
    if k < 1 or k & (k - 1) or np.ptp(gaps) > 1e-12 * max(1.0, gaps.max()):
        raise InvalidGrid("coupled sampling needs a uniform dyadic grid with 2^n steps")
    n = space.n
    if not (0 <= x < n and 0 <= y < n):
        raise InvalidParameter("start vertices out of range")
    paths = np.empty((n_paths, times.size, 2), dtype=np.int64)
    paths[:, 0, 0], paths[:, 0, 1] = x, y
    cache = _PlanCache(space, mode, steps, p, method)
    for step in range(k):
        s_hi, s_lo = float(times[step]), float(times[step + 1])
        rng = _step_rng(seed, step + 1)
        cur = paths[:, step]
        if mode == "independent":
            cdf = np.cumsum(transition_matrix(space, s_hi, s_lo, steps), axis=1)
            u = rng.random((n_paths, 2))
            paths[:, step + 1, 0] = _draw_rows(cdf, cur[:, 0], u[:, 0])
            paths[:, step + 1, 1] = _draw_rows(cdf, cur[:, 1], u[:, 1])
            continue
        u = rng.random(n_paths)
        codes = cur[:, 0] * n + cur[:, 1]
        order = np.argsort(codes, kind="stable")
        uniq, starts = np.unique(codes[order], return_index=True)
        bounds = np.append(starts, n_paths)
        for code, lo, hi in zip(uniq, bounds[:-1], bounds[1:]):
            a, b = divmod(int(code), n)
            members = order[lo:hi]
            if a == b and mode == "winf":
                cdf = np.cumsum(transition_matrix(space, s_hi, s_lo, steps)[a])
                nxt = np.minimum(np.searchsorted(cdf, u[members] * cdf[-1]), n - 1)
                paths[members, step + 1, 0] = paths[members, step + 1, 1] = nxt
                continue
            ii, jj, cw = cache.table(s_hi, s_lo, a, b)
            pick = np.minimum(np.searchsorted(cw, u[members]), cw.size - 1)
            paths[members, step + 1, 0] = ii[pick]
            paths[members, step + 1, 1] = jj[pick]
    return PathEnsemble(times, paths, int(seed), int(steps), mode, {"x": int(x), "y": int(y), "p": p})


# path statistics --------------------------------------------------------


def contraction_stats(
    paths: PathEnsemble, space: DynamicSpace, margin: float | None = None, allowed: float = 0.01
) -> CheckReport:
    """Violations of ``d_{s_k}(B^1, B^2) <= d_t(x, y) + margin`` along coupled paths.

    ``slack = allowed - fraction of paths violating at some time``; ``margin``
    defaults to two grid spacings.
    """
    if not paths.coupled:
        raise InvalidInput("contraction statistics need a coupled ensemble")
    margin = 2.0 * space.spacing if margin is None else float(margin)
    x0, y0 = paths.paths[0, 0]
    d0 = float(distance_at(space, paths.times[0])[x0, y0])
    excess = np.empty(paths.paths.shape[:2])
    for k, s in enumerate(paths.times):
        excess[:, k] = distance_at(space, s)[paths.paths[:, k, 0], paths.paths[:, k, 1]] - d0
    viol = excess > margin
    fraction = float(viol.any(axis=1).mean())
    details = {
        "violation_fraction": fraction,
        "per_time_fraction": viol.mean(axis=0),
        "mean_excess": excess.mean(axis=0),
        "max_excess": excess.max(axis=0),
        "overall_max_excess": float(excess.max()),
        "margin": margin,
        "d_t": d0,
    }
    params = {"mode": paths.mode, "n_paths": paths.n_paths, "seed": paths.seed, "n": space.n}
    return CheckReport("contraction", allowed - fraction, {"times": [paths.times[0], paths.times[-1]]}, 0.0,
                       params, details=details)


def kolmogorov_scaling(
    paths: PathEnsemble, space: DynamicSpace, p: float = 2.0, max_lag: int = 4, rel_tol: float = 0.15
) -> CheckReport:
    """Log-log slope of ``E d^p(B_s, B_s')`` against ``|s - s'|`` over lags ``1..max_lag``.

    ``slack = rel_tol * p/2 - |slope - p/2|``. Distances use ``d`` at the
    first time of the ensemble.
    """
    if paths.coupled:
        raise InvalidInput("moment scaling expects a single-component ensemble")
    lags = [lag for lag in range(1, max_lag + 1) if lag < paths.times.size]
    if len(lags) < 4:
        raise InvalidGrid("need at least 4 distinct time gaps")
    d = distance_at(space, paths.times[0])
    gaps, moments = [], []
    for lag in lags:
        a, b = paths.paths[:, :-lag], paths.paths[:, lag:]
        gaps.append(float(np.mean(paths.times[:-lag] - paths.times[lag:])))
        moments.append(float(np.mean(d[a, b] ** p)))
    params = {"p": p, "lags": lags, "n_paths": paths.n_paths, "seed": paths.seed}
    details = {"gaps": gaps, "moments": moments}
    if min(moments) <= 0.0:
        return CheckReport("kolmogorov-scaling", math.nan, None, 0.0, params, status="degenerate",
                           details={**details, "slope": None})
    slope = float(np.polyfit(np.log(gaps), np.log(moments), 1)[0])
    details.update({"slope": slope, "target": p / 2})
    return CheckReport("kolmogorov-scaling", rel_tol * p / 2 - abs(slope - p / 2), None, 0.0, params,
                       details=details)


__all__ = [
    "MODES",
    "PathEnsemble",
    "transition_matrix",
    "sample_backward_bm",
    "coupling_kernel",
    "dyadic_times",
    "dyadic_coupling_step",
    "sample_coupled_bm",
    "contraction_stats",
    "kolmogorov_scaling",
]
