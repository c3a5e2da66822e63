"""Discrete time-dependent metric measure spaces.

A :class:`DynamicSpace` is a finite vertex set carrying

* a reference measure ``m`` and a time-dependent weight ``f_t`` so that the
  measure at time ``t`` is ``m_t = exp(-f_t) m``;
* a reference distance ``d_{t0}`` and a logarithmic rate ``h_r(x, y)`` so that
  ``d_t(x, y) = d_{t0}(x, y) exp(int_{t0}^t h_r(x, y) dr)``;
* base conductances ``a(x, y)`` on the edges of a connected graph.

Evaluators are vectorised: ``weight_fn(t, x)``, ``log_derivative(r, x, y)`` and
``local_log_derivative(r, x)`` receive numpy arrays of vertex coordinates
(grid positions, or vertex indices for graphs) and must return arrays of the
broadcast shape.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import (
    DegenerateMetric,
    InvalidEvaluator,
    InvalidHorizon,
    InvalidInput,
    InvalidSize,
    OutOfHorizon,
)

#: Simpson subintervals per unit time used for the log-distance integral.
QUAD_PER_UNIT = 64

_HORIZON_SLACK = 1e-12


def _zero_weight(t, x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_pair(r, x, y):
    return np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)


def _zero_local(r, x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class FieldOnSpace:
    """A real function on the vertices, optionally tagged with a time."""

    values: np.ndarray
    time_tag: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise InvalidInput("field values must be a finite 1-d array")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class MeasureOnSpace:
    """Nonnegative masses on the vertices."""

    masses: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.ndim != 1 or not np.all(np.isfinite(m)) or np.any(m < 0):
            raise InvalidInput("masses must be a finite nonnegative 1-d array")
        if self.normalized and abs(m.sum() - 1.0) > 1e-12:
            raise InvalidInput(f"normalized measure has total mass {m.sum()!r}")
        object.__setattr__(self, "masses", m)

    def __array__(self, dtype=None, copy=None):
        return self.masses if dtype is None else self.masses.astype(dtype)

    def __len__(self):
        return len(self.masses)

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    @classmethod
    def probability(cls, masses) -> "MeasureOnSpace":
        m = np.asarray(masses, dtype=float)
        return cls(m / m.sum(), normalized=True)

    @classmethod
    def dirac(cls, n: int, x: int) -> "MeasureOnSpace":
        m = np.zeros(n)
        m[x] = 1.0
        return cls(m, normalized=True)


def values_of(u) -> np.ndarray:
    """Return the value array of a field or array-like."""
    if isinstance(u, FieldOnSpace):
        return u.values
    return np.asarray(u, dtype=float)


def masses_of(mu) -> np.ndarray:
    if isinstance(mu, MeasureOnSpace):
        return mu.masses
    return np.asarray(mu, dtype=float)


@dataclass(frozen=True, eq=False)
class DynamicSpace:
    coords: np.ndarray
    base_measure: np.ndarray
    base_distance: np.ndarray
    adjacency: np.ndarray
    weight_fn: Callable = _zero_weight
    log_derivative: Callable = _zero_pair
    local_log_derivative: Callable = _zero_local
    horizon: tuple = (0.0, 1.0)
    t0: float = 0.0
    kind: str = "grid"
    h_bound: float = 0.0
    # optional exact companions of the evaluators
    weight_rate: Optional[Callable] = None
    log_derivative_integral: Optional[Callable] = None
    local_log_derivative_integral: Optional[Callable] = None
    static_weight: bool = False
    static_metric: bool = False
    # declared edge lengths at t0 when they exceed the geodesic distance (graphs)
    base_edge_length: Optional[np.ndarray] = None
    name: str = "custom"
    meta: dict = field(default_factory=dict)
    _cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        n = coords.shape[0]
        if n < 2:
            raise InvalidSize(f"need at least 2 vertices, got {n}")
        m = np.asarray(self.base_measure, dtype=float)
        d = np.asarray(self.base_distance, dtype=float)
        a = np.asarray(self.adjacency, dtype=float)
        if m.shape != (n,) or d.shape != (n, n) or a.shape != (n, n):
            raise InvalidSize("inconsistent shapes of measure/distance/adjacency")
        if np.any(m <= 0) or not np.all(np.isfinite(m)):
            raise InvalidInput("base measure must be positive and finite")
        if not np.allclose(d, d.T, rtol=0, atol=1e-12) or np.any(np.diag(d) != 0):
            raise InvalidInput("base distance must be symmetric with zero diagonal")
        off = ~np.eye(n, dtype=bool)
        if np.any(d[off] <= 0):
            raise DegenerateMetric("base distance vanishes between distinct vertices")
        if not np.array_equal(a, a.T) or np.any(a < 0) or np.any(np.diag(a) != 0):
            raise InvalidInput("adjacency must be symmetric, nonnegative, zero diagonal")
        ncomp, _ = csgraph.connected_components(sparse.csr_matrix(a > 0), directed=False)
        if ncomp != 1:
            raise InvalidInput("adjacency graph is not connected")
        lo, hi = map(float, self.horizon)
        if not lo < hi:
            raise InvalidHorizon(f"empty horizon ({lo}, {hi})")
        if self.kind not in ("grid", "graph"):
            raise InvalidInput(f"unknown space kind {self.kind!r}")
        for name, val in (("coords", coords), ("base_measure", m), ("base_distance", d), ("adjacency", a)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "horizon", (lo, hi))
        self._probe_evaluators()

    def _probe_evaluators(self):
        lo, hi = self.horizon
        i, j = self.edges
        for t in (lo, 0.5 * (lo + hi), hi):
            checks = [
                self.weight_fn(t, self.coords),
                self.log_derivative(t, self.coords[i], self.coords[j]),
                self.local_log_derivative(t, self.coords),
            ]
            for val in checks:
                if not np.all(np.isfinite(np.asarray(val, dtype=float))):
                    raise InvalidEvaluator(f"evaluator returned non-finite values at t={t}")

    # basic geometry ------------------------------------------------------

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def edges(self):
        """Index arrays ``(i, j)`` with ``i < j`` of the adjacency support."""
        if "edges" not in self._cache:
            i, j = np.nonzero(np.triu(self.adjacency > 0))
            self._cache["edges"] = (i, j)
        return self._cache["edges"]

    @property
    def spacing(self) -> float:
        """Grid spacing (smallest base edge length for graphs)."""
        i, j = self.edges
        return float(self.base_distance[i, j].min())

    def boundary_mask(self, width: int = 2) -> np.ndarray:
        """Boolean mask of vertices within ``width`` steps of a grid end."""
        mask = np.zeros(self.n, dtype=bool)
        if self.kind == "grid" and width > 0:
            mask[:width] = True
            mask[-width:] = True
        return mask

    def check_time(self, t: float) -> float:
        lo, hi = self.horizon
        if not (lo - _HORIZON_SLACK <= t <= hi + _HORIZON_SLACK):
            raise OutOfHorizon(f"t={t} outside horizon ({lo}, {hi})")
        return float(t)

    def replace(self, **changes) -> "DynamicSpace":
        return dataclasses.replace(self, **changes)

    def weight(self, t: float) -> np.ndarray:
        f = np.asarray(self.weight_fn(t, self.coords), dtype=float)
        if f.shape != (self.n,) or not np.all(np.isfinite(f)):
            raise InvalidEvaluator(f"weight_fn returned invalid values at t={t}")
        return f

    def weight_derivative(self, t: float, step: float = 1e-5) -> np.ndarray:
        """Time derivative of f_t; central difference when no rate is given."""
        if self.static_weight:
            return np.zeros(self.n)
        if self.weight_rate is not None:
            return np.asarray(self.weight_rate(t, self.coords), dtype=float)
        return (self.weight(t + step) - self.weight(t - step)) / (2 * step)


def simpson(fn: Callable[[float], np.ndarray], a: float, b: float, per_unit: int = QUAD_PER_UNIT):
    """Composite Simpson rule with ``per_unit`` subintervals per unit length."""
    if a == b:
        return np.zeros_like(np.asarray(fn(a), dtype=float))
    m = max(2, 2 * math.ceil(per_unit * abs(b - a) / 2))
    nodes = np.linspace(a, b, m + 1)
    w = np.ones(m + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    acc = 0.0
    for wk, r in zip(w, nodes):
        acc = acc + wk * np.asarray(fn(r), dtype=float)
    return acc * (b - a) / (3 * m)


def log_distance_ratio(space: DynamicSpace, s: float, t: float, i, j) -> np.ndarray:
    """``int_s^t h_r(x_i, x_j) dr`` for index arrays ``i, j``."""
    xi, xj = space.coords[i], space.coords[j]
    if space.static_metric:
        return np.zeros(np.broadcast(xi, xj).shape)
    if space.log_derivative_integral is not None:
        return np.asarray(space.log_derivative_integral(s, t, xi, xj), dtype=float)
    return simpson(lambda r: space.log_derivative(r, xi, xj), s, t)


def local_log_integral(space: DynamicSpace, s: float, t: float) -> np.ndarray:
    """``int_s^t H_r(x) dr`` at every vertex."""
    if space.static_metric:
        return np.zeros(space.n)
    if space.local_log_derivative_integral is not None:
        return np.asarray(space.local_log_derivative_integral(s, t, space.coords), dtype=float)
    return simpson(lambda r: space.local_log_derivative(r, space.coords), s, t)


def edge_lengths(space: DynamicSpace, t: float) -> np.ndarray:
    """``d_t`` on the edges returned by ``space.edges``."""
    t = space.check_time(t)
    key = ("edge_lengths", t)
    if key not in space._cache:
        i, j = space.edges
        base = space.base_distance if space.base_edge_length is None else space.base_edge_length
        d = base[i, j] * np.exp(log_distance_ratio(space, space.t0, t, i, j))
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise DegenerateMetric(f"edge length vanished at t={t}")
        space._cache[key] = d
    return space._cache[key]


def distance_at(space: DynamicSpace, t: float) -> np.ndarray:
    """Distance matrix ``d_t``.

    Grids apply the log-rate formula to every pair; graphs apply it on edges
    and close the result under shortest paths so that ``d_t`` stays geodesic.
    """
    t = space.check_time(t)
    key = ("distance", t)
    if key in space._cache:
        return space._cache[key]
    n = space.n
    if space.kind == "grid":
        i, j = np.triu_indices(n, 1)
        vals = space.base_distance[i, j] * np.exp(log_distance_ratio(space, space.t0, t, i, j))
        if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
            raise DegenerateMetric(f"distance vanished at t={t}")
        d = np.zeros((n, n))
        d[i, j] = vals
        d[j, i] = vals
    else:
        i, j = space.edges
        w = sparse.coo_matrix((edge_lengths(space, t), (i, j)), shape=(n, n)).tocsr()
        d = csgraph.shortest_path(w, method="D", directed=False)
    d.setflags(write=False)
    space._cache[key] = d
    return d


def measure_at(space: DynamicSpace, t: float) -> MeasureOnSpace:
    """The measure ``m_t = exp(-f_t) m`` (not normalized)."""
    t = space.check_time(t)
    return MeasureOnSpace(np.exp(-space.weight(t)) * space.base_measure)


def edge_conductances(space: DynamicSpace, t: float) -> np.ndarray:
    """Conductances aligned with ``space.edges``."""
    t = space.check_time(t)
    key = ("edge_conductances", t)
    if key not in space._cache:
        i, j = space.edges
        f = space.weight(t)
        d = edge_lengths(space, t)
        space._cache[key] = space.adjacency[i, j] * np.exp(-0.5 * (f[i] + f[j])) / d**2
    return space._cache[key]


def conductance_at(space: DynamicSpace, t: float) -> sparse.csr_matrix:
    """Symmetric conductances ``a exp(-(f_x + f_y)/2) / d_t(x, y)^2`` on edges."""
    t = space.check_time(t)
    key = ("conductance", t)
    if key not in space._cache:
        i, j = space.edges
        c = edge_conductances(space, t)
        n = space.n
        mat = sparse.coo_matrix(
            (np.concatenate([c, c]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n)
        ).tocsr()
        space._cache[key] = mat
    return space._cache[key]


def make_grid_space(
    interval,
    n: int,
    weight_fn: Optional[Callable] = None,
    log_derivative: Optional[Callable] = None,
    local_log_derivative: Optional[Callable] = None,
    *,
    horizon=(0.0, 1.0),
    base_measure=None,
    t0: float = 0.0,
    h_bound: Optional[float] = None,
    name: str = "grid",
    **extra,
) -> DynamicSpace:
    """Uniform grid on ``interval`` with nearest-neighbour conductances 1.

    The reference measure defaults to one unit of mass per vertex, which makes
    the generator the standard second-order difference quotient.
    """
    lo, hi = map(float, interval)
    if n < 2:
        raise InvalidSize(f"need n >= 2 grid points, got {n}")
    if not lo < hi:
        raise InvalidInput(f"empty interval [{lo}, {hi}]")
    x = np.linspace(lo, hi, n)
    d = np.abs(x[:, None] - x[None, :])
    a = np.zeros((n, n))
    k = np.arange(n - 1)
    a[k, k + 1] = a[k + 1, k] = 1.0
    m = np.ones(n) if base_measure is None else np.broadcast_to(np.asarray(base_measure, float), (n,)).copy()
    static_weight = extra.pop("static_weight", weight_fn is None)
    static_metric = extra.pop("static_metric", log_derivative is None)
    space = DynamicSpace(
        coords=x,
        base_measure=m,
        base_distance=d,
        adjacency=a,
        weight_fn=weight_fn or _zero_weight,
        log_derivative=log_derivative or _zero_pair,
        local_log_derivative=local_log_derivative or _zero_local,
        horizon=horizon,
        t0=t0,
        kind="grid",
        h_bound=0.0,
        static_weight=static_weight,
        static_metric=static_metric,
        name=name,
        **extra,
    )
    if h_bound is None:
        h_bound = _sampled_h_bound(space)
    return space.replace(h_bound=float(h_bound))


def make_graph_space(
    n: int,
    edges,
    weight_fn: Optional[Callable] = None,
    log_derivative: Optional[Callable] = None,
    local_log_derivative: Optional[Callable] = None,
    *,
    base_measure=None,
    horizon=(0.0, 1.0),
    t0: float = 0.0,
    h_bound: Optional[float] = None,
    name: str = "graph",
    **extra,
) -> DynamicSpace:
    """Weighted graph from ``(i, j, length[, conductance])`` edge records."""
    if n < 2:
        raise InvalidSize(f"need n >= 2 vertices, got {n}")
    a = np.zeros((n, n))
    lengths = np.zeros((n, n))
    for rec in edges:
        i, j, length = int(rec[0]), int(rec[1]), float(rec[2])
        cond = float(rec[3]) if len(rec) > 3 else 1.0
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise InvalidInput(f"bad edge {rec!r}")
        if length <= 0 or cond <= 0:
            raise DegenerateMetric(f"edge {rec!r} needs positive length and conductance")
        a[i, j] = a[j, i] = cond
        lengths[i, j] = lengths[j, i] = length
    d = csgraph.shortest_path(sparse.csr_matrix(lengths), method="D", directed=False)
    if not np.all(np.isfinite(d)):
        raise InvalidInput("graph is not connected")
    m = np.ones(n) if base_measure is None else np.asarray(base_measure, dtype=float)
    static_weight = extra.pop("static_weight", weight_fn is None)
    static_metric = extra.pop("static_metric", log_derivative is None)
    space = DynamicSpace(
        coords=np.arange(n, dtype=float),
        base_measure=m,
        base_distance=d,
        adjacency=a,
        weight_fn=weight_fn or _zero_weight,
        log_derivative=log_derivative or _zero_pair,
        local_log_derivative=local_log_derivative or _zero_local,
        horizon=horizon,
        t0=t0,
        kind="graph",
        base_edge_length=lengths,
        static_weight=static_weight,
        static_metric=static_metric,
        name=name,
        **extra,
    )
    if h_bound is None:
        h_bound = _sampled_h_bound(space)
    return space.replace(h_bound=float(h_bound))


def _sampled_h_bound(space: DynamicSpace, samples: int = 65) -> float:
    if space.static_metric:
        return 0.0
    lo, hi = space.horizon
    i, j = space.edges
    xi, xj = space.coords[i], space.coords[j]
    return float(max(np.max(np.abs(space.log_derivative(r, xi, xj))) for r in np.linspace(lo, hi, samples)))


@dataclass
class AssumptionReport:
    f_bound: float
    f_lip_space: float
    f_lip_time: float
    d_log_lip: float
    h_bound: float
    C: float
    L: float
    passed: dict

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"pass": self.ok}


def check_assumptions(space: DynamicSpace, C: float, L: float, sample_times, pairs=None) -> AssumptionReport:
    """Sampled sup-estimates of the standing bounds on ``f_t`` and ``d_t``.

    ``pairs`` is an optional ``(i, j)`` pair of index arrays; the adjacent
    pairs are used when omitted.
    """
    times = np.sort(np.unique(np.asarray(sample_times, dtype=float)))
    if times.size == 0:
        raise InvalidInput("empty sample grid")
    for t in times:
        space.check_time(t)
    i, j = space.edges if pairs is None else (np.asarray(pairs[0]), np.asarray(pairs[1]))
    if len(i) == 0:
        raise InvalidInput("empty pair sample")
    F = np.array([space.weight(t) for t in times])
    Dij = np.array([distance_at(space, t)[i, j] for t in times])
    xi, xj = space.coords[i], space.coords[j]
    f_bound = float(np.abs(F).max())
    f_lip_space = float((np.abs(F[:, i] - F[:, j]) / Dij).max())
    h_bound = float(max(np.abs(space.log_derivative(t, xi, xj)).max() for t in times))
    f_lip_time = 0.0
    d_log_lip = 0.0
    if times.size > 1:
        a, b = np.triu_indices(times.size, 1)
        dt = times[b] - times[a]
        f_lip_time = float((np.abs(F[b] - F[a]).max(axis=1) / dt).max())
        d_log_lip = float((np.abs(np.log(Dij[b] / Dij[a])).max(axis=1) / dt).max())
    passed = {
        "f_bound": f_bound <= C,
        "f_lip_space": f_lip_space <= C,
        "f_lip_time": f_lip_time <= L,
        "d_log_lip": d_log_lip <= L,
        "h_bound": h_bound <= space.h_bound + 1e-12,
    }
    return AssumptionReport(f_bound, f_lip_space, f_lip_time, d_log_lip, h_bound, float(C), float(L), passed)
