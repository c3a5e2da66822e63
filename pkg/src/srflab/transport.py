"""Exact discrete optimal transport, relative entropy and 1D displacement interpolation."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

# POT probes every installed array backend on import; only numpy is used here.
for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

import ot  # noqa: E402

from .errors import (  # noqa: E402
    InvalidMeasure,
    InvalidParameter,
    NumericalFailure,
    UnbalancedInput,
    UnsupportedSpace,
)
from .report import CheckReport  # noqa: E402
from .space import DynamicSpace, MeasureOnSpace, distance_at, masses_of, measure_at  # noqa: E402

BALANCE_TOL = 1e-9
MASS_TOL = 1e-12
_EMD_MAX_ITER = 10_000_000
_RESCALE_ROUNDS = 12
_COST_CAP = 1e6


@dataclass(frozen=True)
class TransportPlan:
    joint: np.ndarray
    row_marginal: MeasureOnSpace
    col_marginal: MeasureOnSpace
    cost_value: float
    p: float
    dual_gap: float = 0.0
    dual_infeasibility: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def marginal_error(self) -> float:
        rows = np.abs(self.joint.sum(axis=1) - self.row_marginal.masses).max()
        cols = np.abs(self.joint.sum(axis=0) - self.col_marginal.masses).max()
        return float(max(rows, cols))

    def support_max(self, d, tol: float = MASS_TOL) -> float:
        """Largest distance carried by an entry with mass above ``tol``."""
        mask = self.joint > tol
        return float(np.asarray(d)[mask].max()) if mask.any() else 0.0

    def cost_under(self, d, p: float) -> float:
        d = np.asarray(d, dtype=float)
        if math.isinf(p):
            return self.support_max(d)
        return float((self.joint * d**p).sum())

    def triplets(self, tol: float = 0.0):
        i, j = np.nonzero(self.joint > tol)
        return i, j, self.joint[i, j]

    def to_csv(self, path, tol: float = 0.0) -> None:
        i, j, w = self.triplets(tol)
        with open(path, "w") as fh:
            fh.write("x_index,y_index,mass\n")
            for a, b, m in zip(i, j, w):
                fh.write(f"{a},{b},{m:.17g}\n")


def read_plan_csv(path, n: int) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    joint = np.zeros((n, n))
    if data.size:
        np.add.at(joint, (data[:, 0].astype(int), data[:, 1].astype(int)), data[:, 2])
    return joint


def _pair(d, mu, nu):
    d = np.asarray(d, dtype=float)
    a, b = masses_of(mu), masses_of(nu)
    if d.ndim != 2 or d.shape != (a.size, b.size):
        raise InvalidParameter(f"distance matrix shape {d.shape} does not match measures")
    if (a < 0).any() or (b < 0).any():
        raise InvalidMeasure("measures must be nonnegative")
    if abs(a.sum() - b.sum()) > BALANCE_TOL:
        raise UnbalancedInput(f"mass mismatch {abs(a.sum() - b.sum()):.3e}")
    if a.sum() <= 0:
        raise InvalidMeasure("measures carry no mass")
    return d, a, b


def _solve(cost, a, b):
    """Network simplex on the supports of ``a`` and ``b``; returns full plan and duals."""
    I, J = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    sub = np.ascontiguousarray(cost[np.ix_(I, J)])
    bs = b[J] * (a[I].sum() / b[J].sum())
    G, log = ot.emd(a[I], bs, sub, numItermax=_EMD_MAX_ITER, log=True)
    if log.get("warning"):
        raise NumericalFailure(f"network simplex: {log['warning']}")
    joint = np.zeros_like(cost)
    joint[np.ix_(I, J)] = G
    return joint, I, J, sub, G, log


def wasserstein_p(d, p: float, mu, nu):
    """Exact W_p with a complementary-slackness certificate."""
    if not (1 <= p < math.inf):
        raise InvalidParameter(f"exponent must satisfy 1 <= p < inf, got {p}")
    d, a, b = _pair(d, mu, nu)
    # Distances are rescaled until the optimal normalised cost is of order one;
    # otherwise large exponents push relevant costs below the simplex tolerance.
    # A rescale never caps a pair the previous plan uses, and the round with the
    # lowest true cost wins, so capping cannot make the answer worse.
    scale = float(d[np.ix_(a > 0, b > 0)].max())
    if scale <= 0.0:
        scale = 1.0
    best = None
    for _ in range(_RESCALE_ROUNDS):
        cost = np.minimum((d / scale) ** p, _COST_CAP)
        joint, I, J, sub, G, log = _solve(cost, a, b)
        primal = float((G * sub).sum())
        true = float((joint * (d / scale) ** p).sum()) * scale**p
        if best is None or true < best[0]:
            best = (true, scale, joint, I, J, sub, G, log, primal)
        if primal <= 0.0 or primal >= 1e-2:
            break
        used = float(d[joint > 0].max())
        new = max(scale * primal ** (1.0 / p), used * _COST_CAP ** (-1.0 / p))
        if new >= scale:
            break
        scale = new
    _, scale, joint, I, J, sub, G, log, primal = best
    u, v = np.asarray(log["u"]), np.asarray(log["v"])
    bs = b[J] * (a[I].sum() / b[J].sum())
    dual = float(u @ a[I] + v @ bs)
    infeas = float(max(0.0, (u[:, None] + v[None, :] - sub).max()))
    unit = scale**p
    plan = TransportPlan(
        joint=joint,
        row_marginal=MeasureOnSpace(a),
        col_marginal=MeasureOnSpace(b),
        cost_value=float((joint * d**p).sum()),
        p=float(p),
        dual_gap=abs(primal - dual) * unit,
        dual_infeasibility=infeas * unit,
    )
    value = scale * float((joint * (d / scale) ** p).sum()) ** (1.0 / p)
    return value, plan


def _unrouted(D, a, b, theta):
    bad = (D > theta).astype(float)
    G = ot.emd(a, b, bad, numItermax=_EMD_MAX_ITER)
    return float((G * bad).sum())


def wasserstein_inf(d, mu, nu, mass_tol: float = MASS_TOL):
    """Exact discrete W_inf: bisection on the sorted distinct distances.

    A level ``theta`` is feasible when a coupling leaves at most ``mass_tol``
    on pairs farther apart than ``theta``. Among plans supported on the
    optimal level, the returned one minimises the quadratic cost.
    """
    d, a, b = _pair(d, mu, nu)
    I, J = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    D = np.ascontiguousarray(d[np.ix_(I, J)])
    aI = a[I]
    bJ = b[J] * (aI.sum() / b[J].sum())
    levels = np.unique(D)
    lo, hi = 0, levels.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _unrouted(D, aI, bJ, levels[mid]) <= mass_tol:
            hi = mid
        else:
            lo = mid + 1
    theta = float(levels[lo])
    scale = max(float(D.max()), np.finfo(float).tiny)
    penalty = 4.0 * (D.shape[0] + D.shape[1]) + 10.0
    cost = np.where(D <= theta, (D / scale) ** 2, penalty)
    joint = np.zeros_like(d)
    joint[np.ix_(I, J)] = ot.emd(aI, bJ, cost, numItermax=_EMD_MAX_ITER)
    plan = TransportPlan(
        joint=joint,
        row_marginal=MeasureOnSpace(a),
        col_marginal=MeasureOnSpace(b),
        cost_value=theta,
        p=math.inf,
    )
    return theta, plan


def wasserstein(d, p: float, mu, nu) -> float:
    if math.isinf(p):
        return wasserstein_inf(d, mu, nu)[0]
    return wasserstein_p(d, p, mu, nu)[0]


def monotone_coupling(mu, nu):
    """North-west corner (quantile) coupling in index order as sparse triplets.

    On a line metric this coupling is optimal for every convex cost and for W_inf.
    """
    a, b = masses_of(mu), masses_of(nu)
    A = np.cumsum(a)
    B = np.cumsum(b) * (A[-1] / b.sum())
    B[-1] = A[-1]
    pts = np.unique(np.concatenate(([0.0], A, B)))
    widths = np.diff(pts)
    mids = 0.5 * (pts[:-1] + pts[1:])
    i = np.minimum(np.searchsorted(A, mids, side="right"), a.size - 1)
    j = np.minimum(np.searchsorted(B, mids, side="right"), b.size - 1)
    keep = widths > 0
    return i[keep], j[keep], widths[keep]


def monotone_plan(mu, nu, d=None, p: float = 2.0) -> TransportPlan:
    a, b = masses_of(mu), masses_of(nu)
    i, j, w = monotone_coupling(a, b)
    joint = np.zeros((a.size, b.size))
    np.add.at(joint, (i, j), w)
    cost = 0.0
    if d is not None:
        d = np.asarray(d, dtype=float)
        cost = float(d[i, j].max()) if math.isinf(p) else float((w * d[i, j] ** p).sum())
    return TransportPlan(joint, MeasureOnSpace(a), MeasureOnSpace(b), cost, float(p))


def entropy(mu, reference) -> float:
    """Relative entropy; ``math.inf`` when ``mu`` is not absolutely continuous."""
    x, r = masses_of(mu), masses_of(reference)
    if x.shape != r.shape:
        raise InvalidParameter("measure shapes differ")
    if ((x > 0) & (r <= 0)).any():
        return math.inf
    pos = x > 0
    return float(np.sum(x[pos] * np.log(x[pos] / r[pos])))


def _rebin(coords, z, w):
    x0, dx = coords[0], coords[1] - coords[0]
    pos = (z - x0) / dx
    k = np.floor(pos)
    frac = pos - k
    # snap quantiles that land on a node up to rounding
    snap_up = frac > 1 - 1e-9
    k[snap_up] += 1
    frac[snap_up] = 0.0
    frac[frac < 1e-9] = 0.0
    k = np.clip(k.astype(int), 0, coords.size - 1)
    out = np.zeros(coords.size)
    np.add.at(out, k, w * (1 - frac))
    np.add.at(out, np.minimum(k + 1, coords.size - 1), w * frac)
    return out


def quantile_geodesic_1d(space: DynamicSpace, mu0, mu1, a: float) -> MeasureOnSpace:
    """Displacement interpolation by quantile averaging, re-binned linearly to the grid."""
    if space.kind != "grid":
        raise UnsupportedSpace("quantile interpolation needs a 1D grid")
    if not (0.0 <= a <= 1.0):
        raise InvalidParameter(f"interpolation parameter {a} outside [0, 1]")
    m0, m1 = masses_of(mu0), masses_of(mu1)
    for m in (m0, m1):
        if (m < 0).any() or abs(m.sum() - 1.0) > BALANCE_TOL:
            raise InvalidMeasure("geodesic endpoints must be probability measures")
    if a == 0.0:
        return MeasureOnSpace(m0.copy())
    if a == 1.0:
        return MeasureOnSpace(m1.copy())
    i, j, w = monotone_coupling(m0, m1)
    x = space.coords
    return MeasureOnSpace(_rebin(x, (1 - a) * x[i] + a * x[j], w))


def _convexity_terms(space, mu0, mu1, t, da, dt_step):
    ref = measure_at(space, t)
    pts = {a: quantile_geodesic_1d(space, mu0, mu1, a) for a in (0.0, da, 1.0 - da, 1.0)}
    S = {a: entropy(m, ref) for a, m in pts.items()}
    if any(math.isinf(v) for v in S.values()):
        return None
    lhs = (S[1.0] - S[1.0 - da]) / da - (S[da] - S[0.0]) / da
    w_now = wasserstein_p(distance_at(space, t), 2, mu0, mu1)[0] ** 2
    w_before = wasserstein_p(distance_at(space, t - dt_step), 2, mu0, mu1)[0] ** 2
    dw = (w_now - w_before) / dt_step
    return lhs, dw, S


def dynamic_convexity_check(
    space: DynamicSpace,
    mu0,
    mu1,
    t: float,
    da: float = 0.05,
    dt_step: float = 1e-3,
    tolerance: float | None = None,
    tol_scale: float = 1.0,
    sensitivity: tuple = ((0.1, 0.05, 0.025), (4e-3, 2e-3, 1e-3)),
) -> CheckReport:
    """Entropy convexity along the 1D quantile geodesic against the backward W_2 rate.

    ``slack = dS(1) - dS(0) + 0.5 * d/dt^- W_t^2``. The report details include
    the slack for every combination of ``da`` and ``dt_step`` in ``sensitivity``.
    """
    if space.kind != "grid":
        raise UnsupportedSpace("dynamic convexity is implemented on 1D grids only")
    if not (0.0 < da < 0.5):
        raise InvalidParameter("da must lie in (0, 1/2)")
    if dt_step <= 0:
        raise InvalidParameter("dt_step must be positive")
    space.check_time(t)
    space.check_time(t - dt_step)
    if tolerance is None:
        tolerance = tol_scale * (space.spacing + da)
    params = {"t": t, "da": da, "dt_step": dt_step, "n": space.n}
    terms = _convexity_terms(space, mu0, mu1, t, da, dt_step)
    if terms is None:
        return CheckReport("dynamic-convexity", math.nan, {"t": t}, tolerance, params,
                           status="inconclusive", details={"reason": "infinite entropy"})
    lhs, dw, S = terms
    table = []
    for da_k in sensitivity[0]:
        for dt_k in sensitivity[1]:
            if t - dt_k < space.horizon[0] - 1e-12:
                continue
            row = _convexity_terms(space, mu0, mu1, t, da_k, dt_k)
            if row is not None:
                table.append({"da": da_k, "dt_step": dt_k, "slack": row[0] + 0.5 * row[1]})
    return CheckReport(
        "dynamic-convexity",
        lhs + 0.5 * dw,
        {"t": t},
        tolerance,
        params,
        details={"lhs": lhs, "dt_w2": dw, "entropy": list(S.values()), "sensitivity": table},
    )


__all__ = [
    "BALANCE_TOL",
    "MASS_TOL",
    "TransportPlan",
    "read_plan_csv",
    "wasserstein_p",
    "wasserstein_inf",
    "wasserstein",
    "monotone_coupling",
    "monotone_plan",
    "entropy",
    "quantile_geodesic_1d",
    "dynamic_convexity_check",
]
