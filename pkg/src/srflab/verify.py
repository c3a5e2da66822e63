"""Numeric checkers for the characterizations of super-Ricci flows.

Every checker returns a :class:`~srflab.report.CheckReport` whose ``slack``
is the worst signed margin (nonnegative when the inequality holds). Mesh
dependent tolerances default to ``tol_scale * dx``. On grids the vertices
within ``boundary_width`` steps of either end are excluded from the
thresholded slack and reported separately under ``details``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import InvalidParameter, InvalidTestFunction
from .heat import dual_propagate, gamma_at, gamma_rate, generator_at, laplacian_at, propagator_matrix
from .report import CheckReport
from .space import DynamicSpace, MeasureOnSpace, distance_at, local_log_integral, measure_at, values_of
from .transport import wasserstein

DEFAULT_BOUNDARY = 2


def mesh_tolerance(space: DynamicSpace, tol_scale: float = 1.0) -> float:
    return float(tol_scale) * space.spacing


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent stream for one trial, so scans are order independent."""
    return np.random.default_rng([int(seed), int(trial)])


# random test objects ----------------------------------------------------


def _diameter(space: DynamicSpace) -> float:
    return float(space.coords.max() - space.coords.min()) if space.kind == "grid" else float(space.n)


def smooth(space: DynamicSpace, t: float, xi, eps: float | None = None, k: int = 4) -> np.ndarray:
    """Apply ``(I - eps/k Delta_t)^{-k}``, a frozen-time heat smoothing of ``xi``."""
    if eps is None:
        eps = (0.05 * _diameter(space)) ** 2
    a = (sparse.identity(space.n) - (eps / k) * generator_at(space, t)).tocsc()
    lu = splu(a)
    x = np.asarray(xi, dtype=float)
    for _ in range(k):
        x = lu.solve(x)
    return x


def random_field(space: DynamicSpace, t: float, rng: np.random.Generator, eps: float | None = None) -> np.ndarray:
    """Smoothed white noise, centred and scaled to ``max Gamma_t(u) = 1``.

    Without ``eps`` the smoothing length is drawn log-uniformly between 2% and
    50% of the diameter, so both rough and nearly affine fields are sampled.
    """
    if eps is None:
        eps = (_diameter(space) * 10.0 ** rng.uniform(-1.7, -0.3)) ** 2
    u = smooth(space, t, rng.standard_normal(space.n), eps)
    u -= u.mean()
    top = gamma_at(space, t, u).max()
    return u / math.sqrt(top) if top > 0 else u


def random_density(
    space: DynamicSpace, t: float, rng: np.random.Generator, boundary_width: int = DEFAULT_BOUNDARY
) -> np.ndarray:
    """Nonnegative smoothed bump vanishing near the ends, with ``sum g m_t = 1``."""
    x = space.coords
    interior = np.flatnonzero(~space.boundary_mask(boundary_width))
    if interior.size == 0:
        interior = np.arange(space.n)
    centre = x[rng.choice(interior)]
    width = _diameter(space) * rng.uniform(0.02, 0.2)
    g = smooth(space, t, rng.exponential(size=space.n)) * np.exp(-0.5 * ((x - centre) / width) ** 2)
    g[space.boundary_mask(boundary_width)] = 0.0
    g = np.clip(g, 0.0, None)
    total = np.sum(g * measure_at(space, t).masses)
    return g / total


def random_measure(space: DynamicSpace, rng: np.random.Generator, kind: str = "bump") -> MeasureOnSpace:
    """Random probability measure: a truncated Gaussian bump or a Dirac mass."""
    if kind == "dirac":
        return MeasureOnSpace.dirac(space.n, int(rng.integers(space.n)))
    if kind != "bump":
        raise InvalidParameter(f"unknown measure kind {kind!r}")
    x = space.coords
    diam = _diameter(space)
    centre = rng.uniform(x.min() + 0.2 * diam, x.max() - 0.2 * diam)
    width = diam * rng.uniform(0.02, 0.08)
    z = (x - centre) / width
    w = np.where(np.abs(z) <= 3.0, np.exp(-0.5 * z**2), 0.0)
    if w.sum() == 0:
        w[np.argmin(np.abs(z))] = 1.0
    return MeasureOnSpace.probability(w)


# reporting helpers ------------------------------------------------------


def _interior(space: DynamicSpace, boundary_width: int) -> np.ndarray:
    mask = ~space.boundary_mask(boundary_width)
    return mask if mask.any() else np.ones(space.n, dtype=bool)


def _field_report(name, field, space, tolerance, params, boundary_width, extra=None) -> CheckReport:
    inner = _interior(space, boundary_width)
    idx = np.flatnonzero(inner)
    k = idx[np.argmin(field[inner])]
    outer = ~inner
    details = {
        "boundary_slack": float(field[outer].min()) if outer.any() else None,
        "boundary_width": boundary_width,
    }
    details.update(extra or {})
    return CheckReport(
        name, float(field[k]), {"vertex": int(k), "x": float(space.coords[k])}, float(tolerance), params,
        details=details,
    )


def _worst(reports, name, params, extra=None) -> CheckReport:
    # smallest pass margin, so per-trial tolerances are respected
    worst_k = min(range(len(reports)), key=lambda k: reports[k].slack + reports[k].tolerance)
    worst = reports[worst_k]
    details = {
        "trial_slacks": [r.slack for r in reports],
        "worst_trial": worst_k,
        "boundary_slack": min(
            (r.details.get("boundary_slack") for r in reports if r.details.get("boundary_slack") is not None),
            default=None,
        ),
    }
    details.update(extra or {})
    location = dict(worst.location) if isinstance(worst.location, dict) else {"at": worst.location}
    location["trial"] = worst_k
    return CheckReport(name, worst.slack, location, worst.tolerance, params, details=details)


def observed_order(mesh, defects, floor: float = 1e-12):
    """Least-squares slope of ``log defect`` against ``log mesh``.

    Returns ``math.inf`` when every defect is below ``floor`` (nothing to decay).
    """
    mesh = np.asarray(mesh, dtype=float)
    defects = np.asarray(defects, dtype=float)
    if np.all(defects <= floor):
        return math.inf
    keep = defects > floor
    if keep.sum() < 2:
        return math.inf if defects[-1] <= floor else 0.0
    return float(np.polyfit(np.log(mesh[keep]), np.log(defects[keep]), 1)[0])


# gradient estimates -----------------------------------------------------


def _gradient_field(space, u, s, t, alpha, steps):
    u = values_of(u)
    P = propagator_matrix(space, s, t, steps).matrix
    lhs = gamma_at(space, t, P @ u) ** alpha
    rhs = P @ (gamma_at(space, s, u) ** alpha)
    return rhs - lhs


def gradient_estimate_check(
    space: DynamicSpace,
    u,
    s: float,
    t: float,
    alpha: float = 1.0,
    steps: int = 64,
    tolerance: float | None = None,
    tol_scale: float = 1.0,
    boundary_width: int = DEFAULT_BOUNDARY,
) -> CheckReport:
    """``P_{t,s}(Gamma_s(u)^alpha) - Gamma_t(P_{t,s} u)^alpha`` minimised over vertices."""
    if not 0.5 <= alpha <= 1.0:
        raise InvalidParameter(f"alpha must lie in [1/2, 1], got {alpha}")
    field = _gradient_field(space, u, s, t, alpha, steps)
    tol = mesh_tolerance(space, tol_scale) if tolerance is None else tolerance
    params = {"alpha": alpha, "s": s, "t": t, "steps": steps}
    return _field_report("gradient-estimate", field, space, tol, params, boundary_width)


def gradient_estimate_scan(
    space: DynamicSpace,
    s: float,
    t: float,
    alpha: float = 1.0,
    trials: int = 100,
    seed: int = 0,
    steps: int = 64,
    tolerance: float | None = None,
    tol_scale: float = 1.0,
    boundary_width: int = DEFAULT_BOUNDARY,
) -> CheckReport:
    if trials < 1:
        raise InvalidParameter("trials must be positive")
    reports = [
        gradient_estimate_check(space, random_field(space, s, trial_rng(seed, k)), s, t, alpha, steps,
                                tolerance, tol_scale, boundary_width)
        for k in range(trials)
    ]
    params = {"alpha": alpha, "s": s, "t": t, "steps": steps, "trials": trials, "seed": seed}
    return _worst(reports, "gradient-estimate-scan", params)


# transport estimates ----------------------------------------------------


def transport_estimate_check(
    space: DynamicSpace,
    mu,
    nu,
    s: float,
    t: float,
    p: float = 2.0,
    steps: int = 64,
    tolerance: float | None = None,
    rel_tol: float = 1e-6,
) -> CheckReport:
    """``W_{p,t}(mu, nu) - W_{p,s}(dual flow of mu, dual flow of nu)``."""
    w_t = wasserstein(distance_at(space, t), p, mu, nu)
    mu_s = dual_propagate(space, mu, t, s, steps)
    nu_s = dual_propagate(space, nu, t, s, steps)
    w_s = wasserstein(distance_at(space, s), p, mu_s, nu_s)
    tol = rel_tol * max(w_t, 1e-12) if tolerance is None else tolerance
    params = {"p": p, "s": s, "t": t, "steps": steps}
    return CheckReport(
        "transport-estimate", w_t - w_s, {"s": s, "t": t}, tol, params, details={"w_t": w_t, "w_s": w_s}
    )


def transport_estimate_scan(
    space: DynamicSpace,
    s: float,
    t: float,
    p: float = 2.0,
    trials: int = 20,
    seed: int = 0,
    steps: int = 64,
    kind: str = "bump",
    rel_tol: float = 1e-6,
) -> CheckReport:
    if trials < 1:
        raise InvalidParameter("trials must be positive")
    reports = []
    for k in range(trials):
        rng = trial_rng(seed, k)
        mu, nu = random_measure(space, rng, kind), random_measure(space, rng, kind)
        reports.append(transport_estimate_check(space, mu, nu, s, t, p, steps, rel_tol=rel_tol))
    params = {"p": p, "s": s, "t": t, "steps": steps, "trials": trials, "seed": seed, "kind": kind}
    worst = _worst(reports, "transport-estimate-scan", params)
    worst.details["all_pass"] = all(r.passed for r in reports)
    worst.details["w_t"] = [r.details["w_t"] for r in reports]
    return worst


# second order calculus --------------------------------------------------


def hessian(space: DynamicSpace, t: float, u, g, h) -> np.ndarray:
    """``H_t[u](g, h)`` assembled from the carre du champ."""
    u, g, h = values_of(u), values_of(g), values_of(h)
    return 0.5 * (
        gamma_at(space, t, g, gamma_at(space, t, u, h))
        + gamma_at(space, t, h, gamma_at(space, t, u, g))
        - gamma_at(space, t, u, gamma_at(space, t, g, h))
    )


def gamma2(space: DynamicSpace, t: float, u, g, form: str = "weak") -> float:
    """``Gamma_2(u)`` tested against ``g``.

    ``form="weak"`` uses ``-1/2 Gamma(Gamma(u), g)``; ``form="laplacian"`` moves
    the derivative onto ``g`` as ``1/2 Gamma(u) Delta g``. Both agree up to rounding.
    """
    u, g = values_of(u), values_of(g)
    m = measure_at(space, t).masses
    lu = laplacian_at(space, t, u)
    gam = gamma_at(space, t, u)
    common = g * lu**2 + gamma_at(space, t, g, u) * lu
    if form == "weak":
        first = -0.5 * gamma_at(space, t, gam, g)
    elif form == "laplacian":
        first = 0.5 * gam * laplacian_at(space, t, g)
    else:
        raise InvalidParameter(f"unknown form {form!r}")
    return float(np.sum((first + common) * m))


def gamma2_density(space: DynamicSpace, t: float, u) -> np.ndarray:
    """Pointwise ``1/2 Delta Gamma(u) - Gamma(u, Delta u)``."""
    u = values_of(u)
    return 0.5 * laplacian_at(space, t, gamma_at(space, t, u)) - gamma_at(space, t, u, laplacian_at(space, t, u))


def _bochner_slack(space, t, u, g, rate):
    m = measure_at(space, t).masses
    lhs = gamma2(space, t, u, g, form="laplacian")
    rhs = 0.5 * float(np.sum(rate * g * m))
    return lhs - rhs, lhs, rhs


def bochner_check(
    space: DynamicSpace,
    t: float,
    u,
    g,
    delta: float = 1e-4,
    tolerance: float | None = None,
    tol_scale: float = 1.0,
    boundary_width: int = DEFAULT_BOUNDARY,
    rate: str = "analytic",
) -> CheckReport:
    """Pointwise dynamic Bochner inequality tested with ``g >= 0``.

    The slack is linear in ``g``; the thresholded value uses ``g`` restricted
    to interior vertices and the boundary part is reported separately.
    ``rate="analytic"`` differentiates the conductances exactly, ``"central"``
    uses a symmetric difference with step ``delta``.
    """
    u, g = values_of(u), values_of(g)
    if np.any(g < -1e-14 * max(1.0, np.abs(g).max())):
        raise InvalidTestFunction("test function g must be nonnegative")
    if rate == "analytic":
        dgam = gamma_rate(space, t, u)
    elif rate == "central":
        space.check_time(t - delta)
        space.check_time(t + delta)
        dgam = (gamma_at(space, t + delta, u) - gamma_at(space, t - delta, u)) / (2 * delta)
    else:
        raise InvalidParameter(f"unknown rate {rate!r}")
    inner = _interior(space, boundary_width)
    m = measure_at(space, t).masses
    slack, lhs, rhs = _bochner_slack(space, t, u, np.where(inner, g, 0.0), dgam)
    g_out = np.where(inner, 0.0, g)
    boundary = _bochner_slack(space, t, u, g_out, dgam)[0] if g_out.any() else None
    g_l1 = float(np.sum(np.abs(g) * m))
    tol = mesh_tolerance(space, tol_scale) * g_l1 if tolerance is None else tolerance
    params = {"t": t, "delta": delta, "rate": rate}
    return CheckReport(
        "bochner", slack, {"t": t, "g_peak": int(np.argmax(g))}, tol, params,
        details={"lhs": lhs, "rhs": rhs, "g_l1": g_l1, "boundary_slack": boundary,
                 "boundary_width": boundary_width},
    )


def bochner_scan(
    space: DynamicSpace,
    t: float,
    trials: int = 200,
    seed: int = 0,
    tolerance: float | None = None,
    tol_scale: float = 1.0,
    boundary_width: int = DEFAULT_BOUNDARY,
    rate: str = "analytic",
    include_witness: bool = True,
) -> CheckReport:
    """Minimum Bochner slack over random ``(u, g)``; the minimiser is kept as witness."""
    if trials < 1:
        raise InvalidParameter("trials must be positive")
    reports, pairs = [], []
    for k in range(trials):
        rng = trial_rng(seed, k)
        u = random_field(space, t, rng)
        g = random_density(space, t, rng, boundary_width)
        pairs.append((u, g))
        reports.append(bochner_check(space, t, u, g, tolerance=tolerance, tol_scale=tol_scale,
                                     boundary_width=boundary_width, rate=rate))
    params = {"t": t, "trials": trials, "seed": seed, "rate": rate}
    worst = _worst(reports, "bochner-scan", params)
    if include_witness:
        u, g = pairs[worst.details["worst_trial"]]
        worst.details["witness"] = {"u": u, "g": g}
    return worst


def self_improvement_check(
    space: DynamicSpace,
    t: float,
    u,
    delta: float = 1e-4,
    tolerance: float | None = None,
    tol_scale: float = 1.0,
    boundary_width: int = DEFAULT_BOUNDARY,
) -> CheckReport:
    """``4 (gamma_2(u) - 1/2 dGamma(u)) Gamma(u) - Gamma(Gamma(u))`` minimised over vertices.

    Graphs lack the chain rule behind this inequality, so it is a continuum-limit
    diagnostic: expect an ``O(dx)`` defect, not exact validity.
    """
    u = values_of(u)
    gam = gamma_at(space, t, u)
    field = 4.0 * (gamma2_density(space, t, u) - 0.5 * gamma_rate(space, t, u)) * gam - gamma_at(space, t, gam)
    tol = mesh_tolerance(space, tol_scale) if tolerance is None else tolerance
    return _field_report("self-improvement", field, space, tol, {"t": t, "delta": delta}, boundary_width)


def gamma_scaling_check(space: DynamicSpace, u, s: float, t: float, tolerance: float = 1e-10) -> CheckReport:
    """Deviation of ``Gamma_t(u)`` from ``Gamma_s(u) exp(-2 int_s^t H)``; slack is minus the deviation."""
    params = {"s": s, "t": t}
    if not space.static_weight:
        return CheckReport("gamma-scaling", math.nan, None, tolerance, params, status="inapplicable",
                           details={"reason": "weight depends on time"})
    u = values_of(u)
    lo, hi = min(s, t), max(s, t)
    sign = 1.0 if s <= t else -1.0
    factor = np.exp(-2.0 * sign * local_log_integral(space, lo, hi))
    dev = np.abs(gamma_at(space, t, u) - gamma_at(space, s, u) * factor)
    k = int(np.argmax(dev))
    return CheckReport("gamma-scaling", -float(dev[k]), {"vertex": k}, tolerance, params,
                       details={"max_deviation": float(dev[k])})


def kuwada_cross_check(
    space: DynamicSpace,
    s: float,
    t: float,
    p: float,
    beta: float,
    trials: int = 10,
    seed: int = 0,
    steps: int = 64,
    tol_scale: float = 1.0,
    rel_tol: float = 1e-6,
    boundary_width: int = DEFAULT_BOUNDARY,
) -> CheckReport:
    """Gradient estimate with exponent ``beta`` against the transport estimate at the conjugate ``p``.

    The gradient side compares ``|grad P u|^beta`` with ``P |grad u|^beta``, i.e.
    Gamma-powers with ``alpha = beta / 2``. The check fails only when every
    gradient trial passes while some transport trial fails; otherwise the
    implication is vacuous and the report is inconclusive.
    """
    if math.isinf(p):
        conj = 1.0 / beta
    elif math.isinf(beta):
        conj = 1.0 / p
    else:
        conj = 1.0 / p + 1.0 / beta
    if abs(conj - 1.0) > 1e-12 or p < 1 or beta < 1:
        raise InvalidParameter(f"p={p} and beta={beta} are not Hoelder conjugate")
    if math.isinf(beta):
        raise InvalidParameter("beta = inf (p = 1) has no gradient counterpart")
    alpha = beta / 2.0
    grad, trans = [], []
    tol = mesh_tolerance(space, tol_scale)
    for k in range(trials):
        rng = trial_rng(seed, k)
        field = _gradient_field(space, random_field(space, s, rng), s, t, alpha, steps)
        grad.append(float(field[_interior(space, boundary_width)].min()))
        mu, nu = random_measure(space, rng), random_measure(space, rng)
        trans.append(transport_estimate_check(space, mu, nu, s, t, p, steps, rel_tol=rel_tol))
    grad_ok = all(g >= -tol for g in grad)
    trans_ok = all(r.passed for r in trans)
    params = {"p": p, "beta": beta, "alpha": alpha, "s": s, "t": t, "trials": trials, "seed": seed}
    details = {"gradient_slacks": grad, "transport_slacks": [r.slack for r in trans],
               "gradient_pass": grad_ok, "transport_pass": trans_ok}
    worst = min(trans, key=lambda r: r.slack + r.tolerance)
    if not grad_ok:
        return CheckReport("kuwada", math.nan, None, worst.tolerance, params, status="inconclusive",
                           details={**details, "reason": "gradient estimate fails; no implication to test"})
    return CheckReport("kuwada", worst.slack, worst.location, worst.tolerance, params, details=details)


__all__ = [
    "DEFAULT_BOUNDARY",
    "mesh_tolerance",
    "trial_rng",
    "smooth",
    "random_field",
    "random_density",
    "random_measure",
    "observed_order",
    "gradient_estimate_check",
    "gradient_estimate_scan",
    "transport_estimate_check",
    "transport_estimate_scan",
    "hessian",
    "gamma2",
    "gamma2_density",
    "bochner_check",
    "bochner_scan",
    "self_improvement_check",
    "gamma_scaling_check",
    "kuwada_cross_check",
]
