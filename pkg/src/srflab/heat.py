"""Dirichlet forms, carré du champ, and the forward/adjoint/dual heat flows.

The generator at time ``t`` is

    (Delta_t u)(x) = (1 / m_t(x)) sum_y c_t(x, y) (u(y) - u(x)),

which is self-adjoint in ``L^2(m_t)`` and satisfies the discrete
integration-by-parts identity ``sum (Delta_t u) v m_t = -sum Gamma_t(u, v) m_t``.
Heat flows are time-stepped with the generator sampled at the right end of
each step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import BadInterval, InvalidMeasure, InvalidParameter, NumericalFailure
from .space import (
    DynamicSpace,
    MeasureOnSpace,
    conductance_at,
    edge_conductances,
    masses_of,
    measure_at,
    values_of,
)

SCHEMES = ("implicit-euler", "crank-nicolson")


def generator_at(space: DynamicSpace, t: float) -> sparse.csr_matrix:
    """Sparse matrix of ``Delta_t``."""
    t = space.check_time(t)
    key = ("generator", t)
    if key not in space._cache:
        c = conductance_at(space, t)
        m = measure_at(space, t).masses
        deg = np.asarray(c.sum(axis=1)).ravel()
        lap = sparse.diags(1.0 / m) @ (c - sparse.diags(deg))
        space._cache[key] = lap.tocsr()
    return space._cache[key]


def laplacian_at(space: DynamicSpace, t: float, u) -> np.ndarray:
    return generator_at(space, t) @ values_of(u)


def gamma_at(space: DynamicSpace, t: float, u, v=None) -> np.ndarray:
    """Carré du champ ``Gamma_t(u, v)``; ``v`` defaults to ``u``."""
    t = space.check_time(t)
    u = values_of(u)
    v = u if v is None else values_of(v)
    i, j = space.edges
    cij = edge_conductances(space, t)
    w = cij * ((u[j] - u[i]) * (v[j] - v[i]))  # increments first: exactly symmetric in (u, v)
    acc = np.bincount(i, weights=w, minlength=space.n) + np.bincount(j, weights=w, minlength=space.n)
    return acc / (2.0 * measure_at(space, t).masses)


def energy(space: DynamicSpace, t: float, u) -> float:
    """Dirichlet energy ``E_t(u) = sum Gamma_t(u) m_t``."""
    return float(np.sum(gamma_at(space, t, u) * measure_at(space, t).masses))


class GammaRate(NamedTuple):
    central: np.ndarray
    analytic: np.ndarray


def gamma_rate(space: DynamicSpace, t: float, u) -> np.ndarray:
    """Exact time derivative of ``Gamma_t(u)`` for fixed ``u``.

    Differentiates ``c_t / m_t`` edge by edge, using
    ``d/dt log(c_t(x, y) / m_t(x)) = (f'_t(x) - f'_t(y)) / 2 - 2 h_t(x, y)``.
    """
    t = space.check_time(t)
    u = values_of(u)
    if space.static_weight and space.static_metric:
        return np.zeros(space.n)
    i, j = space.edges
    fdot = space.weight_derivative(t)
    if space.static_metric:
        h = np.zeros(i.size)
    else:
        h = np.broadcast_to(np.asarray(space.log_derivative(t, space.coords[i], space.coords[j]), dtype=float), i.shape)
    cij = edge_conductances(space, t)
    du2 = (u[j] - u[i]) ** 2
    rate_i = 0.5 * (fdot[i] - fdot[j]) - 2 * h
    rate_j = 0.5 * (fdot[j] - fdot[i]) - 2 * h
    acc = np.bincount(i, weights=cij * rate_i * du2, minlength=space.n)
    acc += np.bincount(j, weights=cij * rate_j * du2, minlength=space.n)
    return acc / (2.0 * measure_at(space, t).masses)


def dt_gamma(space: DynamicSpace, t: float, u, delta: float = 1e-4) -> GammaRate:
    """Time derivative of ``Gamma_t(u)`` for a fixed function ``u``.

    ``central`` is the symmetric difference quotient over ``[t - delta, t + delta]``;
    ``analytic`` is :func:`gamma_rate`.
    """
    space.check_time(t - delta)
    space.check_time(t + delta)
    u = values_of(u)
    if space.static_weight and space.static_metric:
        zero = np.zeros(space.n)
        return GammaRate(zero, zero.copy())
    central = (gamma_at(space, t + delta, u) - gamma_at(space, t - delta, u)) / (2 * delta)
    return GammaRate(central, gamma_rate(space, t, u))


# time stepping -------------------------------------------------------------


def _check_interval(s: float, t: float, steps: int, scheme: str, allow_equal: bool = False):
    if scheme not in SCHEMES:
        raise InvalidParameter(f"unknown scheme {scheme!r}")
    if steps < 1:
        raise InvalidParameter("steps must be >= 1")
    if s > t or (s == t and not allow_equal):
        raise BadInterval(f"need s < t, got s={s}, t={t}")


def _step_factory(space: DynamicSpace, times: np.ndarray, scheme: str):
    """Yield ``(solve, rhs)`` callables for each step ``times[k] -> times[k+1]``."""
    eye = sparse.identity(space.n, format="csc")
    for k in range(len(times) - 1):
        tau = times[k + 1] - times[k]
        l_new = generator_at(space, times[k + 1])
        if scheme == "implicit-euler":
            lhs = eye - tau * l_new
            rhs = None
        else:
            lhs = eye - 0.5 * tau * l_new
            rhs = eye + 0.5 * tau * generator_at(space, times[k])
        try:
            lu = splu(lhs.tocsc())
        except RuntimeError as exc:  # singular factor
            raise NumericalFailure(str(exc)) from exc
        yield lu, rhs


def step_times(s: float, t: float, steps: int) -> np.ndarray:
    return s + (t - s) * np.arange(steps + 1) / steps


def propagate(space: DynamicSpace, u, s: float, t: float, steps: int = 64, scheme: str = "implicit-euler") -> np.ndarray:
    """Solve ``d/dt u = Delta_t u`` from ``u_s = u`` to time ``t``."""
    _check_interval(s, t, steps, scheme)
    space.check_time(s)
    space.check_time(t)
    x = np.array(values_of(u), dtype=float)
    for lu, rhs in _step_factory(space, step_times(s, t, steps), scheme):
        x = lu.solve(x if rhs is None else rhs @ x)
    return x


def trajectory(space: DynamicSpace, u, s: float, t: float, steps: int, scheme: str = "implicit-euler"):
    """Times and states ``u_k`` of the time-stepped heat flow."""
    _check_interval(s, t, steps, scheme)
    times = step_times(s, t, steps)
    states = [np.array(values_of(u), dtype=float)]
    for lu, rhs in _step_factory(space, times, scheme):
        x = states[-1]
        states.append(lu.solve(x if rhs is None else rhs @ x))
    return times, np.array(states)


@dataclass(frozen=True)
class Propagator:
    """Matrix of the map ``u_s -> u_t``; row ``x`` is the law of ``P_{t,s}(x, .)``."""

    matrix: np.ndarray
    s: float
    t: float
    steps: int
    scheme: str

    def __call__(self, u) -> np.ndarray:
        return self.matrix @ values_of(u)

    def to_csv(self, path) -> None:
        header = f"s={self.s!r},t={self.t!r},steps={self.steps},scheme={self.scheme}"
        np.savetxt(path, self.matrix, delimiter=",", header=header, comments="", fmt="%.17g")


def read_matrix_csv(path):
    """Read a matrix written by :meth:`Propagator.to_csv`; returns ``(meta, matrix)``."""
    with open(path) as fh:
        header = fh.readline().strip()
    meta = dict(item.split("=", 1) for item in header.split(","))
    return meta, np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def propagator_matrix(
    space: DynamicSpace, s: float, t: float, steps: int = 64, scheme: str = "implicit-euler"
) -> Propagator:
    _check_interval(s, t, steps, scheme, allow_equal=True)
    space.check_time(s)
    space.check_time(t)
    key = ("propagator", float(s), float(t), int(steps), scheme)
    if key in space._cache:
        return space._cache[key]
    x = np.eye(space.n)
    if s < t:
        for lu, rhs in _step_factory(space, step_times(s, t, steps), scheme):
            x = lu.solve(x if rhs is None else rhs @ x)
    x.setflags(write=False)
    prop = Propagator(x, float(s), float(t), int(steps), scheme)
    space._cache[key] = prop
    return prop


@dataclass(frozen=True)
class HeatKernel:
    """Kernel ``p_{t,s}(x, y)`` with respect to ``m_s``."""

    values: np.ndarray
    s: float
    t: float

    def markov_defect(self, m_s) -> float:
        return float(np.abs(self.values @ masses_of(m_s) - 1.0).max())

    def spatial_modulus(self, d, radii=None) -> dict:
        """Empirical continuity modulus in the first variable.

        ``modulus[k]`` is the largest ``|p(x, z) - p(y, z)|`` over ``0 < d(x, y) <= radii[k]``;
        ``exponent`` is the log-log slope, a descriptive number rather than a bound.
        """
        d = np.asarray(d, dtype=float)
        off = d[d > 0]
        if radii is None:
            radii = np.geomspace(off.min(), off.max(), 6)
        radii = np.unique(np.asarray(radii, dtype=float))
        jump = np.abs(self.values[:, None, :] - self.values[None, :, :]).max(axis=2)
        modulus = []
        for r in radii:
            near = (d > 0) & (d <= r * (1 + 1e-12))  # distances equal to r up to rounding count as within r
            modulus.append(float(jump[near].max()) if near.any() else 0.0)
        keep = np.asarray(modulus) > 0
        exponent = (float(np.polyfit(np.log(radii[keep]), np.log(np.asarray(modulus)[keep]), 1)[0])
                    if keep.sum() >= 2 else None)
        return {"radii": [float(r) for r in radii], "modulus": modulus, "exponent": exponent}


def heat_kernel(space: DynamicSpace, s: float, t: float, steps: int = 64) -> HeatKernel:
    prop = propagator_matrix(space, s, t, steps, "implicit-euler")
    m_s = measure_at(space, s).masses
    return HeatKernel(prop.matrix / m_s[None, :], float(s), float(t))


def adjoint_propagate(space: DynamicSpace, g, t: float, s: float, steps: int = 64) -> np.ndarray:
    """``P*_{t,s} g(y) = sum_x p_{t,s}(x, y) g(x) m_t(x)``."""
    if not s < t:
        raise BadInterval(f"need s < t, got s={s}, t={t}")
    prop = propagator_matrix(space, s, t, steps)
    m_t = measure_at(space, t).masses
    m_s = measure_at(space, s).masses
    return prop.matrix.T @ (values_of(g) * m_t) / m_s


def dual_propagate(
    space: DynamicSpace, mu, t: float, s: float, steps: int = 64, allow_subprobability: bool = False
) -> MeasureOnSpace:
    """Push a measure given at time ``t`` back to time ``s`` by the dual flow."""
    if not s < t:
        raise BadInterval(f"need s < t, got s={s}, t={t}")
    mass = masses_of(mu)
    total = mass.sum()
    if np.any(mass < 0) or (abs(total - 1.0) > 1e-12 and not (allow_subprobability and total <= 1.0 + 1e-12)):
        raise InvalidMeasure(f"expected a probability measure, total mass {total!r}")
    prop = propagator_matrix(space, s, t, steps)
    out = np.clip(prop.matrix.T @ mass, 0.0, None)
    return MeasureOnSpace(out, normalized=abs(out.sum() - 1.0) <= 1e-12)


def pstar_limit_check(space: DynamicSpace, u, g, t: float, h_seq, steps: int = 1) -> dict:
    """Difference quotients of ``int u g dm_t - int u P*_{t,t-h} g dm_{t-h}``.

    They converge to ``int Gamma_t(u, g) dm_t`` as ``h -> 0``.
    """
    u, g = values_of(u), values_of(g)
    h_seq = np.asarray(h_seq, dtype=float)
    space.check_time(t - h_seq.max())
    m_t = measure_at(space, t).masses
    target = float(np.sum(gamma_at(space, t, u, g) * m_t))
    quotients = []
    for h in h_seq:
        v = adjoint_propagate(space, g, t, t - h, steps)
        m_prev = measure_at(space, t - h).masses
        quotients.append((np.sum(u * g * m_t) - np.sum(u * v * m_prev)) / h)
    quotients = np.array(quotients)
    errors = np.abs(quotients - target)
    order = None
    if len(h_seq) > 1 and np.all(errors > 0):
        order = float(np.polyfit(np.log(h_seq), np.log(errors), 1)[0])
    return {"h": h_seq.tolist(), "quotients": quotients.tolist(), "target": target,
            "errors": errors.tolist(), "order": order}


def energy_estimate_check(
    space: DynamicSpace, u, s: float, tau: float, L: float, steps: int = 64, quadrature: str = "right"
) -> dict:
    """Slack of ``e^{-3Ls}E_s(u_s) - e^{-3L tau}E_tau(u_tau) - 2 int e^{-3Lt} |Delta_t u_t|^2 dm_t dt``.

    ``quadrature="right"`` samples the dissipation at the end of each implicit
    Euler step, which makes the discrete inequality exact whenever ``L``
    bounds the log-rates of the conductances; ``"trapezoid"`` is available for
    comparison.
    """
    if not s < tau:
        raise BadInterval(f"need s < tau, got s={s}, tau={tau}")
    times, states = trajectory(space, u, s, tau, steps)
    energies = np.array([energy(space, tk, uk) for tk, uk in zip(times, states)])
    dissip = np.array(
        [np.sum(laplacian_at(space, tk, uk) ** 2 * measure_at(space, tk).masses) for tk, uk in zip(times, states)]
    )
    weights = np.exp(-3 * L * times)
    dt = np.diff(times)
    if quadrature == "right":
        integral = np.sum(dt * (weights * dissip)[1:])
    elif quadrature == "trapezoid":
        wd = weights * dissip
        integral = np.sum(0.5 * dt * (wd[1:] + wd[:-1]))
    else:
        raise InvalidParameter(f"unknown quadrature {quadrature!r}")
    lhs = weights[-1] * energies[-1] + 2 * integral
    rhs = weights[0] * energies[0]
    return {"lhs": float(lhs), "rhs": float(rhs), "slack": float(rhs - lhs), "L": float(L),
            "steps": int(steps), "quadrature": quadrature}


def max_log_rate(space: DynamicSpace, times) -> float:
    """Sampled sup of ``|d/dt log c_t|`` over edges, the constant ``3L`` must dominate."""
    i, j = space.edges
    best = 0.0
    for t in times:
        fdot = space.weight_derivative(t)
        h = 0.0 if space.static_metric else np.asarray(space.log_derivative(t, space.coords[i], space.coords[j]))
        rate = -0.5 * (fdot[i] + fdot[j]) - 2 * h
        best = max(best, float(np.max(np.abs(rate))))
    return best


__all__ = [
    "GammaRate", "HeatKernel", "Propagator", "SCHEMES", "adjoint_propagate", "dt_gamma",
    "dual_propagate", "energy", "energy_estimate_check", "gamma_at", "gamma_rate", "generator_at",
    "heat_kernel", "laplacian_at", "max_log_rate", "propagate", "propagator_matrix",
    "pstar_limit_check", "read_matrix_csv", "step_times", "trajectory",
]
