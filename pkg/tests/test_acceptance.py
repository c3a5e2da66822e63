"""Acceptance criteria 1-10 at their stated tolerances; each records one PASS/FAIL line."""

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from oracles import brute_force_wp, line_metric, random_simplex
from srflab.cli import main, suite_heat
from srflab.config import DEFAULTS
from srflab.examples import (
    constant_rate,
    flat_grid,
    gaussian_base,
    homothetic,
    two_point_space,
    violating_flow,
    wandering_gaussian,
)
from srflab.heat import dual_propagate, propagate, propagator_matrix
from srflab.space import MeasureOnSpace, distance_at
from srflab.stochastic import (
    contraction_stats,
    dyadic_times,
    kolmogorov_scaling,
    sample_backward_bm,
    sample_coupled_bm,
)
from srflab.transport import dynamic_convexity_check, wasserstein, wasserstein_inf, wasserstein_p
from srflab.verify import (
    bochner_check,
    bochner_scan,
    gamma_scaling_check,
    gradient_estimate_scan,
    observed_order,
    random_field,
    transport_estimate_scan,
    trial_rng,
)

pytestmark = pytest.mark.slow

K = 0.25


def nearest(space, x):
    return int(np.argmin(np.abs(space.coords - x)))


def test_criterion_01_heat_algebra(tmp_path, criterion):
    start = time.perf_counter()
    space = wandering_gaussian(R=4, n=50)
    reports = {r.name: r for r in suite_heat(space, DEFAULTS, tmp_path, 0)}
    elapsed = time.perf_counter() - start
    dev = {k: r.details.get("deviation") for k, r in reports.items()}
    ok = (dev["chapman-kolmogorov"] <= 1e-8 and dev["markov-normalization"] <= 1e-10
          and dev["duality"] <= 1e-10 and reports["integration-by-parts"].passed and elapsed < 5.0)
    summary = (f"CK {dev['chapman-kolmogorov']:.1e}, Markov {dev['markov-normalization']:.1e}, "
               f"duality {dev['duality']:.1e}, IBP {dev['integration-by-parts']:.1e}, {elapsed:.1f}s")
    assert criterion(1, ok, summary)


def _ladder_order(space, u, exact, scheme, ladder):
    errors = [np.abs(propagate(space, u, 0.0, 1.0, k, scheme) - exact).max() for k in ladder]
    return observed_order([1.0 / k for k in ladder], errors)


def test_criterion_02_propagator_accuracy(criterion):
    space = two_point_space()
    # unit masses and unit conductance: the generator swaps mass at rate 1
    exact = expm(np.array([[-1.0, 1.0], [1.0, -1.0]]))
    err = np.abs(propagator_matrix(space, 0.0, 1.0, 4096).matrix - exact).max()
    u = np.array([1.0, 0.0])
    ladder = [16, 32, 64, 128, 256]
    ie = _ladder_order(space, u, exact @ u, "implicit-euler", ladder)
    cn = _ladder_order(space, u, exact @ u, "crank-nicolson", ladder)
    ok = err <= 1e-3 and ie >= 0.9 and cn >= 1.8
    assert criterion(2, ok, f"error at 4096 steps {err:.1e}, order IE {ie:.2f}, CN {cn:.2f}")


def _simplex_grid(k):
    return [np.array([i, j, k - i - j]) / k for i in range(k + 1) for j in range(k + 1 - i)]


def test_criterion_03_transport_solver(criterion):
    rng = np.random.default_rng(2024)
    gap = 0.0
    for _ in range(10):
        d = line_metric(20, rng)
        a, b = random_simplex(rng, 20), random_simplex(rng, 20)
        for p in (1.0, 2.0, 4.0):
            plan = wasserstein_p(d, p, a, b)[1]
            gap = max(gap, plan.dual_gap / max(plan.cost_value, 1e-300))

    # three-point instances: every pair of marginals on a 1/6 simplex lattice, two metrics
    metrics = [np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], float),
               np.array([[0, 1, 1.5], [1, 0, 0.8], [1.5, 0.8, 0]], float)]
    brute = 0.0
    for d, a, b, p in itertools.product(metrics, _simplex_grid(6), _simplex_grid(6), (1.0, 2.0, 4.0, math.inf)):
        brute = max(brute, abs(wasserstein(d, p, a, b) - brute_force_wp(d, p, a, b)))

    mono = 0.0
    rel64 = 0.0
    for _ in range(10):
        d = line_metric(20, rng)
        a, b = random_simplex(rng, 20), random_simplex(rng, 20)
        ws = [wasserstein(d, p, a, b) for p in (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)]
        winf = wasserstein_inf(d, a, b)[0]
        mono = max(mono, max(x - y for x, y in zip(ws, [*ws[1:], winf])))
        rel64 = max(rel64, (winf - ws[-1]) / winf)
    ok = gap <= 1e-9 and brute <= 1e-10 and mono <= 1e-10 and rel64 <= 0.05
    summary = (f"duality gap {gap:.1e}*cost, polytope {brute:.1e}, monotonicity {mono:.1e}, "
               f"worst |W_inf - W_64|/W_inf {rel64:.3f}")
    assert criterion(3, ok, summary)


def _positive_suite(space, s, t):
    grads = [gradient_estimate_scan(space, s, t, a, 100, 0, 64) for a in (0.5, 0.75, 1.0)]
    trans = [transport_estimate_scan(space, s, t, p, 20, 0, 64) for p in (1.0, 2.0, 4.0, math.inf)]
    boch = bochner_scan(space, 0.5 * (s + t), 200, 0)
    return grads, trans, boch


def test_criterion_04_positive_suite(tmp_path, criterion):
    start = time.perf_counter()
    lines, ok = [], True
    for name, space in (("wandering-gaussian", wandering_gaussian(R=4, n=201)),
                        ("homothetic", homothetic(gaussian_base(R=4, n=200), K))):
        grads, trans, boch = _positive_suite(space, 0.2, 0.6)
        ok &= all(r.passed for r in grads) and all(r.details["all_pass"] for r in trans) and boch.passed
        lines.append(f"{name}: grad {min(r.slack for r in grads):.1e}, "
                     f"transport {min(r.slack for r in trans):.1e}, bochner {boch.slack:.1e}")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('[space]\nexample = "wandering-gaussian"\n[space.params]\nR = 4.0\nn = 201\n')
    main(["check-bochner", "--config", str(cfg), "--out", str(tmp_path / "r"), "--refine", "3"])
    trend = json.loads((tmp_path / "r" / "check-bochner.json").read_text())["trend"][0]
    elapsed = time.perf_counter() - start
    ok &= trend["tolerance_order"] >= 1.0 - 1e-9 and elapsed < 180
    lines.append(f"tol order {trend['tolerance_order']:.3f}, {elapsed:.0f}s")
    assert criterion(4, ok, "; ".join(lines))


def test_criterion_05_negative_control(criterion):
    space = violating_flow(c=1.0, n=101)
    boch = bochner_scan(space, 0.5, 200, 0)
    witness = bochner_check(space, 0.5, boch.details["witness"]["u"], boch.details["witness"]["g"])
    g_l1 = witness.details["g_l1"]
    grad = gradient_estimate_scan(space, 0.0, 1.0, 1.0, 100, 0, 64)
    ok = witness.slack == boch.slack and boch.slack < -0.01 * g_l1 and not grad.passed
    summary = f"bochner witness {boch.slack:.3f} vs -0.01*|g|_1 = {-0.01 * g_l1:.4f}, gradient slack {grad.slack:.2e}"
    assert criterion(5, ok, summary)


def test_criterion_06_scaling_identities(criterion):
    base = gaussian_base(R=4, n=200)
    flows = [homothetic(base, K), constant_rate(base, 0.7)]
    rng = trial_rng(6, 0)
    worst = 0.0
    for space in flows:
        u = random_field(space, 0.1, rng)
        for s, t in ((0.1, 0.9), (0.5, 0.2)):
            worst = max(worst, gamma_scaling_check(space, u, s, t).details["max_deviation"])
    d0 = distance_at(base, 0.0)
    dist = max(np.abs(distance_at(flows[0], t) - d0 * math.sqrt(1 - 2 * K * t)).max() for t in (0.0, 0.3, 0.9))
    ok = worst <= 1e-10 and dist <= 1e-10
    assert criterion(6, ok, f"gamma scaling {worst:.1e}, homothetic distance {dist:.1e}")


def test_criterion_07_coupled_contraction(criterion):
    start = time.perf_counter()
    fracs, ctrl = [], []
    for n in (50, 100, 200):
        space = homothetic(gaussian_base(R=4, n=n), K)
        times = dyadic_times(1.0, 6)
        x, y = nearest(space, -0.5), nearest(space, 0.5)
        fracs.append(contraction_stats(sample_coupled_bm(space, x, y, times, 10_000, "winf", seed=0), space)
                     .details["violation_fraction"])
        ctrl.append(contraction_stats(sample_coupled_bm(space, x, y, times, 10_000, "independent", seed=0), space)
                    .details["violation_fraction"])
    elapsed = time.perf_counter() - start
    decreasing = all(a > b for a, b in zip(fracs, fracs[1:]))
    control = all(c >= 10 * f and c > 0 for f, c in zip(fracs, ctrl))
    ok = max(fracs) <= 0.01 and decreasing and control and elapsed < 120
    summary = (f"winf fractions {fracs}, strictly decreasing {decreasing}, control {[round(c, 3) for c in ctrl]}, "
               f"{elapsed:.0f}s")
    assert criterion(7, ok, summary)


def test_criterion_08_kolmogorov_scaling(criterion):
    space = flat_grid(R=4, n=201)
    ens = sample_backward_bm(space, MeasureOnSpace.dirac(201, 100), dyadic_times(1.0, 6), 10_000, seed=0)
    reps = [kolmogorov_scaling(ens, space, p) for p in (2.0, 4.0)]
    ok = all(r.passed for r in reps)
    summary = ", ".join(f"p={r.params['p']:g} slope {r.details['slope']:.3f} (target {r.details['target']:g})"
                        for r in reps)
    assert criterion(8, ok, summary)


def test_criterion_09_marginal_law(criterion):
    space = wandering_gaussian(R=2, n=20)
    x = space.coords
    terminal = MeasureOnSpace.probability(np.exp(-x**2))
    N = 10_000
    ens = sample_backward_bm(space, terminal, [0.9, 0.5, 0.1], N, steps=64, seed=9)
    tvs = []
    for k, s in enumerate((0.5, 0.1)):
        target = dual_propagate(space, terminal, 0.9, s, 64 if k == 0 else 128).masses
        emp = np.bincount(ens.paths[:, k + 1], minlength=20) / N
        tvs.append(float(0.5 * np.abs(emp - target).sum()))
    bound = 3 * math.sqrt(20 / N)
    assert criterion(9, max(tvs) <= bound, f"TV {[round(v, 4) for v in tvs]} vs bound {bound:.4f}")


def test_criterion_10_dynamic_convexity(criterion):
    lines, ok = [], True
    for name, space in (("flat", flat_grid(R=4, n=201)), ("homothetic", homothetic(gaussian_base(R=4, n=200), K))):
        x = space.coords
        worst = math.inf
        for k in range(5):
            rng = trial_rng(10, k)
            pair = [MeasureOnSpace.probability(np.exp(-0.5 * ((x - rng.uniform(-2, 2)) / rng.uniform(0.3, 1.0)) ** 2))
                    for _ in range(2)]
            rep = dynamic_convexity_check(space, pair[0], pair[1], 0.5, da=0.05, dt_step=1e-3)
            ok &= rep.passed and len(rep.details["sensitivity"]) == 9
            worst = min(worst, rep.slack)
        lines.append(f"{name}: min slack {worst:.2e} (tol {rep.tolerance:.3f}, da 0.05, dt_step 1e-3)")
    assert criterion(10, ok, "; ".join(lines))
