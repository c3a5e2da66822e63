import math

import numpy as np
import pytest

from srflab.errors import InvalidGrid, InvalidInput, InvalidParameter
from srflab.examples import flat_grid, gaussian_base, homothetic, two_point_space, wandering_gaussian
from srflab.heat import dual_propagate, heat_kernel, propagator_matrix
from srflab.space import MeasureOnSpace, distance_at, measure_at
from srflab.stochastic import (
    PathEnsemble,
    contraction_stats,
    coupling_kernel,
    dyadic_coupling_step,
    dyadic_times,
    kolmogorov_scaling,
    sample_backward_bm,
    sample_coupled_bm,
    transition_matrix,
)
from srflab.transport import wasserstein_inf


def tv(a, b):
    return 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum()


def empirical(states, n):
    return np.bincount(states, minlength=n) / states.size


class TestBackwardBM:
    def test_single_time(self):
        sp = wandering_gaussian(R=2, n=5)
        law = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
        ens = sample_backward_bm(sp, law, [0.5], 20000, seed=3)
        freq = empirical(ens.paths[:, 0], 5)
        assert np.all(np.abs(freq - law) <= 3 * np.sqrt(law * (1 - law) / 20000))

    def test_two_point_transition(self):
        sp = two_point_space()
        N = 100_000
        ens = sample_backward_bm(sp, MeasureOnSpace.dirac(2, 0), [1.0, 0.0], N, steps=4096, seed=1)
        p = (1 - math.exp(-2)) / 2
        assert abs(np.mean(ens.paths[:, 1] == 1) - p) <= 3 * math.sqrt(p * (1 - p) / N)

    def test_marginal_law(self):
        sp = wandering_gaussian(R=2, n=20)
        x = sp.coords
        terminal = MeasureOnSpace.probability(np.exp(-x**2))
        times = np.linspace(0.9, 0.1, 9)
        N = 10_000
        ens = sample_backward_bm(sp, terminal, times, N, steps=8, seed=0)
        target = dual_propagate(sp, terminal, 0.9, 0.1, 64).masses
        assert tv(empirical(ens.paths[:, -1], 20), target) <= 3 * math.sqrt(20 / N)

    def test_reproducible(self):
        sp = wandering_gaussian(R=2, n=15)
        a = sample_backward_bm(sp, MeasureOnSpace.dirac(15, 7), [0.8, 0.5, 0.2], 200, seed=4)
        b = sample_backward_bm(sp, MeasureOnSpace.dirac(15, 7), [0.8, 0.5, 0.2], 200, seed=4)
        assert np.array_equal(a.paths, b.paths)

    def test_errors(self):
        sp = two_point_space()
        with pytest.raises(InvalidGrid):
            sample_backward_bm(sp, [1.0, 0.0], [0.2, 0.5], 10)
        with pytest.raises(InvalidGrid):
            sample_backward_bm(sp, [1.0, 0.0], [2.0, 0.5], 10)

    def test_csv(self, tmp_path):
        sp = two_point_space()
        ens = sample_backward_bm(sp, [1.0, 0.0], [1.0, 0.5], 3, seed=0)
        ens.to_csv(tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "path_id,time,vertex1" and len(lines) == 7
        assert lines[1] == "0,1.0,0"


class TestCouplingKernel:
    def test_diagonal(self):
        sp = wandering_gaussian(R=2, n=21)
        plan = coupling_kernel(sp, 0.6, 0.5, 7, 7)
        assert np.count_nonzero(plan.joint - np.diag(np.diag(plan.joint))) == 0
        assert plan.meta["excess"] == 0.0

    def test_independent(self):
        sp = wandering_gaussian(R=2, n=21)
        plan = coupling_kernel(sp, 0.6, 0.5, 3, 9, "independent")
        q = transition_matrix(sp, 0.6, 0.5)
        assert np.array_equal(plan.joint, np.outer(q[3], q[9]))
        assert plan.marginal_error() <= 1e-15

    def test_two_point_brute_force(self):
        # couplings of two 2-atom laws form a one-parameter segment
        sp = two_point_space()
        plan = coupling_kernel(sp, 0.8, 0.3, 0, 1, "winf", steps=16)
        q = transition_matrix(sp, 0.8, 0.3, 16)
        a, b = q[0], q[1]
        d = distance_at(sp, 0.3)
        best = math.inf
        lo, hi = max(0.0, a[0] - b[1]), min(a[0], b[0])
        for m00 in np.linspace(lo, hi, 2001):
            joint = np.array([[m00, a[0] - m00], [b[0] - m00, a[1] - b[0] + m00]])
            best = min(best, d[joint > 1e-12].max())
        assert plan.support_max(d) == pytest.approx(best)
        assert plan.marginal_error() <= 1e-9

    @pytest.mark.parametrize("mode", ["winf", "wp"])
    def test_marginals_and_optimality(self, mode):
        sp = homothetic(gaussian_base(R=2, n=31), 0.3)
        plan = coupling_kernel(sp, 0.7, 0.6, 10, 18, mode)
        q = transition_matrix(sp, 0.7, 0.6)
        assert np.abs(plan.joint.sum(axis=1) - q[10]).max() <= 1e-9
        assert np.abs(plan.joint.sum(axis=0) - q[18]).max() <= 1e-9
        if mode == "winf":
            d = distance_at(sp, 0.6)
            assert plan.support_max(d) == wasserstein_inf(d, q[10], q[18])[0]

    @pytest.mark.parametrize("mode", ["winf", "wp"])
    def test_monotone_matches_lp_on_line(self, mode):
        sp = homothetic(gaussian_base(R=2, n=31), 0.3)
        d = distance_at(sp, 0.6)
        lp = coupling_kernel(sp, 0.7, 0.6, 10, 18, mode, method="lp")
        mono = coupling_kernel(sp, 0.7, 0.6, 10, 18, mode, method="monotone")
        if mode == "winf":
            assert mono.support_max(d) == pytest.approx(lp.support_max(d), rel=1e-12)
        else:
            assert mono.cost_under(d, 2) == pytest.approx(lp.cost_under(d, 2), rel=1e-9)

    def test_errors(self):
        sp = two_point_space()
        with pytest.raises(InvalidParameter):
            coupling_kernel(sp, 0.6, 0.5, 0, 1, "greedy")
        with pytest.raises(ValueError):
            coupling_kernel(sp, 0.5, 0.6, 0, 1)


class TestDyadic:
    def test_grid(self):
        assert np.allclose(dyadic_times(1.0, 2), [1.0, 0.75, 0.5, 0.25, 0.0])
        with pytest.raises(InvalidGrid):
            dyadic_times(1.0, -1)

    def test_adjacent_is_one_step(self):
        sp = wandering_gaussian(R=2, n=9)
        a = dyadic_coupling_step(sp, 2, 0.75, 0.5, 2, 6)
        b = coupling_kernel(sp, 0.75, 0.5, 2, 6)
        assert np.allclose(a.joint, b.joint, atol=1e-15, rtol=0)

    def test_composition(self):
        sp = wandering_gaussian(R=1, n=5)
        x, y = 1, 3
        first = dyadic_coupling_step(sp, 2, 1.0, 0.5, x, y)
        composed = np.zeros((5, 5))
        for a, b in zip(*np.nonzero(first.joint)):
            composed += first.joint[a, b] * dyadic_coupling_step(sp, 2, 0.5, 0.0, a, b).joint
        direct = dyadic_coupling_step(sp, 2, 1.0, 0.0, x, y)
        assert np.abs(composed - direct.joint).max() <= 1e-10

    def test_marginals_after_four_steps(self):
        sp = wandering_gaussian(R=1, n=7)
        plan = dyadic_coupling_step(sp, 2, 1.0, 0.0, 1, 5, steps=8)
        P = propagator_matrix(sp, 0.0, 1.0, 32).matrix
        assert np.abs(plan.joint.sum(axis=1) - P[1]).max() <= 1e-8
        assert np.abs(plan.joint.sum(axis=0) - P[5]).max() <= 1e-8
        ker = heat_kernel(sp, 0.0, 1.0, 32).values * measure_at(sp, 0.0).masses
        assert np.abs(ker[1] - P[1]).max() <= 1e-12

    def test_non_dyadic(self):
        sp = wandering_gaussian(R=1, n=5)
        with pytest.raises(InvalidGrid):
            dyadic_coupling_step(sp, 2, 1.0, 0.3, 0, 1)


class TestCoupledBM:
    def test_diagonal_start(self):
        sp = wandering_gaussian(R=2, n=21)
        ens = sample_coupled_bm(sp, 10, 10, dyadic_times(1.0, 3), 500, "winf", seed=1)
        assert np.array_equal(ens.paths[..., 0], ens.paths[..., 1])
        assert contraction_stats(ens, sp).details["violation_fraction"] == 0.0

    @pytest.mark.parametrize("mode", ["winf", "independent"])
    def test_component_marginal(self, mode):
        sp = wandering_gaussian(R=2, n=20)
        times = dyadic_times(1.0, 3)
        N = 10_000
        ens = sample_coupled_bm(sp, 5, 14, times, N, mode, seed=2)
        single = sample_backward_bm(sp, MeasureOnSpace.dirac(20, 5), times, N, seed=3)
        bound = 3 * math.sqrt(20 / N)
        assert tv(empirical(ens.paths[:, -1, 0], 20), empirical(single.paths[:, -1], 20)) <= bound
        exact = dual_propagate(sp, MeasureOnSpace.dirac(20, 14), 1.0, 0.0, 64).masses
        assert tv(empirical(ens.paths[:, -1, 1], 20), exact) <= bound

    def test_reproducible_and_csv(self, tmp_path):
        sp = homothetic(gaussian_base(R=2, n=21), 0.25)
        a = sample_coupled_bm(sp, 4, 15, dyadic_times(1.0, 2), 50, seed=8)
        b = sample_coupled_bm(sp, 4, 15, dyadic_times(1.0, 2), 50, seed=8)
        assert np.array_equal(a.paths, b.paths)
        a.to_csv(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "path_id,time,vertex1,vertex2"

    def test_grid_errors(self):
        sp = wandering_gaussian(R=2, n=11)
        with pytest.raises(InvalidGrid):
            sample_coupled_bm(sp, 1, 2, [1.0, 0.7, 0.0], 10)
        with pytest.raises(InvalidGrid):
            sample_coupled_bm(sp, 1, 2, np.linspace(1, 0, 4), 10)

    def test_lp_and_monotone_paths_agree_in_law(self):
        sp = homothetic(gaussian_base(R=2, n=21), 0.25)
        times = dyadic_times(1.0, 2)
        a = sample_coupled_bm(sp, 6, 14, times, 4000, "winf", seed=5, method="lp")
        b = sample_coupled_bm(sp, 6, 14, times, 4000, "winf", seed=5, method="monotone")
        gap = np.abs(a.paths[:, -1, 1] - a.paths[:, -1, 0]).mean() - np.abs(b.paths[:, -1, 1] - b.paths[:, -1, 0]).mean()
        assert abs(gap) < 0.5


class TestContraction:
    def test_independent_control(self):
        sp = flat_grid(R=2, n=41)
        ens = sample_coupled_bm(sp, 15, 25, dyadic_times(1.0, 4), 2000, "independent", seed=0)
        rep = contraction_stats(ens, sp)
        assert rep.details["violation_fraction"] > 0.1

    def test_winf_homothetic(self):
        sp = homothetic(gaussian_base(R=4, n=100), 0.25)
        ens = sample_coupled_bm(sp, 44, 56, dyadic_times(1.0, 4), 2000, "winf", seed=0)
        rep = contraction_stats(ens, sp)
        assert rep.passed
        assert len(rep.details["per_time_fraction"]) == 17

    def test_uncoupled(self):
        sp = two_point_space()
        with pytest.raises(InvalidInput):
            contraction_stats(sample_backward_bm(sp, [1.0, 0.0], [1.0, 0.5], 5), sp)


class TestKolmogorov:
    def test_frozen_degenerate(self):
        sp = flat_grid(R=1, n=11)
        times = dyadic_times(1.0, 3)
        frozen = PathEnsemble(times, np.full((10, times.size), 5), 0, 8)
        rep = kolmogorov_scaling(frozen, sp)
        assert rep.status == "degenerate" and not rep.passed

    @pytest.mark.parametrize("p", [2.0, 4.0])
    def test_flat(self, p):
        sp = flat_grid(R=4, n=201)
        ens = sample_backward_bm(sp, MeasureOnSpace.dirac(201, 100), dyadic_times(1.0, 6), 10_000, seed=0)
        rep = kolmogorov_scaling(ens, sp, p)
        assert rep.passed, rep.details["slope"]

    def test_wandering_gaussian_p4(self):
        sp = wandering_gaussian(R=4, n=201)
        ens = sample_backward_bm(sp, MeasureOnSpace.dirac(201, 100), dyadic_times(1.0, 6), 10_000, seed=0)
        rep = kolmogorov_scaling(ens, sp, 4.0)
        assert abs(rep.details["slope"] - 2.0) <= 0.3

    def test_errors(self):
        sp = two_point_space()
        with pytest.raises(InvalidGrid):
            kolmogorov_scaling(sample_backward_bm(sp, [1.0, 0.0], [1.0, 0.5, 0.0], 5), sp)
        coupled = sample_coupled_bm(sp, 0, 1, dyadic_times(1.0, 2), 5)
        with pytest.raises(InvalidInput):
            kolmogorov_scaling(coupled, sp)
