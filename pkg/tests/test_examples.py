import math

import numpy as np
import pytest

from srflab.errors import InvalidHorizon, InvalidInput, InvalidParameter
from srflab.examples import (
    EXAMPLES,
    build_example,
    constant_rate,
    flat_grid,
    gaussian_base,
    homothetic,
    static_space,
    two_point_space,
    violating_flow,
    wandering_gaussian,
)
from srflab.heat import dt_gamma
from srflab.space import check_assumptions, conductance_at, distance_at, measure_at
from srflab.verify import (
    bochner_check,
    bochner_scan,
    gamma_scaling_check,
    gradient_estimate_scan,
    transport_estimate_scan,
)


class TestStatic:
    def test_freezes_weight(self):
        sp = static_space(wandering_gaussian(R=2, n=21))
        assert sp.static_weight and sp.static_metric
        assert np.array_equal(sp.weight(0.0), sp.weight(0.9))

    def test_checks_on_flat(self):
        sp = static_space(flat_grid(R=2, n=41))
        assert gradient_estimate_scan(sp, 0.2, 0.6, 1.0, trials=10).passed
        assert transport_estimate_scan(sp, 0.2, 0.6, 2.0, trials=3).passed
        assert bochner_scan(sp, 0.5, trials=20).passed

    def test_scaling_and_rate(self):
        sp = static_space(gaussian_base(R=2, n=21))
        u = np.sin(sp.coords)
        assert gamma_scaling_check(sp, u, 0.1, 0.8).slack == 0.0
        assert np.all(dt_gamma(sp, 0.5, u).central == 0)


class TestWanderingGaussian:
    def test_degenerate_coefficients_flat(self):
        sp = wandering_gaussian(lambda t: 0.0, lambda t: 0.0, lambda t: 0.0, R=2, n=21)
        flat = flat_grid(R=2, n=21)
        assert np.array_equal(conductance_at(sp, 0.4).toarray(), conductance_at(flat, 0.4).toarray())
        assert np.array_equal(measure_at(sp, 0.4).masses, measure_at(flat, 0.4).masses)

    def test_formula(self):
        sp = wandering_gaussian(R=4, n=201)
        t = 0.7
        x = sp.coords
        assert np.allclose(sp.weight(t), (x * (1 + t / 2)) ** 2 + x * math.sin(t), rtol=1e-15, atol=0)
        assert sp.static_metric and not sp.static_weight

    def test_bochner_scan(self):
        assert bochner_scan(wandering_gaussian(R=4, n=101), 0.5, trials=30).passed


class TestHomothetic:
    def test_zero_is_static(self):
        base = gaussian_base(R=2, n=21)
        a, b = homothetic(base, 0.0), static_space(base)
        for t in (0.0, 0.5, 1.0):
            assert np.array_equal(distance_at(a, t), distance_at(b, t))
            assert np.array_equal(measure_at(a, t).masses, measure_at(b, t).masses)
        assert a.static_metric and a.static_weight

    def test_distance(self):
        K = 0.45
        sp = homothetic(gaussian_base(R=2, n=21), K)
        for t in np.linspace(0, sp.horizon[1], 7):
            assert np.allclose(distance_at(sp, t), sp.base_distance * math.sqrt(1 - 2 * K * t), rtol=0, atol=1e-10)

    def test_gamma_scaling_exact(self):
        sp = homothetic(gaussian_base(R=2, n=21), 0.3)
        rep = gamma_scaling_check(sp, np.cos(3 * sp.coords), 0.1, 0.9)
        assert rep.details["max_deviation"] <= 1e-10 and rep.passed

    def test_horizon_trim(self):
        sp = homothetic(gaussian_base(R=2, n=11), 2.0, eps=1e-3)
        assert sp.horizon[1] == pytest.approx((1 - 1e-3) / 4)
        assert 1 - 2 * 2.0 * sp.horizon[1] >= 1e-3 - 1e-15
        neg = homothetic(gaussian_base(R=2, n=11, horizon=(-5.0, 1.0)), -1.0)
        assert neg.horizon[0] == pytest.approx(-(1 - 1e-3) / 2)

    def test_empty_horizon(self):
        with pytest.raises(InvalidHorizon):
            homothetic(gaussian_base(R=2, n=11, horizon=(0.6, 1.0)), 1.0)

    def test_needs_static_base(self):
        with pytest.raises(InvalidInput):
            homothetic(wandering_gaussian(R=2, n=11), 0.2)


class TestViolating:
    def test_assumptions_hold(self):
        sp = violating_flow(R=2, n=101)
        assert check_assumptions(sp, C=4.1, L=1.0, sample_times=[0.0, 0.5, 1.0]).ok

    @pytest.mark.parametrize("n", [101, 201])
    def test_bochner_witness(self, n):
        sp = violating_flow(R=2, n=n, c=1.0)
        x = sp.coords
        g = np.exp(-0.5 * (x / 0.3) ** 2)
        rep = bochner_check(sp, 0.5, x, g)
        # continuum value: -int 2c Gamma(u) g, with Gamma(x) = 1
        assert rep.slack < -0.01 * rep.details["g_l1"]
        assert rep.slack == pytest.approx(-2 * np.sum(g * measure_at(sp, 0.5).masses), rel=0.05)

    def test_gradient_failure(self):
        sp = violating_flow(R=2, n=101)
        assert not gradient_estimate_scan(sp, 0.0, 1.0, 1.0, trials=100).passed

    def test_bad_constant(self):
        with pytest.raises(InvalidParameter):
            violating_flow(c=0.0)


def test_constant_rate():
    sp = constant_rate(flat_grid(R=1, n=5), 0.8)
    assert np.allclose(distance_at(sp, 0.5), sp.base_distance * math.exp(0.4), rtol=1e-14)


def test_registry():
    assert set(EXAMPLES) == {"two-point", "flat", "gaussian-base", "wandering-gaussian", "violating"}
    assert build_example("two-point").n == 2
    ho = build_example("homothetic", K=0.25, base_params={"R": 2.0, "n": 21})
    assert ho.meta["K"] == 0.25 and ho.n == 21
    st = build_example("static", base="wandering-gaussian", base_params={"n": 11})
    assert st.static_weight
    with pytest.raises(InvalidInput):
        build_example("sphere")


def test_two_point():
    sp = two_point_space()
    assert sp.n == 2 and distance_at(sp, 0.0)[0, 1] == 1.0
