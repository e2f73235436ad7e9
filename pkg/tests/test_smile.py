"""Smile formulas (BBF, SABR, rough SABR) and their building blocks.

Oracles: CEV closed forms, scipy.integrate.quad for tabulated backbones,
small-k numerical limits for the ATM branches and the exact power law of
zeta(tau) for the ATM skew.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from aaavol.errors import DomainError, RangeError
from aaavol.gfun import GParams, curvature_closed_form, sabr_g
from aaavol.pricing import MarketPoint
from aaavol.smile import (
    CEVBackbone,
    CEVLocalVol,
    ForwardVarianceCurve,
    LinearBackbone,
    RoughSabrParams,
    SabrParams,
    TabulatedBackbone,
    TabulatedLocalVol,
    atm_skew,
    bbf_sigma_bachelier,
    bbf_sigma_bs,
    inv_beta_integral,
    rough_sabr_sigma_bachelier,
    rough_sabr_sigma_bs,
    sabr_sigma_bachelier,
    sabr_sigma_bs,
    smile_table,
    solve_for_range,
    u_average_vol,
)

FLAT = ForwardVarianceCurve.flat(0.04)
ROUGH = RoughSabrParams(H=0.1, eta=1.0, rho=-0.3, xi0=FLAT)


@pytest.fixture(scope="module")
def sol():
    return solve_for_range(ROUGH, 8.0)


class TestBackboneIntegral:
    def test_same_point(self):
        assert inv_beta_integral(100.0, 100.0, CEVBackbone()) == 0.0

    def test_lognormal(self):
        assert inv_beta_integral(100.0, 120.0, CEVBackbone()) == pytest.approx(math.log(1.2), rel=1e-15)
        assert inv_beta_integral(120.0, 100.0, CEVBackbone()) == pytest.approx(-math.log(1.2), rel=1e-15)

    def test_square_root(self):
        bb = CEVBackbone(1.0, 0.5)
        assert inv_beta_integral(100.0, 121.0, bb) == pytest.approx(2.0, rel=1e-14)
        assert quad(lambda s: s**-0.5, 100.0, 121.0)[0] == pytest.approx(2.0, rel=1e-12)

    @pytest.mark.parametrize("gamma", [-0.5, 0.0, 0.3, 1.7])
    def test_cev_against_quad(self, gamma):
        bb = CEVBackbone(0.4, gamma)
        exact = quad(lambda s: 1.0 / (0.4 * s**gamma), 80.0, 130.0, epsabs=1e-13)[0]
        assert inv_beta_integral(80.0, 130.0, bb) == pytest.approx(exact, rel=1e-12)

    def test_tabulated_against_quad(self):
        grid = np.linspace(50.0, 150.0, 21)
        values = 0.2 * grid**0.8 * (1 + 0.1 * np.sin(grid / 10))
        bb = TabulatedBackbone(grid, values)
        f = lambda s: 1.0 / float(bb(s))
        for S, K in ((100.0, 100.0), (100.0, 137.3), (100.0, 61.2), (52.0, 148.0)):
            assert inv_beta_integral(S, K, bb) == pytest.approx(quad(f, S, K, epsabs=1e-14, limit=500, points=grid[1:-1])[0], abs=1e-10)

    def test_linear_is_exact_on_linear_data(self):
        grid = np.array([50.0, 100.0, 200.0])
        bb = LinearBackbone(grid, 0.3 * grid)
        assert inv_beta_integral(70.0, 180.0, bb) == pytest.approx(math.log(180 / 70) / 0.3, rel=1e-13)

    def test_tabulated_range(self):
        bb = TabulatedBackbone([50.0, 100.0, 150.0], [1.0, 2.0, 3.0])
        with pytest.raises(RangeError):
            inv_beta_integral(100.0, 160.0, bb)

    def test_rejects_unsorted_grid(self):
        with pytest.raises(DomainError):
            TabulatedBackbone([1.0, 3.0, 2.0], [1.0, 1.0, 1.0])


class TestBBF:
    def test_lognormal_is_flat(self):
        m = CEVLocalVol(0.25, 1.0)
        K = np.linspace(60, 160, 41)
        assert np.max(np.abs(bbf_sigma_bs(100.0, K, 1.0, m) - 0.25)) <= 1e-14

    def test_atm_limit(self):
        m = CEVLocalVol(5.0, 0.5)
        assert bbf_sigma_bs(100.0, 100.0, 1.0, m) == pytest.approx(5.0 * 10.0 / 100.0, rel=1e-14)
        assert bbf_sigma_bachelier(100.0, 100.0, 1.0, m) == pytest.approx(50.0, rel=1e-14)

    def test_normal_local_vol(self):
        m = CEVLocalVol(20.0, 0.0)
        assert bbf_sigma_bs(100.0, 110.0, 1.0, m) == pytest.approx(math.log(1.1) * 20.0 / 10.0, rel=1e-14)
        assert bbf_sigma_bachelier(100.0, 110.0, 1.0, m) == pytest.approx(20.0, rel=1e-14)

    def test_harmonic_mean_oracle(self):
        m = CEVLocalVol(0.3, 0.6)
        integral = quad(lambda s: 1 / (0.3 * s**0.6), 100.0, 125.0)[0]
        assert bbf_sigma_bs(100.0, 125.0, 1.0, m) == pytest.approx(math.log(1.25) / integral, rel=1e-12)

    def test_bachelier_lognormal(self):
        m = CEVLocalVol(0.2, 1.0)
        assert bbf_sigma_bachelier(100.0, 110.0, 1.0, m) == pytest.approx(2.0 / math.log(1.1), rel=1e-14)

    def test_uses_maturity_slice(self):
        m = CEVLocalVol(lambda t: 0.2 + 0.1 * t, 1.0)
        assert bbf_sigma_bs(100.0, 90.0, 2.0, m) == pytest.approx(0.4, rel=1e-14)

    def test_tabulated_surface(self):
        s = np.array([50.0, 100.0, 200.0])
        t = np.array([0.0, 1.0])
        v = np.array([0.2 * s, 0.3 * s])
        m = TabulatedLocalVol(s, t, v)
        assert bbf_sigma_bs(100.0, 150.0, 1.0, m) == pytest.approx(0.3, rel=1e-12)
        assert bbf_sigma_bs(100.0, 150.0, 0.5, m) == pytest.approx(0.25, rel=1e-12)


class TestSABR:
    P = SabrParams(alpha0=0.2, nu=0.5, rho=-0.3)

    def test_atm(self):
        assert sabr_sigma_bs(100.0, 100.0, self.P) == pytest.approx(0.2, rel=1e-15)
        p = SabrParams(0.2, 0.5, -0.3, CEVBackbone(1.0, 0.5))
        assert sabr_sigma_bs(100.0, 100.0, p) == pytest.approx(0.2 * 10 / 100, rel=1e-14)
        assert sabr_sigma_bachelier(100.0, 100.0, p) == pytest.approx(2.0, rel=1e-14)

    def test_worked_example(self):
        Y = 0.5 * math.log(1.2) / 0.2
        assert Y == pytest.approx(0.455804, abs=1e-6)
        expected = 0.5 * math.log(1.2) / sabr_g(Y, -0.3)
        assert sabr_sigma_bs(100.0, 120.0, self.P) == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(0.1930845, abs=1e-7)

    def test_zero_vol_of_vol(self):
        p = SabrParams(0.2, 0.0, -0.3)
        K = np.array([70.0, 100.0, 140.0])
        assert np.allclose(sabr_sigma_bs(100.0, K, p), 0.2, rtol=0, atol=1e-15)
        p = SabrParams(0.2, 0.0, -0.3, CEVBackbone(1.0, 0.5))
        expected = 10.0 / (2 * (math.sqrt(110.0) - 10.0) / 0.2)
        assert sabr_sigma_bachelier(100.0, 110.0, p) == pytest.approx(expected, rel=1e-13)

    def test_current_alpha(self):
        assert sabr_sigma_bs(100.0, 100.0, self.P, alpha=0.3) == pytest.approx(0.3, rel=1e-15)

    def test_normal_backbone_symmetry(self):
        p = SabrParams(10.0, 0.5, 0.0, CEVBackbone(1.0, 0.0))
        assert sabr_sigma_bachelier(100.0, 115.0, p) == pytest.approx(sabr_sigma_bachelier(100.0, 85.0, p), rel=1e-14)

    def test_rejects_bad_rho(self):
        with pytest.raises(DomainError):
            SabrParams(0.2, 0.5, 1.0)


class TestForwardVariance:
    def test_flat(self):
        assert u_average_vol(FLAT, 0.0, 1.0) == pytest.approx(0.2, rel=1e-15)

    def test_two_piece(self):
        c = ForwardVarianceCurve([0.0, 1.0], [0.04, 0.09])
        assert u_average_vol(c, 0.0, 2.0) == pytest.approx(math.sqrt(0.065), rel=1e-15)

    def test_right_continuous(self):
        c = ForwardVarianceCurve([0.0, 1.0], [0.04, 0.09])
        assert u_average_vol(c, 1.0, 1.0 + 1e-6) == pytest.approx(0.3, rel=1e-9)
        assert c(1.0) == 0.09

    def test_needs_t_before_T(self):
        with pytest.raises(DomainError):
            u_average_vol(FLAT, 1.0, 1.0)

    def test_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            ForwardVarianceCurve([0.0, 1.0], [0.04, 0.0])


class TestRoughSABR:
    def test_zeta(self):
        p = RoughSabrParams(0.1, 1.0, -0.3, FLAT)
        assert p.zeta(0.01) == pytest.approx(math.sqrt(0.2) * 0.01**-0.4, rel=1e-15)
        assert p.zeta(0.01) == pytest.approx(2.8216, abs=1e-3)

    def test_atm_equals_u(self, sol):
        assert rough_sabr_sigma_bs(100.0, 100.0, 0.05, ROUGH, sol) == pytest.approx(0.2, abs=1e-12)
        c = ForwardVarianceCurve([0.0, 0.02], [0.04, 0.09])
        u = u_average_vol(c, 0.0, 0.05)
        assert rough_sabr_sigma_bs(100.0, 100.0, 0.05, ROUGH, sol, curve=c) == pytest.approx(u, rel=1e-12)

    def test_atm_matches_small_k_limit(self, sol):
        p = RoughSabrParams(0.1, 1.0, -0.3, FLAT, CEVBackbone(2.0, 0.5))
        atm = rough_sabr_sigma_bs(100.0, 100.0, 0.05, p, sol)
        assert atm == pytest.approx(0.2 * 2.0 * 10.0 / 100.0, rel=1e-13)
        for h in (1e-6, -1e-6):
            near = rough_sabr_sigma_bs(100.0, 100.0 * math.exp(h), 0.05, p, sol)
            assert near == pytest.approx(atm, rel=1e-5)

    def test_bachelier_atm(self, sol):
        p = RoughSabrParams(0.1, 1.0, -0.3, FLAT, CEVBackbone(1.0, 0.0))
        assert rough_sabr_sigma_bachelier(100.0, 100.0, 0.05, p, sol) == pytest.approx(0.2, rel=1e-14)

    def test_zero_noise_reduces_to_bbf(self, sol):
        p = RoughSabrParams(0.1, 1e-12, -0.3, FLAT, CEVBackbone(1.0, 0.5))
        lv = CEVLocalVol(0.2, 0.5)
        for K in (80.0, 95.0, 120.0):
            assert rough_sabr_sigma_bs(100.0, K, 0.05, p, sol) == pytest.approx(bbf_sigma_bs(100.0, K, 0.05, lv), rel=1e-9)

    def test_sign_symmetry(self):
        bb = CEVBackbone(1.0, 0.0)
        pos = RoughSabrParams(0.1, 1.0, 0.4, FLAT, bb)
        neg = RoughSabrParams(0.1, 1.0, -0.4, FLAT, bb)
        s_pos = solve_for_range(pos, 8.0)
        s_neg = solve_for_range(neg, 8.0)
        a = rough_sabr_sigma_bachelier(100.0, 100.2, 0.05, pos, s_pos)
        b = rough_sabr_sigma_bachelier(100.0, 99.8, 0.05, neg, s_neg)
        assert a == pytest.approx(b, rel=1e-9)

    def test_continuous_across_atm(self, sol):
        for fn in (rough_sabr_sigma_bs, rough_sabr_sigma_bachelier):
            lo, mid, hi = (fn(100.0, K, 0.05, ROUGH, sol) for K in (100.0 - 1e-6, 100.0, 100.0 + 1e-6))
            assert abs(hi - mid) < 1e-7 * mid and abs(lo - mid) < 1e-7 * mid

    def test_range_error(self, sol):
        with pytest.raises(RangeError):
            rough_sabr_sigma_bs(100.0, 300.0, 1e-4, ROUGH, sol)

    def test_mismatched_solution(self, sol):
        other = RoughSabrParams(0.2, 1.0, -0.3, FLAT)
        with pytest.raises(DomainError):
            rough_sabr_sigma_bs(100.0, 110.0, 0.05, other, sol)

    @pytest.mark.parametrize("tau", [0.01, 0.05, 0.2])
    def test_atm_skew(self, sol, tau):
        b = curvature_closed_form(GParams(-0.3, 0.1))
        assert atm_skew(ROUGH, tau, sol) == pytest.approx(-0.5 * b * ROUGH.zeta(tau), rel=1e-6)

    def test_skew_ratio_power_law(self, sol):
        ratio = atm_skew(ROUGH, 0.01, sol) / atm_skew(ROUGH, 0.1, sol)
        assert ratio == pytest.approx(0.1 ** (0.1 - 0.5), rel=1e-6)

    def test_half_hurst_and_sabr_agree_at_the_money(self):
        p = RoughSabrParams(0.5, 0.5, -0.3, FLAT)
        s = solve_for_range(p, 8.0)
        sabr = SabrParams(0.2, 0.5, -0.3)
        for eps in (1e-3, 1e-4, 1e-5):
            K = 100.0 * math.exp(eps)
            gap = abs(rough_sabr_sigma_bs(100.0, K, 0.1, p, s) - sabr_sigma_bs(100.0, K, sabr))
            assert gap < 0.1 * eps


class TestSmileTable:
    POINT = MarketPoint(100.0, 100.0, 0.05)

    def test_elementwise(self):
        strikes = 100.0 * np.geomspace(0.8, 1.25, 41)
        tab = smile_table(ROUGH, strikes[::-1], self.POINT)
        s = solve_for_range(ROUGH, 8.0)
        assert np.all(np.diff(tab.column("strike")) > 0)
        for row in tab.rows:
            assert row["sigma_bs"] == rough_sabr_sigma_bs(100.0, row["strike"], 0.05, ROUGH, s)

    def test_single_and_empty(self):
        p = SabrParams(0.2, 0.5, -0.3)
        tab = smile_table(p, [120.0], self.POINT)
        assert tab.rows[0]["sigma_bs"] == sabr_sigma_bs(100.0, 120.0, p)
        assert smile_table(p, [], self.POINT).rows == []

    def test_errors_are_recorded(self):
        p = SabrParams(0.2, 0.5, -0.3)
        tab = smile_table(p, [-5.0, 100.0], self.POINT)
        assert -5.0 in tab.errors
        assert tab.rows[1]["sigma_bs"] == pytest.approx(0.2)

    def test_csv(self):
        text = smile_table(CEVLocalVol(0.2), [90.0, 110.0], self.POINT).to_csv()
        lines = text.splitlines()
        assert lines[0] == "strike,k,x,sigma_bs,sigma_bachelier"
        assert len(lines) == 3
        assert float(lines[1].split(",")[3]) == pytest.approx(0.2, rel=1e-14)
