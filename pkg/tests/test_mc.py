"""Monte Carlo simulators, the counter-based RNG and MC pricing.

Oracles are exact laws: lognormal and Brownian terminal moments, the
geometric-Brownian alpha, Black-Scholes prices at zero vol-of-vol, and the
lognormal forward-variance variance int_0^t zeta(s - u)^2 du.
"""

import math

import numpy as np
import pytest

from aaavol import rng
from aaavol.errors import DomainError
from aaavol.mc import (
    SimGrid,
    dump_paths_csv,
    martingale_zscore,
    mc_call_price,
    mc_implied_vols,
    mc_put_price,
    rough_kernel_matrix,
    simulate_local_vol,
    simulate_rough_sabr,
    simulate_sabr,
)
from aaavol.pricing import bs_call_price
from aaavol.smile import CEVBackbone, CEVLocalVol, ForwardVarianceCurve, RoughSabrParams, SabrParams

FLAT = ForwardVarianceCurve.flat(0.04)


class TestRNG:
    def test_pure_function(self):
        a = rng.normals(7, 0, 3, 0, 100)
        b = rng.normals(7, 0, 3, 0, 100)
        assert np.array_equal(a, b)

    def test_any_offset_reproduces_slice(self):
        full = rng.normals(7, 1, 5, 0, 50)
        for start in (1, 2, 3, 4, 13):
            assert np.array_equal(rng.normals(7, 1, 5, start, 50 - start), full[start:])

    def test_streams_differ(self):
        a = rng.normals(7, 0, 0, 0, 10)
        assert not np.array_equal(a, rng.normals(7, 1, 0, 0, 10))
        assert not np.array_equal(a, rng.normals(7, 0, 1, 0, 10))
        assert not np.array_equal(a, rng.normals(8, 0, 0, 0, 10))

    def test_uniforms_open_interval_and_moments(self):
        u = rng.uniforms(1, 0, 0, 0, 200_000)
        assert u.min() > 0 and u.max() < 1
        z = rng.normals(1, 0, 0, 0, 200_000)
        assert abs(z.mean()) < 4 / math.sqrt(z.size)
        assert abs(z.var() - 1) < 4 * math.sqrt(2 / z.size)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            rng.uniforms(-1, 0, 0, 0, 5)


class TestGrid:
    def test_uniform(self):
        g = SimGrid.uniform(1.0, 4)
        assert g.M == 4 and g.T == 1.0
        assert np.allclose(g.dt, 0.25)

    def test_validation(self):
        with pytest.raises(DomainError):
            SimGrid([0.0, 0.5, 0.4])
        with pytest.raises(DomainError):
            SimGrid([0.1, 0.5])

    def test_refined_contains_focus(self):
        g = SimGrid.refined(0.3, [0.1, 0.3], steps=30, extra=[0.123])
        for t in (0.0, 0.1, 0.123, 0.3):
            assert np.min(np.abs(g.times - t)) == 0.0
        assert np.min(g.dt) > 0

    def test_off_grid_record(self):
        with pytest.raises(DomainError):
            SimGrid.uniform(1.0, 4).indices([0.3])


class TestLocalVol:
    def test_lognormal_mean(self):
        m = CEVLocalVol(0.3, 1.0)
        ens = simulate_local_vol(m, SimGrid.uniform(1.0, 20), 40_000, 3, 100.0, record=[1.0])
        x = np.log(ens.terminal)
        assert ens.scheme == "log-euler"
        assert abs(x.mean() - (math.log(100) - 0.045)) < 3 * x.std() / math.sqrt(x.size)

    def test_brownian_variance(self):
        m = CEVLocalVol(5.0, 0.0)
        ens = simulate_local_vol(m, SimGrid.uniform(1.0, 20), 40_000, 4, 100.0, record=[1.0])
        s = ens.terminal
        var = s.var(ddof=1)
        se = math.sqrt(2.0 / (s.size - 1)) * 25.0
        assert abs(var - 25.0) < 3 * se
        assert not np.any(ens.absorbed)

    def test_absorption(self):
        m = CEVLocalVol(60.0, 0.0)
        ens = simulate_local_vol(m, SimGrid.uniform(1.0, 50), 2000, 5, 100.0)
        assert np.any(ens.absorbed)
        assert np.all(ens.S > 0)

    def test_determinism_and_chunking(self):
        m = CEVLocalVol(0.2, 0.7)
        g = SimGrid.uniform(0.5, 10)
        a = simulate_local_vol(m, g, 3001, 9, 100.0)
        b = simulate_local_vol(m, g, 3001, 9, 100.0, chunk_size=517, workers=3)
        assert np.array_equal(a.S, b.S)


class TestSABR:
    P = SabrParams(0.2, 0.5, -0.3)

    def test_alpha_martingale(self):
        ens = simulate_sabr(self.P, SimGrid.uniform(1.0, 10), 40_000, 1, 100.0, record=[1.0])
        a = ens.alpha[:, -1]
        assert abs(a.mean() - 0.2) < 3 * a.std() / math.sqrt(a.size)

    def test_spot_martingale(self):
        ens = simulate_sabr(self.P, SimGrid.uniform(0.5, 50), 40_000, 2, 100.0, record=[0.5])
        assert abs(martingale_zscore(ens)) < 4

    def test_zero_vol_of_vol_is_black_scholes(self):
        p = SabrParams(0.2, 0.0, -0.3)
        ens = simulate_sabr(p, SimGrid.uniform(0.25, 25), 100_000, 3, 100.0, record=[0.25])
        for K in (90.0, 100.0, 110.0):
            price, se = mc_call_price(ens, K)
            assert abs(price - bs_call_price(100.0, K, 0.25, 0.2)) < 3 * se

    def test_uncorrelated_increments(self):
        p = SabrParams(0.2, 0.5, 0.0)
        M, n = 20, 20_000
        ens = simulate_sabr(p, SimGrid.uniform(0.2, M), n, 4, 100.0)
        dS = np.diff(np.log(ens.S), axis=1).ravel()
        da = np.diff(np.log(ens.alpha), axis=1).ravel()
        assert abs(np.corrcoef(dS, da)[0, 1]) < 4 / math.sqrt(n * M)

    def test_general_backbone_positive(self):
        p = SabrParams(2.0, 0.5, -0.3, CEVBackbone(1.0, 0.5))
        ens = simulate_sabr(p, SimGrid.uniform(0.5, 50), 5000, 5, 100.0)
        assert ens.scheme.endswith("euler-absorb")
        assert np.all(ens.S > 0)

    def test_determinism(self):
        g = SimGrid.uniform(0.1, 10)
        a = simulate_sabr(self.P, g, 1000, 6, 100.0)
        b = simulate_sabr(self.P, g, 1000, 6, 100.0, chunk_size=333)
        assert np.array_equal(a.S, b.S) and np.array_equal(a.alpha, b.alpha)


class TestRoughSABR:
    P = RoughSabrParams(0.1, 1.0, -0.3, FLAT)

    def test_zero_noise_black_scholes(self):
        p = RoughSabrParams(0.1, 0.0, -0.3, FLAT)
        ens = simulate_rough_sabr(p, SimGrid.uniform(0.05, 20), 50_000, 1, 100.0, record=[0.05])
        K = np.array([95.0, 100.0, 105.0])
        iv, se = mc_implied_vols(ens, K)
        assert np.all(np.abs(iv - 0.2) < 3 * se)

    def test_r_at_time_zero(self):
        ens = simulate_rough_sabr(self.P, SimGrid.uniform(0.1, 20), 10, 1, 100.0, record=[0.0])
        assert np.allclose(ens.R[:, 0], 1 / 0.6, rtol=1e-12)
        assert np.allclose(ens.U[:, 0], 0.2, rtol=1e-12)

    def test_half_hurst_r_is_one(self):
        p = RoughSabrParams(0.5, 1.0, -0.3, FLAT)
        ens = simulate_rough_sabr(p, SimGrid.uniform(0.1, 20), 100, 2, 100.0, record=[0.05])
        assert np.allclose(ens.R[:, 0], 1.0, rtol=1e-12)

    def test_log_variance(self):
        # alpha_t^2 = xi_t(t) is exactly lognormal with variance eta^2 t^(2H)
        t = 0.05
        ens = simulate_rough_sabr(self.P, SimGrid.uniform(0.1, 20), 40_000, 3, 100.0, record=[t])
        x = np.log(ens.alpha[:, 0] ** 2)
        var = x.var(ddof=1)
        exact = t**0.2
        assert abs(var - exact) < 4 * exact * math.sqrt(2 / (x.size - 1))
        assert abs(x.mean() - (math.log(0.04) - 0.5 * exact)) < 4 * math.sqrt(exact / x.size)

    def test_kernel_matrix_sums(self):
        t = np.linspace(0.0, 0.1, 21)
        K, var = rough_kernel_matrix(0.1, 1.0, t)
        # summed step variances reproduce eta^2 s^(2H) at every maturity
        assert np.allclose(var.sum(axis=0)[1:], t[1:] ** 0.2, rtol=1e-12)

    def test_horizons(self):
        g = SimGrid.uniform(0.1, 20)
        ens = simulate_rough_sabr(self.P, g, 50, 4, 100.0, record=[0.0, 0.05], horizons=[0.075, 0.1])
        assert ens.info["U_h"].shape == (50, 2, 2)
        assert np.allclose(ens.info["R_h"][:, 0, :], 1 / 0.6)

    def test_needs_ten_steps(self):
        with pytest.raises(DomainError):
            simulate_rough_sabr(self.P, SimGrid.uniform(0.1, 5), 10, 1, 100.0)

    def test_determinism(self):
        g = SimGrid.uniform(0.05, 20)
        a = simulate_rough_sabr(self.P, g, 999, 5, 100.0)
        b = simulate_rough_sabr(self.P, g, 999, 5, 100.0, chunk_size=100, workers=2)
        for name in ("S", "alpha", "U", "R"):
            assert np.array_equal(getattr(a, name), getattr(b, name), equal_nan=True)


@pytest.fixture(scope="module")
def ens():
    return simulate_sabr(SabrParams(0.2, 0.5, -0.3), SimGrid.uniform(0.1, 10), 20_000, 7, 100.0, record=[0.1])


class TestPricing:
    def test_zero_strike(self, ens):
        price, _ = mc_call_price(ens, 0.0)
        assert price == pytest.approx(ens.terminal.mean(), rel=1e-13)

    def test_huge_strike(self, ens):
        assert mc_call_price(ens, 1e9) == (0.0, 0.0)

    def test_parity_route(self, ens):
        K = np.array([90.0, 95.0])
        iv_otm, se_otm = mc_implied_vols(ens, K)
        iv_call, se_call = mc_implied_vols(ens, K, side="call")
        assert np.all(se_otm < se_call)
        assert np.all(np.abs(iv_otm - iv_call) < 3 * se_call)
        p, _ = mc_put_price(ens, 90.0)
        assert p > 0

    def test_dump(self, ens, tmp_path):
        path = tmp_path / "paths.csv"
        dump_paths_csv(ens, path, max_paths=3)
        lines = path.read_text().splitlines()
        assert lines[0] == "path_id,time,S,alpha,U,R"
        assert len(lines) == 1 + 3 * ens.times.size
