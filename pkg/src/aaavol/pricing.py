"""Black-Scholes and Bachelier call prices and implied-volatility inversion.

All functions broadcast over numpy arrays. Rates and dividends are zero; only
calls are priced. Time to expiry ``tau`` is always passed explicitly.

Prices are assembled as ``intrinsic + time value`` where the time value is
computed on the out-of-the-money side with scaled complementary error
functions, so deep out-of-the-money and small-vol quotes keep their relative
accuracy instead of cancelling to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ArbitrageBoundError, ConvergenceError, DomainError

SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)
_SQRT_HALF_PI = math.sqrt(0.5 * math.pi)

MAX_ITER = 100


@dataclass(frozen=True)
class MarketPoint:
    """Spot, strike, time to expiry and valuation time of one call quote."""

    spot: float
    strike: float
    tau: float
    t: float = 0.0

    def __post_init__(self):
        if not (self.spot > 0 and math.isfinite(self.spot)):
            raise DomainError(f"spot must be positive and finite, got {self.spot}")
        if not (self.strike > 0 and math.isfinite(self.strike)):
            raise DomainError(f"strike must be positive and finite, got {self.strike}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.t < 0:
            raise DomainError(f"valuation time must be nonnegative, got {self.t}")

    @property
    def maturity(self) -> float:
        return self.t + self.tau

    @property
    def k(self) -> float:
        """Log-moneyness log(K/S)."""
        return math.log1p((self.strike - self.spot) / self.spot)

    @property
    def x(self) -> float:
        """Absolute moneyness K - S."""
        return self.strike - self.spot

    def with_strike(self, strike: float) -> "MarketPoint":
        return MarketPoint(self.spot, strike, self.tau, self.t)


def norm_pdf(u):
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u) / SQRT_2PI


def norm_cdf(u):
    # ndtr evaluates the lower tail through erfc, so it is relatively accurate for u << 0.
    return special.ndtr(np.asarray(u, dtype=float))


def _scalar_or_array(a):
    return a.item() if isinstance(a, np.ndarray) and a.ndim == 0 else a


def _check_positive(name, a):
    if np.any(~(a > 0)) or np.any(~np.isfinite(a)):
        raise DomainError(f"{name} must be positive and finite")


def _bs_time_value(spot, strike, s):
    """Call price minus intrinsic value, for total vol ``s = sigma * sqrt(tau)``."""
    x = np.log(strike / spot)
    otm = x >= 0.0
    # out-of-the-money call (A=S, B=K) or, by parity, out-of-the-money put (A=K, B=S)
    a = np.where(otm, spot, strike)
    b = np.where(otm, strike, spot)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d_a = -np.abs(x) / s + 0.5 * s
        d_b = d_a - s
        # A*exp(-d_a^2/2) == B*exp(-d_b^2/2), which removes the cancelling exponentials
        tail = 0.5 * a * np.exp(-0.5 * d_a * d_a) * (
            special.erfcx(-d_a / _SQRT2) - special.erfcx(-d_b / _SQRT2)
        )
        plain = a * special.ndtr(d_a) - b * special.ndtr(d_b)
    tv = np.where(d_a < 0.0, tail, plain)
    return np.maximum(tv, 0.0)


def bs_call_price(spot, strike, tau, sigma):
    """Black-Scholes call price with zero rates."""
    spot, strike, tau, sigma = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (spot, strike, tau, sigma))
    )
    _check_positive("spot", spot)
    _check_positive("strike", strike)
    _check_positive("tau", tau)
    _check_positive("sigma", sigma)
    tv = _bs_time_value(spot, strike, sigma * np.sqrt(tau))
    return _scalar_or_array(np.maximum(spot - strike, 0.0) + tv)


def bs_vega(spot, strike, tau, sigma):
    """Derivative of the Black-Scholes call price in sigma."""
    spot, strike, tau, sigma = (np.asarray(v, dtype=float) for v in (spot, strike, tau, sigma))
    s = sigma * np.sqrt(tau)
    d_plus = -np.log(strike / spot) / s + 0.5 * s
    return _scalar_or_array(spot * norm_pdf(d_plus) * np.sqrt(tau))


def _bachelier_time_value(spot, strike, s):
    u = np.abs(spot - strike) / s
    # phi(u) - u * Phi(-u) written with the scaled Mills ratio
    return s * norm_pdf(u) * (1.0 - u * _SQRT_HALF_PI * special.erfcx(u / _SQRT2))


def bachelier_call_price(spot, strike, tau, sigma):
    """Bachelier (normal model) call price with zero rates; ``sigma`` in price units."""
    spot, strike, tau, sigma = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (spot, strike, tau, sigma))
    )
    _check_positive("tau", tau)
    _check_positive("sigma", sigma)
    tv = np.maximum(_bachelier_time_value(spot, strike, sigma * np.sqrt(tau)), 0.0)
    return _scalar_or_array(np.maximum(spot - strike, 0.0) + tv)


def bachelier_vega(spot, strike, tau, sigma):
    spot, strike, tau, sigma = (np.asarray(v, dtype=float) for v in (spot, strike, tau, sigma))
    return _scalar_or_array(np.sqrt(tau) * norm_pdf((spot - strike) / (sigma * np.sqrt(tau))))


def _invert_time_value(tv_target, tv_fn, slope_fn, scale, s_grid):
    """Solve ``tv_fn(s) = tv_target`` for the total vol s, elementwise.

    Newton on log time value, safeguarded by a bracket that is seeded from a
    log-spaced scan (located by binary search, since the time value is
    increasing in s) and falls back to geometric bisection.
    """
    n = tv_target.size
    everyone = np.arange(n)
    top = s_grid.size - 1
    has_hi = tv_fn(scale * s_grid[top], everyone) > tv_target
    if not np.all(has_hi):
        raise ConvergenceError(
            f"{np.count_nonzero(~has_hi)} quotes lie beyond the volatility scan range"
        )
    # time value is increasing in s: binary search for the first scan point above the target
    i_lo = np.full(n, -1)
    i_hi = np.full(n, top)
    while np.any(i_hi - i_lo > 1):
        mid = (i_lo + i_hi) // 2
        above = tv_fn(scale * s_grid[np.maximum(mid, 0)], everyone) > tv_target
        i_hi = np.where(above, mid, i_hi)
        i_lo = np.where(above, i_lo, mid)
    hi = scale * s_grid[i_hi]
    lo = np.where(i_lo >= 0, scale * s_grid[np.maximum(i_lo, 0)], 0.0)
    s = np.where(lo > 0, np.sqrt(lo * np.maximum(hi, lo)), 0.5 * hi)
    log_target = np.log(tv_target)

    active = np.ones(n, dtype=bool)
    gap = np.full(n, np.inf)
    for _ in range(MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        sa = s[idx]
        tv = tv_fn(sa, idx)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.log(tv) - log_target[idx]
            step = f * tv / slope_fn(sa, idx)
        lo[idx] = np.where(f < 0, np.maximum(lo[idx], sa), lo[idx])
        hi[idx] = np.where(f > 0, np.minimum(hi[idx], sa), hi[idx])
        cand = sa - step
        bad = ~np.isfinite(cand) | (cand <= lo[idx]) | (cand >= hi[idx])
        bisect = np.where(lo[idx] > 0, np.sqrt(lo[idx] * hi[idx]), 0.5 * hi[idx])
        new = np.where(bad, bisect, cand)
        gap[idx] = np.abs(new - sa)
        s[idx] = new
        done = (f == 0.0) | (gap[idx] <= 4e-16 * new) | (hi[idx] - lo[idx] <= 4e-16 * hi[idx])
        active[idx[done]] = False
    if np.any(active):
        raise ConvergenceError(
            f"implied volatility did not converge for {np.count_nonzero(active)} quotes",
            gap=float(np.max(gap[active] / s[active])),
        )
    return s


_BS_SCAN = np.geomspace(1e-9, 200.0, 72)
_B_SCAN = np.geomspace(1e-9, 1e3, 80)


def _prepare(price, spot, strike, tau):
    arrays = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (price, spot, strike, tau))
    )
    shape = arrays[0].shape
    return shape, [a.ravel().copy() for a in arrays]


def _finish(result, shape, on_error, bad):
    if bad is not None and np.any(bad):
        result[bad] = np.nan
    return _scalar_or_array(result.reshape(shape))


def implied_vol_bs(price, spot, strike, tau, on_error="raise"):
    """Black-Scholes implied volatility of a call price.

    ``on_error="raise"`` raises :class:`ArbitrageBoundError` when any price is
    outside ``(max(S-K, 0), S)``; ``on_error="nan"`` returns NaN for those quotes.
    """
    shape, (price, spot, strike, tau) = _prepare(price, spot, strike, tau)
    _check_positive("spot", spot)
    _check_positive("strike", strike)
    _check_positive("tau", tau)
    intrinsic = np.maximum(spot - strike, 0.0)
    tv_target = price - intrinsic
    bad = ~((tv_target > 0) & (price < spot) & np.isfinite(price))
    if np.any(bad) and on_error == "raise":
        raise ArbitrageBoundError(
            f"{np.count_nonzero(bad)} prices outside the no-arbitrage interval (max(S-K,0), S)"
        )
    out = np.full(price.shape, np.nan)
    ok = np.flatnonzero(~bad)
    if ok.size:
        S, K = spot[ok], strike[ok]

        def tv_fn(s, idx):
            return _bs_time_value(S[idx], K[idx], s)

        def slope_fn(s, idx):
            d_plus = -np.log(K[idx] / S[idx]) / s + 0.5 * s
            return S[idx] * norm_pdf(d_plus)

        s = _invert_time_value(tv_target[ok], tv_fn, slope_fn, np.ones(ok.size), _BS_SCAN)
        out[ok] = s / np.sqrt(tau[ok])
    return _finish(out, shape, on_error, bad)


def implied_vol_bachelier(price, spot, strike, tau, on_error="raise"):
    """Bachelier implied volatility (price units per sqrt-year) of a call price."""
    shape, (price, spot, strike, tau) = _prepare(price, spot, strike, tau)
    _check_positive("tau", tau)
    intrinsic = np.maximum(spot - strike, 0.0)
    tv_target = price - intrinsic
    bad = ~((tv_target > 0) & np.isfinite(price))
    if np.any(bad) and on_error == "raise":
        raise ArbitrageBoundError(
            f"{np.count_nonzero(bad)} prices at or below intrinsic value max(S-K, 0)"
        )
    out = np.full(price.shape, np.nan)
    ok = np.flatnonzero(~bad)
    if ok.size:
        S, K = spot[ok], strike[ok]

        def tv_fn(s, idx):
            return _bachelier_time_value(S[idx], K[idx], s)

        def slope_fn(s, idx):
            return norm_pdf((S[idx] - K[idx]) / s)

        scale = np.abs(S - K) + SQRT_2PI * tv_target[ok]
        s = _invert_time_value(tv_target[ok], tv_fn, slope_fn, scale, _B_SCAN)
        out[ok] = s / np.sqrt(tau[ok])
    return _finish(out, shape, on_error, bad)
