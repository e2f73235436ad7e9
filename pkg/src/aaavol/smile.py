"""BBF, SABR and rough SABR implied-volatility formulas.

Every formula has the shape ``moneyness / g(Y)`` and is evaluated in the
factored form

    sigma = level * (k / I(S, K)) / G(Y),   G(y) = g(y) / y,  G(0) = 1,

with ``I(S, K) = int_S^K ds / beta(s)``. The factored form is exact, stays
smooth through ``K = S`` and keeps full relative precision for tiny ``Y``.
When ``|log(K/S)| < ATM_THRESHOLD`` the ratio ``k / I`` is replaced by its
first-order expansion ``beta(M) / M`` at the midpoint ``M = (S + K) / 2``.

All functions broadcast over numpy arrays of spots and strikes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Union

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import DomainError, RangeError
from .gfun import GParams, GSolution, sabr_g, solve_g
from .pricing import MarketPoint
from .quad import adaptive_simpson, gauss_legendre

ATM_THRESHOLD = 1e-8


def _out(a):
    a = np.asarray(a)
    return a.item() if a.ndim == 0 else a


def _ratio(S, K, bb, lognormal=True):
    """``k / I(S, K)`` (or ``x / I``) for backbone-like ``bb``, with the ATM limit."""
    S = np.asarray(S, dtype=float)
    K = np.asarray(K, dtype=float)
    m = K - S
    k = np.log1p(m / S)
    num = k if lognormal else m
    J = bb.unit_integral(S, K)
    mid = 0.5 * (S + K)
    level = bb.unit(mid)
    limit = level / mid if lognormal else level
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(np.abs(k) < ATM_THRESHOLD, limit, num / J)
    return bb.scale * r


# ---------------------------------------------------------------- backbones


class Backbone:
    """Positive local-volatility shape ``beta(s) = scale * unit(s)``."""

    scale = 1.0

    def unit(self, s):
        raise NotImplementedError

    def unit_integral(self, S, K):
        raise NotImplementedError

    def __call__(self, s):
        return _out(self.scale * self.unit(np.asarray(s, dtype=float)))

    def inv_integral(self, S, K):
        return _out(self.unit_integral(np.asarray(S, float), np.asarray(K, float)) / self.scale)

    def log_ratio(self, S, K):
        return _out(_ratio(S, K, self, lognormal=True))

    def abs_ratio(self, S, K):
        return _out(_ratio(S, K, self, lognormal=False))


@dataclass(frozen=True)
class CEVBackbone(Backbone):
    """``beta(s) = c * s**gamma``."""

    c: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not (self.c > 0):
            raise DomainError(f"CEV scale c must be positive, got {self.c}")
        if not math.isfinite(self.gamma):
            raise DomainError("CEV exponent must be finite")

    @property
    def scale(self):
        return self.c

    def unit(self, s):
        return np.power(s, self.gamma)

    def unit_integral(self, S, K):
        S = np.asarray(S, dtype=float)
        K = np.asarray(K, dtype=float)
        if np.any(S <= 0) or np.any(K <= 0):
            raise DomainError("CEV backbone integral needs positive S and K")
        u = np.log1p((K - S) / S)
        if self.gamma == 1.0:
            return u
        if self.gamma == 0.0:
            return K - S
        e = 1.0 - self.gamma
        return np.power(S, e) * np.expm1(e * u) / e

    def derivative(self, s, order=1):
        s = np.asarray(s, dtype=float)
        g = self.gamma
        if order == 1:
            return _out(self.c * g * np.power(s, g - 1.0))
        if order == 2:
            return _out(self.c * g * (g - 1.0) * np.power(s, g - 2.0))
        raise ValueError("order must be 1 or 2")


class _GridBackbone(Backbone):
    """Shared machinery for backbones tabulated on a positive grid."""

    def __init__(self, grid, values):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid.shape != values.shape:
            raise DomainError("tabulated backbone needs matching 1-d grid and values of length >= 2")
        if np.any(np.diff(grid) <= 0) or grid[0] <= 0:
            raise DomainError("tabulated backbone grid must be positive and strictly increasing")
        if np.any(values <= 0):
            raise DomainError("tabulated backbone values must be positive")
        self.grid = grid
        self.values = values

    def _check(self, s):
        lo, hi = self.grid[0], self.grid[-1]
        if np.any((s < lo) | (s > hi)):
            raise RangeError(f"argument outside tabulated range [{lo}, {hi}]")

    def _segment(self, s):
        return np.clip(np.searchsorted(self.grid, s, side="right") - 1, 0, self.grid.size - 2)

    def _partial(self, a, b):
        """int_a^b ds / unit(s) for a, b inside one segment."""
        return gauss_legendre(lambda s: 1.0 / self.unit(s), a, b)

    def unit_integral(self, S, K):
        S, K = np.broadcast_arrays(np.asarray(S, dtype=float), np.asarray(K, dtype=float))
        self._check(S)
        self._check(K)
        lo = np.minimum(S, K)
        hi = np.maximum(S, K)
        i, j = self._segment(lo), self._segment(hi)
        same = i == j
        right_of_lo = self.grid[i + 1]
        left_of_hi = self.grid[j]
        middle = self._cumulative[j] - self._cumulative[np.minimum(i + 1, j)]
        split = (
            self._partial(lo, np.where(same, lo, right_of_lo))
            + middle
            + self._partial(np.where(same, hi, left_of_hi), hi)
        )
        total = np.where(same, self._partial(lo, hi), split)
        return np.where(K >= S, total, -total)


class TabulatedBackbone(_GridBackbone):
    """Backbone given on a grid, interpolated by a monotone cubic (PCHIP).

    The antiderivative of ``1/beta`` is tabulated at the nodes with adaptive
    Simpson (absolute tolerance ``1e-10 * width / min(beta)`` per segment).
    """

    def __init__(self, grid, values):
        super().__init__(grid, values)
        self._interp = PchipInterpolator(self.grid, self.values, extrapolate=False)
        vmin = float(np.min(self.values))
        segs = [
            adaptive_simpson(lambda s: 1.0 / float(self._interp(s)), a, b, 1e-10 * (b - a) / vmin)
            for a, b in zip(self.grid[:-1], self.grid[1:])
        ]
        self._cumulative = np.concatenate(([0.0], np.cumsum(segs)))

    def unit(self, s):
        s = np.asarray(s, dtype=float)
        self._check(s)
        return self._interp(s)

    def derivative(self, s, order=1):
        s = np.asarray(s, dtype=float)
        self._check(s)
        return _out(self._interp.derivative(order)(s))


class LinearBackbone(_GridBackbone):
    """Piecewise-linear backbone; ``int ds / beta`` is exact cell by cell."""

    def __init__(self, grid, values):
        super().__init__(grid, values)
        v0, v1 = self.values[:-1], self.values[1:]
        width = np.diff(self.grid)
        self._cumulative = np.concatenate(([0.0], np.cumsum(width * _log_ratio_over(v0, v1))))

    def unit(self, s):
        s = np.asarray(s, dtype=float)
        self._check(s)
        return np.interp(s, self.grid, self.values)

    def _partial(self, a, b):
        va, vb = self.unit(a), self.unit(b)
        return (b - a) * _log_ratio_over(va, vb)

    def derivative(self, s, order=1):
        s = np.asarray(s, dtype=float)
        self._check(s)
        if order == 2:
            return _out(np.zeros_like(s))
        i = self._segment(s)
        return _out(np.diff(self.values)[i] / np.diff(self.grid)[i])


def _log_ratio_over(va, vb):
    """``log(vb/va) / (vb - va)``: mean of 1/v over a linear cell, stable as vb -> va."""
    w = (vb - va) / va
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(np.abs(w) < 1e-12, 1.0 - 0.5 * w, np.log1p(w) / w)
    return f / va


def inv_beta_integral(S, K, backbone: Backbone):
    """Signed integral ``int_S^K ds / beta(s)``."""
    return backbone.inv_integral(S, K)


# ------------------------------------------------------------ model inputs


class LocalVolModel:
    """Local volatility ``dS = v(S, t) dW``."""

    def v(self, s, t):
        raise NotImplementedError

    def at(self, T) -> Backbone:
        """The maturity slice ``s -> v(s, T)`` as a backbone."""
        raise NotImplementedError


@dataclass(frozen=True)
class CEVLocalVol(LocalVolModel):
    """``v(s, t) = c(t) * s**gamma``; ``c`` is a positive number or a function of t."""

    c: Union[float, Callable[[float], float]] = 0.2
    gamma: float = 1.0

    def scale(self, t):
        return float(self.c(t)) if callable(self.c) else float(self.c)

    def v(self, s, t):
        t = np.asarray(t, dtype=float)
        if callable(self.c):
            scale = np.vectorize(lambda u: float(self.c(u)))(t)
        else:
            scale = float(self.c)
        return _out(scale * np.power(np.asarray(s, dtype=float), self.gamma))

    def at(self, T):
        return CEVBackbone(self.scale(T), self.gamma)

    @property
    def is_lognormal(self) -> bool:
        return self.gamma == 1.0 and not callable(self.c)


class TabulatedLocalVol(LocalVolModel):
    """Local vol surface on an (s, t) grid with bilinear interpolation.

    ``values[i, j]`` is ``v(s_grid[j], t_grid[i])``; t is clamped to the grid.
    """

    def __init__(self, s_grid, t_grid, values):
        self.s_grid = np.asarray(s_grid, dtype=float)
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (self.t_grid.size, self.s_grid.size):
            raise DomainError("values must have shape (len(t_grid), len(s_grid))")
        if np.any(self.values <= 0):
            raise DomainError("local vol must be positive")
        if np.any(np.diff(self.t_grid) <= 0):
            raise DomainError("t_grid must be strictly increasing")
        self._slices = lru_cache(maxsize=64)(self._slice)
        self.is_lognormal = False

    def _row(self, t):
        t = float(np.clip(t, self.t_grid[0], self.t_grid[-1]))
        i = int(np.clip(np.searchsorted(self.t_grid, t, side="right") - 1, 0, max(self.t_grid.size - 2, 0)))
        if self.t_grid.size == 1:
            return self.values[0]
        w = (t - self.t_grid[i]) / (self.t_grid[i + 1] - self.t_grid[i])
        return (1.0 - w) * self.values[i] + w * self.values[i + 1]

    def _slice(self, T):
        return LinearBackbone(self.s_grid, self._row(T))

    def at(self, T):
        return self._slices(float(T))

    def v(self, s, t):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if t.ndim == 0:
            return _out(np.interp(s, self.s_grid, self._row(float(t))))
        s, t = np.broadcast_arrays(s, t)
        out = np.empty(s.shape)
        for tv in np.unique(t):
            m = t == tv
            out[m] = np.interp(s[m], self.s_grid, self._row(float(tv)))
        return out


@dataclass(frozen=True)
class SabrParams:
    """SABR model ``dS = alpha beta(S) dZ``, ``d alpha = nu alpha dW``, ``d<Z,W> = rho dt``."""

    alpha0: float
    nu: float
    rho: float
    backbone: Backbone = field(default_factory=CEVBackbone)

    def __post_init__(self):
        if not (self.alpha0 > 0):
            raise DomainError(f"alpha0 must be positive, got {self.alpha0}")
        if not (self.nu >= 0):
            raise DomainError(f"nu must be nonnegative, got {self.nu}")
        if not (abs(self.rho) < 1):
            raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")


class ForwardVarianceCurve:
    """Right-continuous piecewise-constant forward variance ``s -> xi(s)``.

    ``values[j]`` applies on ``[times[j], times[j+1])``; the last value extends
    to infinity. Integrals are exact.
    """

    def __init__(self, times, values):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if times.shape != values.shape or times.ndim != 1:
            raise DomainError("curve times and values must be 1-d arrays of equal length")
        if np.any(np.diff(times) <= 0):
            raise DomainError("curve times must be strictly increasing")
        if np.any(~(values > 0)) or np.any(~np.isfinite(values)):
            raise DomainError("forward variances must be positive and finite")
        self.times = times
        self.values = values
        self._cum = np.concatenate(([0.0], np.cumsum(np.diff(times) * values[:-1])))

    @classmethod
    def flat(cls, xi: float) -> "ForwardVarianceCurve":
        return cls([0.0], [xi])

    @property
    def is_flat(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def _check(self, s):
        if np.any(s < self.times[0]):
            raise RangeError(f"curve starts at {self.times[0]}")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        self._check(s)
        i = np.searchsorted(self.times, s, side="right") - 1
        return _out(self.values[i])

    def _antiderivative(self, s):
        i = np.searchsorted(self.times, s, side="right") - 1
        return self._cum[i] + (s - self.times[i]) * self.values[i]

    def integral(self, t, T):
        t = np.asarray(t, dtype=float)
        T = np.asarray(T, dtype=float)
        self._check(t)
        self._check(T)
        return _out(self._antiderivative(T) - self._antiderivative(t))

    def __repr__(self):
        return f"ForwardVarianceCurve(times={self.times.tolist()}, values={self.values.tolist()})"


@dataclass(frozen=True)
class RoughSabrParams:
    """Rough SABR: ``dS = alpha beta(S) dZ``, ``d xi_t(s) = zeta(s - t) xi_t(s) dW``.

    ``alpha_t = sqrt(xi_t(t))`` and ``zeta(t) = eta sqrt(2H) t^(H - 1/2)``.
    """

    H: float
    eta: float
    rho: float
    xi0: ForwardVarianceCurve
    backbone: Backbone = field(default_factory=CEVBackbone)

    def __post_init__(self):
        if not (0.0 < self.H <= 0.5):
            raise DomainError(f"H must lie in (0, 1/2], got {self.H}")
        if not (self.eta >= 0):
            raise DomainError(f"eta must be nonnegative, got {self.eta}")
        GParams(self.rho, self.H)

    @property
    def gparams(self) -> GParams:
        return GParams(self.rho, self.H)

    def zeta(self, tau):
        tau = np.asarray(tau, dtype=float)
        return _out(self.eta * math.sqrt(2.0 * self.H) * np.power(tau, self.H - 0.5))


ModelSpec = Union[LocalVolModel, SabrParams, RoughSabrParams]


# --------------------------------------------------------------- formulas


def bbf_sigma_bs(spot, strike, maturity, model: LocalVolModel):
    """BBF lognormal vol ``log(K/S) / int_S^K ds / v(s, T)``; ATM limit ``v(K, T) / K``."""
    return _out(_ratio(spot, strike, model.at(maturity), lognormal=True))


def bbf_sigma_bachelier(spot, strike, maturity, model: LocalVolModel):
    """BBF normal vol ``(K - S) / int_S^K ds / v(s, T)``; ATM limit ``v(K, T)``."""
    return _out(_ratio(spot, strike, model.at(maturity), lognormal=False))


def _sabr_y(spot, strike, params: SabrParams, alpha):
    return params.nu / alpha * params.backbone.inv_integral(spot, strike)


def _sabr_ratio(y, rho):
    y = np.asarray(y, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(y == 0.0, 1.0, sabr_g(y, rho) / y)


def sabr_sigma_bs(spot, strike, params: SabrParams, alpha=None):
    """Hagan's SABR lognormal vol ``nu k / g(Y)``, ``Y = (nu/alpha) int_S^K ds/beta``.

    ``alpha`` is the current vol state (``alpha0`` when omitted).
    """
    alpha = params.alpha0 if alpha is None else np.asarray(alpha, dtype=float)
    y = _sabr_y(spot, strike, params, alpha)
    return _out(alpha * _ratio(spot, strike, params.backbone) / _sabr_ratio(y, params.rho))


def sabr_sigma_bachelier(spot, strike, params: SabrParams, alpha=None):
    """SABR normal vol ``nu (K - S) / g(Y)``; ATM limit ``alpha beta(K)``."""
    alpha = params.alpha0 if alpha is None else np.asarray(alpha, dtype=float)
    y = _sabr_y(spot, strike, params, alpha)
    return _out(alpha * _ratio(spot, strike, params.backbone, lognormal=False) / _sabr_ratio(y, params.rho))


def u_average_vol(curve: ForwardVarianceCurve, t, T):
    """``sqrt((1/tau) int_t^T xi(s) ds)``, the root-mean forward variance to expiry."""
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(~(T > t)):
        raise DomainError("u_average_vol needs t < T")
    return _out(np.sqrt(curve.integral(t, T) / (T - t)))


def rough_sabr_y(spot, strike, tau, u, params: RoughSabrParams):
    return _out(params.zeta(tau) / np.asarray(u, dtype=float) * params.backbone.inv_integral(spot, strike))


def _rough_inputs(tau, params, sol, curve, t, u):
    if u is None:
        curve = params.xi0 if curve is None else curve
        u = u_average_vol(curve, t, np.asarray(t) + np.asarray(tau))
    if sol is None:
        raise DomainError("rough SABR formulas need a GSolution for (rho, H)")
    if sol.params is not None and (sol.params.rho != params.rho or sol.params.H != params.H):
        raise DomainError(f"GSolution solved for {sol.params}, model has rho={params.rho}, H={params.H}")
    return np.asarray(u, dtype=float)


def rough_sabr_sigma_bs(spot, strike, tau, params: RoughSabrParams, sol: GSolution, *, curve=None, t=0.0, u=None):
    """Rough SABR lognormal vol ``zeta(tau) k / g(Y)``, ``Y = zeta(tau)/U int_S^K ds/beta``.

    ``U`` is taken from ``u`` when given, otherwise from ``curve`` (default
    ``params.xi0``) over ``[t, t + tau]``. ATM limit: ``U beta(K) / K``.
    """
    u = _rough_inputs(tau, params, sol, curve, t, u)
    y = rough_sabr_y(spot, strike, tau, u, params)
    return _out(u * _ratio(spot, strike, params.backbone) / sol.ratio(y))


def rough_sabr_sigma_bachelier(spot, strike, tau, params: RoughSabrParams, sol: GSolution, *, curve=None, t=0.0, u=None):
    """Rough SABR normal vol ``zeta(tau) (K - S) / g(Y)``; ATM limit ``U beta(K)``."""
    u = _rough_inputs(tau, params, sol, curve, t, u)
    y = rough_sabr_y(spot, strike, tau, u, params)
    return _out(u * _ratio(spot, strike, params.backbone, lognormal=False) / sol.ratio(y))


def solve_for_range(params: RoughSabrParams, y_needed: float, y_min: float = 8.0) -> GSolution:
    """Solve g on ``[-Y, Y]`` with ``Y`` a power of two covering ``y_needed``."""
    y_max = y_min
    while y_max < y_needed * 1.05:
        y_max *= 2.0
    return _cached_solve(params.rho, params.H, y_max)


@lru_cache(maxsize=32)
def _cached_solve(rho, H, y_max):
    return solve_g(GParams(rho, H), y_max=y_max)


def atm_skew(params: RoughSabrParams, tau, sol: GSolution, spot: float = 1.0, u=None, h: float = 1e-3):
    """``d sigma / dk`` at ``k = 0`` by Richardson-extrapolated central differences."""

    def sigma(k):
        return rough_sabr_sigma_bs(spot, spot * math.exp(k), tau, params, sol, u=u)

    d1 = (sigma(h) - sigma(-h)) / (2 * h)
    d2 = (sigma(h / 2) - sigma(-h / 2)) / h
    return (4.0 * d2 - d1) / 3.0


# ------------------------------------------------------------ smile tables

SMILE_COLUMNS = ("strike", "k", "x", "sigma_bs", "sigma_bachelier")


@dataclass
class SmileTable:
    """Formula vols per strike, sorted by strike; per-row errors are kept, not raised."""

    rows: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)

    def to_csv(self, path_or_buf=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SMILE_COLUMNS)
        for row in self.rows:
            w.writerow([repr(float(row[c])) for c in SMILE_COLUMNS])
        text = buf.getvalue()
        if path_or_buf is not None:
            if hasattr(path_or_buf, "write"):
                path_or_buf.write(text)
            else:
                with open(path_or_buf, "w", newline="") as fh:
                    fh.write(text)
        return text

    def column(self, name):
        return np.array([r[name] for r in self.rows])


def _formula_pair(model, spot, strike, point, sol, curve):
    if isinstance(model, LocalVolModel):
        T = point.maturity
        return bbf_sigma_bs(spot, strike, T, model), bbf_sigma_bachelier(spot, strike, T, model)
    if isinstance(model, SabrParams):
        return sabr_sigma_bs(spot, strike, model), sabr_sigma_bachelier(spot, strike, model)
    if isinstance(model, RoughSabrParams):
        kw = dict(curve=curve, t=point.t)
        return (
            rough_sabr_sigma_bs(spot, strike, point.tau, model, sol, **kw),
            rough_sabr_sigma_bachelier(spot, strike, point.tau, model, sol, **kw),
        )
    raise TypeError(f"unsupported model {type(model).__name__}")


def smile_table(model: ModelSpec, strikes, point: MarketPoint, sol: GSolution | None = None, curve=None) -> SmileTable:
    """Evaluate the model's matching formula, both flavors, at each strike."""
    strikes = sorted(float(k) for k in strikes)
    if isinstance(model, RoughSabrParams) and sol is None and strikes:
        c = model.xi0 if curve is None else curve
        u = u_average_vol(c, point.t, point.maturity)
        ys = [abs(rough_sabr_y(point.spot, k, point.tau, u, model)) for k in strikes if k > 0]
        sol = solve_for_range(model, max(ys, default=0.0))
    table = SmileTable()
    for K in strikes:
        row = {"strike": K, "k": math.nan, "x": K - point.spot, "sigma_bs": math.nan, "sigma_bachelier": math.nan}
        try:
            row["k"] = math.log(K / point.spot)
            row["sigma_bs"], row["sigma_bachelier"] = (float(v) for v in _formula_pair(model, point.spot, K, point, sol, curve))
        except (ValueError, ArithmeticError) as exc:
            table.errors[K] = str(exc)
        table.rows.append(row)
    return table
