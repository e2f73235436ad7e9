"""The g-functions that divide log-moneyness in the SABR-type smile formulas.

For SABR the function is closed form. For rough SABR it solves

    g'(y)^2 q(y) = 1 - (1 - 2H) (1 - y g'(y) / g(y)),   g(0) = 0, g'(0) > 0,
    q(y) = 1 + 2 rho y / (2H + 1) + y^2 / (2H + 1)^2,

which resolves to the explicit form ``g'(y) = phi(y, y / g(y))``. Two
independent solvers are provided: the monotone fixed-point (Picard) scheme
``g_{n+1}(y) = int_0^y phi(u, u / g_n(u)) du`` started from
``g_0(y) = int_0^y phi(u, 0) du``, and an adaptive Runge-Kutta march seeded by
the second-order expansion ``g(y) = y + b y^2 / 2 + O(y^3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .errors import ConvergenceError, DomainError, InvariantViolation, RangeError

RHO_LIMIT = 0.999
DEFAULT_Y_MAX = 8.0
DEFAULT_N = 4097

# relative slack for the monotone sandwich check; iterates agree to rounding near convergence
_SANDWICH_SLACK = 1e-13


@dataclass(frozen=True)
class GParams:
    """Correlation and Hurst index of the rough SABR g-function."""

    rho: float
    H: float

    def __post_init__(self):
        if not (abs(self.rho) <= RHO_LIMIT):
            raise DomainError(f"|rho| must be <= {RHO_LIMIT}, got {self.rho}")
        if not (0.0 < self.H <= 0.5):
            raise DomainError(f"H must lie in (0, 1/2], got {self.H}")


def _check_rho(rho):
    if np.any(~(np.abs(rho) < 1.0)):
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")


def sabr_g(y, rho):
    """Closed-form SABR g, ``-log((sqrt(1 + 2 rho y + y^2) - y - rho) / (1 - rho))``.

    Evaluated through ``log1p`` on whichever branch avoids cancellation, so
    ``g(y) / y`` keeps full relative precision as ``y -> 0``.
    """
    _check_rho(rho)
    y = np.asarray(y, dtype=float)
    root = np.sqrt(1.0 + 2.0 * rho * y + y * y)
    tail = (2.0 * rho * y + y * y) / (root + 1.0)  # sqrt(q) - 1
    with np.errstate(invalid="ignore", divide="ignore"):
        pos = np.log1p((y + tail) / (1.0 + rho))
        neg = -np.log1p((tail - y) / (1.0 - rho))
    out = np.where(y >= 0.0, pos, neg)
    return out.item() if out.ndim == 0 else out


def sabr_g_prime(y, rho):
    _check_rho(rho)
    y = np.asarray(y, dtype=float)
    out = 1.0 / np.sqrt(1.0 + 2.0 * rho * y + y * y)
    return out.item() if out.ndim == 0 else out


def q_factor(y, gp: GParams):
    c = 1.0 / (2.0 * gp.H + 1.0)
    y = np.asarray(y, dtype=float)
    return 1.0 + 2.0 * gp.rho * c * y + (c * y) ** 2


def phi_resolvent(y, z, gp: GParams):
    """Positive root of the rough SABR ODE read as a quadratic in ``g'``.

    ``z`` stands for ``y / g(y)``; the result is nondecreasing in ``z``.
    """
    a = 1.0 - 2.0 * gp.H
    q = q_factor(y, gp)
    z = np.asarray(z, dtype=float)
    out = (a * z + np.sqrt((a * z) ** 2 + 8.0 * gp.H * q)) / (2.0 * q)
    return out.item() if np.ndim(out) == 0 else out


def phi_dz(y, z, gp: GParams):
    a = 1.0 - 2.0 * gp.H
    q = q_factor(y, gp)
    z = np.asarray(z, dtype=float)
    root = np.sqrt((a * z) ** 2 + 8.0 * gp.H * q)
    return (a + a * a * z / root) / (2.0 * q)


def phi_dy(y, z, gp: GParams):
    a = 1.0 - 2.0 * gp.H
    c = 1.0 / (2.0 * gp.H + 1.0)
    y = np.asarray(y, dtype=float)
    q = q_factor(y, gp)
    dq = 2.0 * gp.rho * c + 2.0 * c * c * y
    root = np.sqrt((a * z) ** 2 + 8.0 * gp.H * q)
    dphi_dq = (8.0 * gp.H * q / root - (a * z + root)) / (2.0 * q * q)
    return dphi_dq * dq


def curvature_closed_form(gp: GParams) -> float:
    return -4.0 * gp.rho / ((1.0 + 2.0 * gp.H) * (3.0 + 2.0 * gp.H))


def curvature_coeff(gp: GParams, step: float = 1e-5) -> float:
    """Second-order Taylor coefficient ``b = g''(0)`` of the rough SABR g.

    ``b = phi_y(0, 1) / (1 + phi_z(0, 1) / 2)``. The partials are taken by
    central differences and the result must match the closed form
    ``-4 rho / ((1 + 2H)(3 + 2H))`` to 1e-8.
    """
    d_y = (phi_resolvent(step, 1.0, gp) - phi_resolvent(-step, 1.0, gp)) / (2.0 * step)
    d_z = (phi_resolvent(0.0, 1.0 + step, gp) - phi_resolvent(0.0, 1.0 - step, gp)) / (2.0 * step)
    b_fd = d_y / (1.0 + 0.5 * d_z)
    b = curvature_closed_form(gp)
    if abs(b_fd - b) > 1e-8:
        raise InvariantViolation(f"curvature mismatch: finite difference {b_fd!r} vs closed form {b!r}")
    return b


@dataclass(frozen=True, eq=False)
class GSolution:
    """Tabulated g and g' on a symmetric uniform grid, with solver metadata."""

    y: np.ndarray
    g: np.ndarray
    gprime: np.ndarray
    b: float
    params: GParams | None
    method: str
    iterations: int = 0
    tol: float = 0.0
    max_residual: float = float("nan")
    history: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("y", "g", "gprime"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        # interpolate the smooth ratio G = g/y rather than g, so g/y near 0 keeps full accuracy
        y, g, dg = self.y, self.g, self.gprime
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(y == 0.0, 1.0, g / y)
            dratio = np.where(y == 0.0, 0.5 * self.b, (dg - ratio) / y)
        spline = CubicHermiteSpline(y, ratio, dratio)
        object.__setattr__(self, "_spline", spline)
        object.__setattr__(self, "_dspline", spline.derivative())

    @property
    def y_max(self) -> float:
        return float(self.y[-1])

    def _check_range(self, y):
        if np.any(np.abs(y) > self.y_max * (1 + 1e-12)):
            raise RangeError(
                f"|y| up to {float(np.max(np.abs(y))):.4g} exceeds the solved range "
                f"{self.y_max:.4g}; solve g on a wider grid"
            )

    def ratio_and_slope(self, y):
        """Return ``(g(y)/y, g'(y))`` by cubic Hermite interpolation of ``g/y``."""
        y = np.asarray(y, dtype=float)
        self._check_range(y)
        r = self._spline(y)
        return r, r + y * self._dspline(y)

    def eval(self, y):
        """Return ``(g(y), g'(y))``; exact at grid nodes."""
        r, dg = self.ratio_and_slope(y)
        g = np.asarray(y) * r
        if np.ndim(y) == 0:
            return float(g), float(dg)
        return g, dg

    def ratio(self, y):
        """``g(y) / y`` with its limit ``g'(0) = 1`` at the origin."""
        y = np.asarray(y, dtype=float)
        self._check_range(y)
        r = self._spline(y)
        return r.item() if r.ndim == 0 else r


def g_eval(sol: GSolution, y):
    return sol.eval(y)


def _symmetric_grid(y_max, n):
    if not (y_max > 0):
        raise DomainError(f"y_max must be positive, got {y_max}")
    if n < 3 or n % 2 == 0:
        raise DomainError(f"grid size must be odd and >= 3 so that 0 is a node, got {n}")
    y = np.linspace(-y_max, y_max, n)
    y[n // 2] = 0.0
    return y


def _cumulative_simpson(f, h):
    """Running integral from node 0 of samples ``f`` spaced by ``h`` (h may be negative).

    Even nodes use composite Simpson; odd nodes add a four-point single-panel
    rule (exact for cubics) to the preceding even node, so every node has an
    O(h^5) local error and ``g/y`` stays accurate next to the origin.
    """
    m = f.size
    if m < 4:
        raise DomainError("need at least 4 samples per half-grid")
    out = np.empty(m)
    pairs = (h / 3.0) * (f[0:-2:2] + 4.0 * f[1:-1:2] + f[2::2])
    out[0::2][: pairs.size + 1] = np.concatenate(([0.0], np.cumsum(pairs)))
    odd = np.arange(1, m, 2)
    fwd = odd + 2 < m
    o = odd[fwd]
    out[o] = out[o - 1] + (h / 24.0) * (9.0 * f[o - 1] + 19.0 * f[o] - 5.0 * f[o + 1] + f[o + 2])
    o = odd[~fwd]
    # panels too close to the end for the forward stencil use the mirrored one
    out[o] = out[o - 1] + (h / 24.0) * (f[o - 3] - 5.0 * f[o - 2] + 19.0 * f[o - 1] + 9.0 * f[o])
    return out


def _integrate_from_origin(f, h, center):
    """Signed integrals int_0^{y_i} on a symmetric grid, given integrand samples."""
    out = np.empty_like(f)
    out[center:] = _cumulative_simpson(f[center:], h)
    out[: center + 1] = _cumulative_simpson(f[center::-1], -h)[::-1]
    return out


def _ratio_from_integral(integral, y, center, at_origin):
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = integral / y
    ratio[center] = at_origin
    return ratio


def _residual(y, g, gprime, gp):
    with np.errstate(invalid="ignore", divide="ignore"):
        slope_ratio = np.where(y == 0.0, 1.0, y * gprime / g)
    q = q_factor(y, gp)
    return np.abs(gprime**2 * q - 1.0 + (1.0 - 2.0 * gp.H) * (1.0 - slope_ratio))


def solve_g_picard(
    gp: GParams,
    y_max: float = DEFAULT_Y_MAX,
    n: int = DEFAULT_N,
    tol: float = 1e-12,
    max_iter: int = 2000,
    check_sandwich: bool = True,
) -> GSolution:
    """Solve the rough SABR g-equation by monotone fixed-point iteration.

    Iterates are tracked through ``G_n = g_n / y``. Convergence is declared when
    ``max |G_{n+1} - G_n| <= tol`` over the whole grid. With ``check_sandwich``
    every iterate is checked against the ordering

        0 < G_0 <= G_{2n} <= G_{2n+2} <= G_{2n+3} <= G_{2n+1}.
    """
    b = curvature_coeff(gp)
    y = _symmetric_grid(y_max, n)
    center = n // 2
    h = y[center + 1] - y[center]

    def step(ratio):
        z = 1.0 / ratio
        f = phi_resolvent(y, z, gp)
        return _ratio_from_integral(_integrate_from_origin(f, h, center), y, center, f[center]), f

    f0 = phi_resolvent(y, 0.0, gp)
    g0_ratio = _ratio_from_integral(_integrate_from_origin(f0, h, center), y, center, f0[center])
    if np.any(g0_ratio <= 0):
        raise InvariantViolation("seed iterate has y*g(y) <= 0")

    def slack(a):
        return _SANDWICH_SLACK * np.maximum(1.0, np.abs(a))

    iterates = [g0_ratio]
    violations = 0
    gap = math.inf
    ratio = g0_ratio
    for it in range(1, max_iter + 1):
        new, _ = step(ratio)
        if np.any(~(new > 0)):
            raise InvariantViolation(f"iterate {it} has y*g(y) <= 0 away from the origin")
        if check_sandwich:
            prev2 = iterates[-2] if len(iterates) >= 2 else None
            if it % 2 == 0:
                # even iterate: bounded below by the previous even one, above by the last odd one
                ok = np.all(new >= prev2 - slack(new)) and np.all(new <= ratio + slack(new))
            else:
                ok = np.all(new >= ratio - slack(new))
                if prev2 is not None:
                    ok = ok and np.all(new <= prev2 + slack(new))
            ok = ok and np.all(new >= g0_ratio - slack(new))
            if not ok:
                violations += 1
                raise InvariantViolation(f"sandwich ordering violated at iterate {it}")
        gap = float(np.max(np.abs(new - ratio)))
        iterates = [ratio, new]
        ratio = new
        if gap <= tol:
            break
    else:
        raise ConvergenceError(
            f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations (gap {gap:.3g})",
            gap=gap,
        )

    # the origin value converges to the unique root of a = phi(0, 1/a), which is 1
    origin_value = float(ratio[center])
    ratio = ratio.copy()
    ratio[center] = 1.0
    g = y * ratio
    gprime = phi_resolvent(y, 1.0 / ratio, gp)
    gprime[center] = 1.0
    resid = _residual(y, g, gprime, gp)
    return GSolution(
        y=y,
        g=g,
        gprime=gprime,
        b=b,
        params=gp,
        method="picard",
        iterations=it,
        tol=tol,
        max_residual=float(np.max(resid)),
        history={"gap": gap, "origin_value": origin_value, "sandwich_violations": violations},
    )


def solve_g_march(
    gp: GParams,
    y_max: float = DEFAULT_Y_MAX,
    n: int = DEFAULT_N,
    tol: float = 1e-10,
    method: str = "DOP853",
) -> GSolution:
    """Solve the rough SABR g-equation by adaptive Runge-Kutta marching.

    Starts at ``+-y_seed`` from the series ``y + b y^2 / 2`` (truncation
    ``O(y_seed^3) <= tol``) and integrates ``g' = phi(y, y / g)`` outward.
    """
    if not (tol > 0):
        raise DomainError("tol must be positive")
    b = curvature_coeff(gp)
    y = _symmetric_grid(y_max, n)
    center = n // 2
    h = y[center + 1] - y[center]
    y_seed = min(tol ** (1.0 / 3.0), 0.25 * h)

    def rhs(u, g):
        return phi_resolvent(u, u / g, gp)

    def blown_through_zero(u, g):
        return g[0]

    blown_through_zero.terminal = True

    g = np.empty(n)
    g[center] = 0.0
    for sign, nodes in ((1.0, np.arange(center + 1, n)), (-1.0, np.arange(center - 1, -1, -1))):
        y0 = sign * y_seed
        g_start = y0 + 0.5 * b * y0 * y0
        res = solve_ivp(
            rhs,
            (y0, y[nodes[-1]]),
            [g_start],
            method=method,
            t_eval=y[nodes],
            rtol=tol,
            atol=tol * 1e-3,
            events=blown_through_zero,
        )
        if res.status == 1:
            raise InvariantViolation("g crossed zero away from the origin")
        if res.status != 0:
            raise ConvergenceError(f"ODE march failed: {res.message}")
        g[nodes] = res.y[0]
    if np.any(np.delete(y * g, center) <= 0):
        raise InvariantViolation("marched solution has y*g(y) <= 0")
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(y == 0.0, 1.0, y / g)
    gprime = phi_resolvent(y, z, gp)
    gprime[center] = 1.0
    resid = _residual(y, g, gprime, gp)
    return GSolution(
        y=y,
        g=g,
        gprime=gprime,
        b=b,
        params=gp,
        method="march",
        tol=tol,
        max_residual=float(np.max(resid)),
        history={"y_seed": y_seed},
    )


def pointwise_residual(sol: GSolution, gp: GParams | None = None) -> np.ndarray:
    """``|g'^2 q - 1 + (1 - 2H)(1 - y g'/g)|`` at every grid node (0 at the origin)."""
    return _residual(sol.y, sol.g, sol.gprime, gp or sol.params)


def ode_residual(sol: GSolution, gp: GParams | None = None) -> float:
    """Maximum pointwise residual of the rough SABR g-equation over the grid."""
    return float(np.max(pointwise_residual(sol, gp)))


def sabr_solution(rho: float, y_max: float = DEFAULT_Y_MAX, n: int = DEFAULT_N) -> GSolution:
    """Tabulate the closed-form SABR g on the standard grid (``b = -rho``)."""
    y = _symmetric_grid(y_max, n)
    return GSolution(
        y=y, g=sabr_g(y, rho), gprime=sabr_g_prime(y, rho), b=-rho, params=None, method="sabr-closed-form"
    )


def half_hurst_exact(y, rho):
    """Exact rough-SABR g at H = 1/2: ``2 * sabr_g(y / 2, rho)``."""
    return 2.0 * sabr_g(np.asarray(y, dtype=float) / 2.0, rho)


def near_zero_limits(sol: GSolution, y: float = 1e-3) -> dict:
    """Finite-difference limits at the origin that identify ``b = g''(0)``.

    Returns the three estimates ``2 (g(y)/y - 1) / y``, ``(g'(y) - 1) / y`` and the
    central second difference of g, each averaged over ``+-y``; all tend to b.
    """
    r_p, r_m = sol.ratio(y), sol.ratio(-y)
    (g_p, d_p), (g_m, d_m) = sol.eval(y), sol.eval(-y)
    return {
        "ratio": 0.5 * (2.0 * (r_p - 1.0) / y + 2.0 * (r_m - 1.0) / (-y)),
        "slope": 0.5 * ((d_p - 1.0) / y + (d_m - 1.0) / (-y)),
        "second_difference": (g_p - 2.0 * 0.0 + g_m) / (y * y),
    }


def solve_g(gp: GParams, y_max: float = DEFAULT_Y_MAX, n: int | None = None, tol: float = 1e-12) -> GSolution:
    """Picard solve with a grid spacing matching the default ``16/4096``."""
    if n is None:
        n = 2 * int(math.ceil(y_max / (DEFAULT_Y_MAX / (DEFAULT_N // 2)))) + 1
    return solve_g_picard(gp, y_max=y_max, n=n, tol=tol)
