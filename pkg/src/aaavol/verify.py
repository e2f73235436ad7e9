"""Numerical checks of the drift conditions for implied-volatility approximations.

An implied-vol approximation ``Sigma(t, X)`` of a Markov state ``X`` is
asymptotically arbitrage-free when the residual

    r = d<k/Sigma>/dt - 1 + 2 tau D/Sigma - tau d<k, log Sigma>/dt - (tau^2/4) d<Sigma>/dt

(lognormal flavor, ``k = log(K/S)``), or

    r = d<x/Sigma>/dt - 1 + 2 tau D/Sigma

(normal flavor, ``x = K - S``), vanishes as ``tau -> 0`` uniformly in strike.
Here ``D`` is the drift of ``Sigma``. Quadratic-variation densities come
from the model's diffusion matrix and the chain rule. The drift is the
generator applied to ``Sigma`` by central finite differences.

Markov states used: ``(S,)`` for local vol, ``(S, alpha)`` for SABR and
``(S, U)`` for rough SABR. In the rough case alpha and ``R`` enter the
dynamics of U as parameters, and ``R`` is frozen at its current value.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, RangeError
from .gfun import GSolution, sabr_g_prime
from .mc import SimGrid, simulate_local_vol, simulate_rough_sabr, simulate_sabr
from .smile import (
    ATM_THRESHOLD,
    CEVLocalVol,
    LocalVolModel,
    RoughSabrParams,
    SabrParams,
    atm_skew,
    bbf_sigma_bachelier,
    bbf_sigma_bs,
    rough_sabr_sigma_bachelier,
    rough_sabr_sigma_bs,
    rough_sabr_y,
    sabr_sigma_bachelier,
    sabr_sigma_bs,
    solve_for_range,
)

GRAD_STEP = 1e-5
HESS_STEP = 1e-4
RICHARDSON_STEPS = (2e-2, 1e-2, 5e-3)
RICHARDSON_BAND = (3.5, 4.5)
ATM_NUDGE = 1e-6
Y_CAP = 30.0

COMPONENTS = ("qv", "const", "drift", "cross", "variance")


# ---------------------------------------------------------------- identities


def sabr_qv_identity(Y, rho):
    """``|g'(Y)^2 (1 + 2 rho Y + Y^2) - 1|`` for the closed-form SABR g."""
    Y = np.asarray(Y, dtype=float)
    rho = np.asarray(rho, dtype=float)
    out = np.abs(sabr_g_prime(Y, rho) ** 2 * (1.0 + 2.0 * rho * Y + Y * Y) - 1.0)
    return out.item() if out.ndim == 0 else out


def rough_main_term(Y, alpha_over_u, R, sol: GSolution):
    """Leading part of the rough SABR residual.

    ``g'^2 (a^2 + a R rho Y + R^2 Y^2 / 4) - 1 + (1 - 2H)(1 - Y g'/g) + (Y g'/g)(1 - a^2)``
    with ``a = alpha / U``. At ``a = 1`` and ``R = 1/(H + 1/2)`` it reduces to the
    ODE residual of g.
    """
    gp = sol.params
    Y = np.asarray(Y, dtype=float)
    a = np.asarray(alpha_over_u, dtype=float)
    ratio, dg = sol.ratio_and_slope(Y)
    elasticity = dg / ratio  # Y g'/g, equal to 1 at the origin
    out = (
        dg**2 * (a * a + a * R * gp.rho * Y + 0.25 * R * R * Y * Y)
        - 1.0
        + (1.0 - 2.0 * gp.H) * (1.0 - elasticity)
        + elasticity * (1.0 - a * a)
    )
    return out.item() if out.ndim == 0 else out


# ------------------------------------------------------------ finite differences


def _shift(X, i, d):
    Y = list(X)
    Y[i] = X[i] + d
    return tuple(Y)


def _generator_terms(f, t, X, dt, rel_g, rel_h):
    """Gradient, Hessian and time derivative of ``f(t, X)`` by central differences."""
    d = len(X)
    f0 = f(t, X)
    hg = [rel_g * np.abs(x) for x in X]
    hh = [rel_h * np.abs(x) for x in X]
    grad = [(f(t, _shift(X, i, hg[i])) - f(t, _shift(X, i, -hg[i]))) / (2.0 * hg[i]) for i in range(d)]
    hess = [[None] * d for _ in range(d)]
    for i in range(d):
        hi = hh[i]
        hess[i][i] = (f(t, _shift(X, i, hi)) - 2.0 * f0 + f(t, _shift(X, i, -hi))) / (hi * hi)
        for j in range(i + 1, d):
            hj = hh[j]
            pp = f(t, _shift(_shift(X, i, hi), j, hj))
            pm = f(t, _shift(_shift(X, i, hi), j, -hj))
            mp = f(t, _shift(_shift(X, i, -hi), j, hj))
            mm = f(t, _shift(_shift(X, i, -hi), j, -hj))
            hess[i][j] = hess[j][i] = (pp - pm - mp + mm) / (4.0 * hi * hj)
    if dt is None:
        f_t = 0.0
    else:
        ht = rel_h * dt
        f_t = (f(t + ht, X) - f(t - ht, X)) / (2.0 * ht)
    return f0, grad, hess, f_t


def _apply_generator(grad, hess, f_t, mu, C):
    d = len(grad)
    D = f_t
    for i in range(d):
        if mu[i] is not None:
            D = D + mu[i] * grad[i]
        for j in range(d):
            D = D + 0.5 * C[i][j] * hess[i][j]
    return D


def drift_via_generator(f, t, X, mu, C, *, time_scale=None, rel_grad=GRAD_STEP, rel_hess=HESS_STEP):
    """Drift ``D = df/dt + mu . grad f + (1/2) tr(C hess f)`` of ``f(t, X)``.

    ``X`` is a tuple of state arrays, ``mu`` a tuple of drift arrays (``None``
    for zero) and ``C[i][j]`` the instantaneous covariance. ``time_scale``
    (the time to expiry) enables the time derivative, taken with step
    ``rel_hess * time_scale``. Returns ``(D, grad)``.
    """
    f0, grad, hess, f_t = _generator_terms(f, t, X, time_scale, rel_grad, rel_hess)
    return _apply_generator(grad, hess, f_t, mu, C), grad


def richardson_ratio(f, t, X, mu, C, *, time_scale=None, steps=RICHARDSON_STEPS):
    """``(D(h) - D(h/2)) / (D(h/2) - D(h/4))``, about 4 for second-order differences.

    NaN where the two differences are at rounding level (f locally polynomial
    of degree <= 3, or constant), which is reported as exact.
    """
    Ds = []
    for h in steps:
        f0, grad, hess, f_t = _generator_terms(f, t, X, time_scale, h, h)
        Ds.append(np.asarray(_apply_generator(grad, hess, f_t, mu, C), dtype=float))
    a, b = Ds[0] - Ds[1], Ds[1] - Ds[2]
    scale = np.maximum(np.abs(Ds[2]), 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = a / b
    tiny = np.abs(b) <= 1e-9 * scale
    return np.where(tiny, np.nan, ratio)


# --------------------------------------------------------------- model flavors


class _Flavor:
    """Sigma as a function of ``(t, X)`` plus the state dynamics."""

    lognormal = True
    uses_time = False

    def sigma(self, t, X, K):
        raise NotImplementedError

    def dynamics(self, t, X):
        """Return ``(mu, C)`` for the state."""
        raise NotImplementedError

    def qv_ratio(self, t, X, K):
        """Analytic ``d<k/Sigma>/dt`` (or ``d<x/Sigma>/dt``)."""
        raise NotImplementedError


class _BBF(_Flavor):
    def __init__(self, model: LocalVolModel, maturity, lognormal):
        self.model, self.T, self.lognormal = model, float(maturity), lognormal

    def sigma(self, t, X, K):
        fn = bbf_sigma_bs if self.lognormal else bbf_sigma_bachelier
        return np.asarray(fn(X[0], K, self.T, self.model), dtype=float)

    def dynamics(self, t, X):
        v = np.asarray(self.model.v(X[0], t), dtype=float)
        return (None,), [[v * v]]

    def qv_ratio(self, t, X, K):
        # k / Sigma = int_S^K ds / v(s, T), whose S-derivative is -1 / v(S, T)
        S = X[0]
        num = np.asarray(self.model.v(S, t), dtype=float)
        den = np.asarray(self.model.v(S, self.T), dtype=float)
        return (num / den) ** 2


class _SABR(_Flavor):
    def __init__(self, params: SabrParams, lognormal):
        self.p, self.lognormal = params, lognormal

    def sigma(self, t, X, K):
        fn = sabr_sigma_bs if self.lognormal else sabr_sigma_bachelier
        return np.asarray(fn(X[0], K, self.p, alpha=X[1]), dtype=float)

    def dynamics(self, t, X):
        S, a = X
        p = self.p
        b = np.asarray(p.backbone(S), dtype=float)
        css = (a * b) ** 2
        csa = p.rho * p.nu * a * a * b
        caa = (p.nu * a) ** 2
        return (None, None), [[css, csa], [csa, caa]]

    def y(self, X, K):
        return self.p.nu / X[1] * np.asarray(self.p.backbone.inv_integral(X[0], K), dtype=float)

    def qv_ratio(self, t, X, K):
        Y = self.y(X, K)
        return sabr_g_prime(Y, self.p.rho) ** 2 * (1.0 + 2.0 * self.p.rho * Y + Y * Y)


class _Rough(_Flavor):
    uses_time = True

    def __init__(self, params: RoughSabrParams, sol: GSolution, maturity, alpha, R, lognormal):
        self.p, self.sol, self.T = params, sol, float(maturity)
        self.alpha, self.R, self.lognormal = alpha, R, lognormal

    def sigma(self, t, X, K):
        fn = rough_sabr_sigma_bs if self.lognormal else rough_sabr_sigma_bachelier
        return np.asarray(fn(X[0], K, self.T - t, self.p, self.sol, u=X[1]), dtype=float)

    def dynamics(self, t, X):
        S, U = X
        p = self.p
        tau = self.T - t
        z = float(p.zeta(tau))
        a, R = self.alpha, self.R
        b = np.asarray(p.backbone(S), dtype=float)
        mu_u = 0.5 * U * ((1.0 - (a / U) ** 2) / tau - 0.25 * (z * R) ** 2)
        css = (a * b) ** 2
        csu = p.rho * a * b * 0.5 * z * R * U
        cuu = (0.5 * z * R * U) ** 2
        return (None, mu_u), [[css, csu], [csu, cuu]]

    def qv_ratio(self, t, X, K):
        S, U = X
        Y = np.asarray(rough_sabr_y(S, K, self.T - t, U, self.p), dtype=float)
        _, dg = self.sol.ratio_and_slope(Y)
        a, R = self.alpha / U, self.R
        return dg**2 * (a * a + a * R * self.p.rho * Y + 0.25 * R * R * Y * Y)


def _flavor(model, state, maturity, sol, lognormal):
    if isinstance(model, LocalVolModel):
        return _BBF(model, maturity, lognormal), (np.asarray(state["S"], float),)
    if isinstance(model, SabrParams):
        return _SABR(model, lognormal), (np.asarray(state["S"], float), np.asarray(state["alpha"], float))
    if isinstance(model, RoughSabrParams):
        if sol is None:
            raise DomainError("rough SABR residuals need a GSolution")
        fl = _Rough(model, sol, maturity, np.asarray(state["alpha"], float), np.asarray(state["R"], float), lognormal)
        return fl, (np.asarray(state["S"], float), np.asarray(state["U"], float))
    raise DomainError(f"unsupported model {type(model).__name__}")


# ------------------------------------------------------------------ residuals


@dataclass
class ResidualSample:
    """Residuals at one time for a batch of states and one strike."""

    t: float
    tau: float
    strike: float
    r: np.ndarray
    components: dict
    flagged_atm: np.ndarray
    richardson: np.ndarray | None = None

    def component_sum(self) -> np.ndarray:
        return sum(self.components[c] for c in COMPONENTS)


def _residual(model, state, strike, t, maturity, sol, lognormal, richardson):
    tau = float(maturity) - float(t)
    if not (tau > 0):
        raise DomainError("residuals need t < T")
    fl, X = _flavor(model, state, maturity, sol, lognormal)
    K = float(strike)
    S = X[0]
    flagged = np.abs(np.log(K / S)) < ATM_THRESHOLD

    def pieces(Kx):
        f = lambda tt, XX: fl.sigma(tt, XX, Kx)  # noqa: E731
        mu, C = fl.dynamics(t, X)
        D, grad = drift_via_generator(f, t, X, mu, C, time_scale=tau if fl.uses_time else None)
        sig = f(t, X)
        qv = fl.qv_ratio(t, X, Kx)
        comps = {"qv": qv, "const": -np.ones_like(sig), "drift": 2.0 * tau * D / sig}
        if fl.lognormal:
            # grad k = (-1/S, 0, ...)
            cross_rate = -sum(C[0][j] * grad[j] for j in range(len(X))) / S / sig
            var_rate = sum(C[i][j] * grad[i] * grad[j] for i in range(len(X)) for j in range(len(X)))
            comps["cross"] = -tau * cross_rate
            comps["variance"] = -0.25 * tau * tau * var_rate
        else:
            comps["cross"] = np.zeros_like(sig)
            comps["variance"] = np.zeros_like(sig)
        ratio = None
        if richardson:
            ratio = richardson_ratio(f, t, X, mu, C, time_scale=tau if fl.uses_time else None)
        return comps, ratio

    comps, ratio = pieces(K)
    if np.any(flagged):
        # S == K to working precision: average the two nudged strikes
        up, r_up = pieces(K * (1.0 + ATM_NUDGE))
        dn, r_dn = pieces(K * (1.0 - ATM_NUDGE))
        for c in COMPONENTS:
            comps[c] = np.where(flagged, 0.5 * (up[c] + dn[c]), comps[c])
        if ratio is not None:
            ratio = np.where(flagged, 0.5 * (r_up + r_dn), ratio)
    comps = {c: np.broadcast_to(np.asarray(comps[c], float), S.shape).copy() for c in COMPONENTS}
    r = comps["qv"] + comps["const"] + comps["drift"] + comps["cross"] + comps["variance"]
    return ResidualSample(float(t), tau, K, r, comps, flagged, ratio)


def def3_residual(model, state, strike, t, maturity, sol=None, richardson=False) -> ResidualSample:
    """Lognormal-flavor residual for states ``{"S", "alpha", "U", "R"}`` at time t."""
    return _residual(model, state, strike, t, maturity, sol, True, richardson)


def def4_residual(model, state, strike, t, maturity, sol=None, richardson=False) -> ResidualSample:
    """Normal-flavor residual ``d<x/Sigma>/dt - 1 + 2 tau D / Sigma``."""
    return _residual(model, state, strike, t, maturity, sol, False, richardson)


# --------------------------------------------------------------------- sweeps


def _fit_power(tau, y):
    """Least-squares slope of ``log y`` on ``log tau`` with its standard error."""
    x = np.log(np.asarray(tau, float))
    v = np.log(np.asarray(y, float))
    A = np.vstack([np.ones_like(x), x]).T
    coef, res, *_ = np.linalg.lstsq(A, v, rcond=None)
    n = x.size
    resid = v - A @ coef
    s2 = float(resid @ resid) / (n - 2) if n > 2 else float("nan")
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[1]), float(math.sqrt(cov[1, 1])), float(coef[0])


@dataclass
class ResidualReport:
    tau_levels: np.ndarray
    strike_ratios: np.ndarray
    median_abs_r: np.ndarray  # (levels, strikes)
    iqr_r: np.ndarray
    exponent: float
    exponent_stderr: float
    expected_exponent: float | None
    tolerance: float
    verdicts: dict
    n_used: np.ndarray
    n_dropped: np.ndarray
    richardson_median: float
    max_abs_r: float
    notes: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def max_over_strikes(self) -> np.ndarray:
        return self.median_abs_r.max(axis=1)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "strike_ratio", "median_abs_r", "iqr_r"])
        for i, tau in enumerate(self.tau_levels):
            for j, kr in enumerate(self.strike_ratios):
                w.writerow([repr(float(tau)), repr(float(kr)), repr(float(self.median_abs_r[i, j])),
                            repr(float(self.iqr_r[i, j]))])
        w.writerow([])
        w.writerow(["# summary", "value"])
        w.writerow(["# exponent", repr(self.exponent)])
        w.writerow(["# exponent_stderr", repr(self.exponent_stderr)])
        w.writerow(["# expected_exponent", repr(self.expected_exponent)])
        w.writerow(["# richardson_median", repr(self.richardson_median)])
        for name, val in self.diagnostics.items():
            w.writerow([f"# {name}", repr(val)])
        for i, tau in enumerate(self.tau_levels):
            w.writerow([f"# states_used tau={float(tau)!r}", int(self.n_used[i])])
            w.writerow([f"# states_dropped tau={float(tau)!r}", int(self.n_dropped[i])])
        for name, ok in self.verdicts.items():
            w.writerow([f"# verdict {name}", "pass" if ok else "fail"])
        for note in self.notes:
            w.writerow([f"# note", note])
        return buf.getvalue()


def _expected_exponent(model):
    if isinstance(model, RoughSabrParams):
        return 2.0 * model.H
    return 1.0


def _sweep_grid(maturity, taus, steps, refine):
    if refine:
        return SimGrid.refined(maturity, maturity - taus, steps=steps)
    base = np.linspace(0.0, maturity, steps + 1)
    return SimGrid(np.unique(np.concatenate([base, maturity - taus])))


def residual_sweep(
    model,
    tau_levels=(0.2, 0.1, 0.05, 0.025),
    strike_ratios=None,
    n_states: int = 2000,
    seed: int = 0,
    *,
    flavor: str = "bs",
    spot: float = 100.0,
    anchor: str = "valuation",
    t_valuation: float | None = None,
    maturity: float | None = None,
    steps: int = 100,
    expected_exponent: float | None = None,
    tolerance: float = 0.15,
    sol: GSolution | None = None,
    y_cap: float = Y_CAP,
) -> ResidualReport:
    """Simulate states and summarize residuals across a strike grid as ``tau`` shrinks.

    ``anchor="valuation"`` (default) simulates states once at a fixed time
    ``t_valuation`` (default half the largest tau) and evaluates expiries
    ``T = t + tau``, so every level sees the same state distribution.
    ``anchor="maturity"`` fixes ``T`` (default 1.25 times the largest tau) and
    simulates states at ``t = T - tau``.

    Strikes are fixed at ``ratio * spot``. Per level the statistic is the
    cross-state median of ``|r|``; its maximum over strikes is regressed on
    ``tau`` in log-log scale.
    """
    taus = np.asarray(tau_levels, dtype=float)
    if taus.size < 3:
        raise DomainError("the decay fit needs at least three tau levels")
    if np.any(np.diff(taus) >= 0) or np.any(taus <= 0):
        raise DomainError("tau levels must be positive and strictly decreasing")
    if flavor not in ("bs", "bachelier"):
        raise DomainError("flavor must be 'bs' or 'bachelier'")
    ratios = np.geomspace(0.8, 1.25, 11) if strike_ratios is None else np.asarray(strike_ratios, float)
    rough = isinstance(model, RoughSabrParams)
    if anchor == "maturity":
        # fixed expiry T, states at t = T - tau
        T = 1.25 * taus[0] if maturity is None else float(maturity)
        if T < taus[0]:
            raise DomainError("maturity must be at least the largest tau level")
        level_t = T - taus
        level_T = np.full(taus.size, T)
        grid = _sweep_grid(T, taus, steps, rough)
        rec, horizons = level_t, None
    elif anchor == "valuation":
        # fixed valuation time t, expiries T = t + tau
        tv = 0.5 * taus[0] if t_valuation is None else float(t_valuation)
        if tv <= 0:
            raise DomainError("valuation time must be positive")
        level_t = np.full(taus.size, tv)
        level_T = tv + taus
        if rough:
            grid = SimGrid.refined(level_T[0], [tv], steps=steps, extra=level_T)
        else:
            grid = SimGrid.uniform(tv, steps)
        rec, horizons = [tv], level_T
    else:
        raise DomainError("anchor must be 'maturity' or 'valuation'")
    if isinstance(model, LocalVolModel):
        ens = simulate_local_vol(model, grid, n_states, seed, spot, record=rec)
    elif isinstance(model, SabrParams):
        ens = simulate_sabr(model, grid, n_states, seed, spot, record=rec)
    elif rough:
        ens = simulate_rough_sabr(model, grid, n_states, seed, spot, record=rec, horizons=horizons)
    else:
        raise DomainError(f"unsupported model {type(model).__name__}")

    lognormal = flavor == "bs"
    fn = def3_residual if lognormal else def4_residual
    L, J = taus.size, ratios.size
    med = np.empty((L, J))
    iqr = np.empty((L, J))
    n_used = np.zeros(L, dtype=int)
    n_drop = np.zeros(L, dtype=int)
    ratios_all = []
    max_abs = 0.0
    notes = []
    strikes = ratios * spot

    rem = np.full((L, J), np.nan)
    states = []
    y_need = 0.0
    for lvl, tau in enumerate(taus):
        t = level_t[lvl]
        st = ens.state(t)
        if rough and anchor == "valuation":
            c = ens.column(t)
            st["U"] = ens.info["U_h"][:, c, lvl]
            st["R"] = ens.info["R_h"][:, c, lvl]
        keep = np.isfinite(st["S"]) & (st["S"] > 1e-8)
        if ens.absorbed is not None:
            keep &= ~ens.absorbed
        if rough:
            # stencil moves of a few percent in S and U must stay on the g grid
            ys = [np.abs(rough_sabr_y(st["S"], K, tau, st["U"], model)) for K in strikes]
            ymax = np.max(np.vstack(ys), axis=0)
            keep &= np.isfinite(ymax) & (ymax <= y_cap)
            if np.any(keep):
                y_need = max(y_need, 1.1 * float(np.max(ymax[keep])))
        states.append((t, {k: v[keep] for k, v in st.items()}))
        n_used[len(states) - 1] = int(np.count_nonzero(keep))
        n_drop[len(states) - 1] = int(keep.size - np.count_nonzero(keep))
    if rough:
        if sol is None or sol.y_max < y_need:
            sol = solve_for_range(model, y_need)
        notes.append("rough drift uses the frozen-R reduction")
        if np.any(n_drop):
            notes.append(f"states with |Y| > {y_cap} dropped")

    for i, (t, st) in enumerate(states):
        if n_used[i] == 0:
            raise DomainError(f"no usable states at tau={taus[i]}")
        for j, K in enumerate(strikes):
            smp = fn(model, st, K, t, level_T[i], sol=sol, richardson=True)
            a = np.abs(smp.r)
            med[i, j] = np.median(a)
            q75, q25 = np.percentile(smp.r, [75, 25])
            iqr[i, j] = q75 - q25
            max_abs = max(max_abs, float(np.max(a)))
            ratios_all.append(smp.richardson)
            if rough:
                Y = np.asarray(rough_sabr_y(st["S"], K, level_T[i] - t, st["U"], model), dtype=float)
                main = rough_main_term(Y, st["alpha"] / st["U"], st["R"], sol)
                rem[i, j] = np.median(np.abs(smp.r - main))

    rr = np.concatenate(ratios_all)
    rr = rr[np.isfinite(rr)]
    rich_med = float(np.median(rr)) if rr.size else float("nan")
    verdicts = {}
    if np.isfinite(rich_med):
        verdicts["richardson"] = RICHARDSON_BAND[0] <= rich_med <= RICHARDSON_BAND[1]
    expected = _expected_exponent(model) if expected_exponent is None else expected_exponent

    stat = med.max(axis=1)
    if max_abs <= 1e-10:
        exponent = stderr = float("nan")
        verdicts["machine_zero"] = True
        notes.append("residuals at machine zero; decay fit skipped")
    else:
        exponent, stderr, _ = _fit_power(taus, stat)
        verdicts["exponent"] = bool(abs(exponent - expected) <= tolerance)
        if not np.all(np.diff(stat) < 0):
            notes.append("max-over-strikes median |r| is not monotone in tau")
    diagnostics = {}
    if not verdicts.get("machine_zero"):
        atm = int(np.argmin(np.abs(np.log(ratios))))
        if np.all(med[:, atm] > 0):
            diagnostics["exponent_atm"] = _fit_power(taus, med[:, atm])[0]
        if rough:
            # residual minus its leading term, which carries the tau^{2H} remainder
            diagnostics["exponent_remainder"] = _fit_power(taus, rem.max(axis=1))[0]
    return ResidualReport(taus, ratios, med, iqr, exponent, stderr, expected, tolerance, verdicts,
                          n_used, n_drop, rich_med, max_abs, notes, diagnostics)


# ------------------------------------------------ short-time state convergence


@dataclass
class ShortTimeStateReport:
    tau_levels: np.ndarray
    median_alpha_over_u: np.ndarray  # median |alpha/U - 1|
    median_r_gap: np.ndarray  # median |R - 1/(H + 1/2)|
    verdicts: dict

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "median_abs_alpha_over_u_minus_1", "median_abs_r_gap"])
        for tau, a, r in zip(self.tau_levels, self.median_alpha_over_u, self.median_r_gap):
            w.writerow([repr(float(tau)), repr(float(a)), repr(float(r))])
        return buf.getvalue()


def short_time_state_check(ens, H: float, t: float | None = None) -> ShortTimeStateReport:
    """Medians of ``|alpha/U - 1|`` and ``|R - 1/(H+1/2)|`` as the maturity shrinks.

    The valuation time ``t`` is fixed (default: the first recorded time) and
    ``U``, ``R`` are taken for every horizon ``T_h > t`` simulated with
    ``simulate_rough_sabr(..., horizons=...)``, so ``tau = T_h - t``. Both
    medians must decrease strictly as ``tau`` shrinks.
    """
    if "horizons" not in ens.info:
        raise DomainError("ensemble carries no horizon curves (simulate with horizons=...)")
    c = 0 if t is None else ens.column(t)
    t_val = float(ens.times[c])
    T_h = np.asarray(ens.info["horizons"], dtype=float)
    live = T_h > t_val
    if np.count_nonzero(live) < 2:
        raise DomainError("need at least two horizons beyond the valuation time")
    order = np.argsort(T_h[live])[::-1]
    taus = (T_h[live] - t_val)[order]
    U = ens.info["U_h"][:, c, :][:, live][:, order]
    R = ens.info["R_h"][:, c, :][:, live][:, order]
    a = ens.alpha[:, c][:, None]
    limit = 1.0 / (H + 0.5)
    a_gap = np.median(np.abs(a / U - 1.0), axis=0)
    r_gap = np.median(np.abs(R - limit), axis=0)
    verdicts = {
        "alpha_over_u_decreasing": bool(np.all(np.diff(a_gap) < 0)),
        "r_gap_decreasing": bool(np.all(np.diff(r_gap) < 0)),
    }
    return ShortTimeStateReport(taus, a_gap, r_gap, verdicts)


# ------------------------------------------------------------------ skew fit


@dataclass
class SkewFit:
    tau_levels: np.ndarray
    skews: np.ndarray
    slope: float
    H: float | None
    verdict: str  # "fitted" or "refused"


def skew_powerlaw_fit(generator, tau_levels, sol: GSolution | None = None, atol: float = 1e-13) -> SkewFit:
    """Fit ``log |ATM skew|`` against ``log tau``; the H estimate is slope + 1/2.

    ``generator`` is a :class:`RoughSabrParams` (skews from the formula) or a
    callable ``tau -> skew``. A skew that vanishes at every level (``rho = 0``)
    has no power law and the fit is refused.
    """
    taus = np.asarray(tau_levels, dtype=float)
    if taus.size < 2:
        raise DomainError("need at least two maturities")
    if isinstance(generator, RoughSabrParams):
        if sol is None:
            sol = solve_for_range(generator, 8.0)
        skews = np.array([atm_skew(generator, tau, sol) for tau in taus])
    else:
        skews = np.array([float(generator(tau)) for tau in taus])
    if np.all(np.abs(skews) <= atol):
        return SkewFit(taus, skews, float("nan"), None, "refused")
    if np.any(np.abs(skews) <= atol):
        raise RangeError("skew vanishes at some maturities but not others")
    slope, _, _ = _fit_power(taus, np.abs(skews)) if taus.size > 2 else (
        float(np.diff(np.log(np.abs(skews)))[0] / np.diff(np.log(taus))[0]), 0.0, 0.0)
    return SkewFit(taus, skews, slope, slope + 0.5, "fitted")
