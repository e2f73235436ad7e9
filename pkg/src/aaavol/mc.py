"""Seed-deterministic Monte Carlo for the local-vol, SABR and rough SABR models.

Paths are generated in chunks; every Gaussian draw comes from the
counter-based stream in :mod:`aaavol.rng`, so the output is bit-identical
for any chunk size or worker count.

Rough SABR forward variances are evolved per maturity bucket with exact
lognormal steps. Over a step ``[t_i, t_{i+1}]`` bucket ``s_j`` receives the
root-mean-square kernel

    zbar_ij^2 * dt_i = int_{t_i}^{t_{i+1}} zeta(s_j - u)^2 du
                     = eta^2 [(s_j - t_i)^{2H} - (s_j - t_{i+1})^{2H}],

so ``var(log xi_t(s_j))`` matches ``int_0^t zeta(s_j - u)^2 du`` exactly and
the kernel singularity at ``u -> s_j`` is integrated rather than sampled.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DomainError
from .pricing import bs_vega, implied_vol_bs
from .smile import CEVBackbone, CEVLocalVol, LocalVolModel, RoughSabrParams, SabrParams

EPS_S = 1e-12
DEFAULT_CHUNK = 16384

# stream channels
_CH_VOL = 0
_CH_PERP = 1


@dataclass(frozen=True)
class SimGrid:
    """Time points ``0 = t_0 < ... < t_M = T``."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise DomainError("a grid needs at least two time points")
        if t[0] != 0.0:
            raise DomainError("grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise DomainError("grid times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, M: int) -> "SimGrid":
        if not (T > 0) or M < 1:
            raise DomainError("uniform grid needs T > 0 and M >= 1")
        return cls(np.linspace(0.0, T, M + 1))

    @classmethod
    def refined(cls, T: float, focus, steps: int = 100, n_side: int = 60, h0: float = 1e-5, extra=()) -> "SimGrid":
        """Uniform grid plus geometric clusters on both sides of each focus time.

        The rough curve ``xi_t(.)`` is resolved near ``s = t`` only when the
        steps before ``t`` and the buckets after it are short compared with
        the horizons of interest.
        """
        pts = [np.linspace(0.0, T, steps + 1), np.asarray(extra, dtype=float).ravel()]
        for f in np.atleast_1d(np.asarray(focus, dtype=float)):
            if not (0.0 <= f <= T):
                raise DomainError("focus times must lie in [0, T]")
            pts.append([f])
            if f > 0:
                pts.append(f - np.geomspace(min(h0, f), f, n_side))
            if f < T:
                pts.append(f + np.geomspace(min(h0, T - f), T - f, n_side))
        t = np.unique(np.concatenate(pts))
        # drop near-duplicates left by rounding
        t = t[np.concatenate(([True], np.diff(t) > 1e-14 * max(T, 1.0)))]
        t[0], t[-1] = 0.0, T
        return cls(t)

    @property
    def M(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def indices(self, record=None) -> np.ndarray:
        """Grid indices for requested record times (``None`` means every point)."""
        if record is None:
            return np.arange(self.M + 1)
        req = np.atleast_1d(np.asarray(record, dtype=float))
        idx = np.searchsorted(self.times, req)
        idx = np.clip(idx, 0, self.M)
        lower = np.clip(idx - 1, 0, self.M)
        pick = np.where(np.abs(self.times[lower] - req) < np.abs(self.times[idx] - req), lower, idx)
        if np.any(np.abs(self.times[pick] - req) > 1e-9 * max(self.T, 1.0)):
            raise DomainError("record times must lie on the simulation grid")
        return np.unique(pick)


@dataclass
class PathEnsemble:
    """Simulated paths at the recorded grid points (rows are paths)."""

    times: np.ndarray
    S: np.ndarray
    seed: int
    scheme: str
    grid: SimGrid
    alpha: np.ndarray | None = None
    U: np.ndarray | None = None
    R: np.ndarray | None = None
    absorbed: np.ndarray | None = None
    spot: float = 1.0
    info: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]

    def column(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9 * max(self.grid.T, 1.0):
            raise DomainError(f"time {t} was not recorded")
        return j

    @property
    def terminal(self) -> np.ndarray:
        if abs(self.times[-1] - self.grid.T) > 1e-12 * max(self.grid.T, 1.0):
            raise DomainError("terminal time was not recorded")
        return self.S[:, -1]

    def state(self, t: float) -> dict:
        j = self.column(t)
        out = {"S": self.S[:, j]}
        for name in ("alpha", "U", "R"):
            a = getattr(self, name)
            if a is not None:
                out[name] = a[:, j]
        return out


# ------------------------------------------------------------------ driver


def _run_chunks(n_paths, chunk_size, workers, fn):
    if n_paths < 1:
        raise DomainError("need at least one path")
    chunk_size = int(chunk_size) if chunk_size else DEFAULT_CHUNK
    starts = list(range(0, n_paths, chunk_size))
    spans = [(s, min(chunk_size, n_paths - s)) for s in starts]
    if workers and workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda sp: fn(*sp), spans))
    else:
        parts = [fn(*sp) for sp in spans]
    # parts are dicts of arrays; concatenate in path order
    return {k: (None if parts[0][k] is None else np.concatenate([p[k] for p in parts])) for k in parts[0]}


def _increments(seed, channel, grid, start, count):
    return rng.normal_matrix(seed, channel, grid.M, start, count) * np.sqrt(grid.dt)


def _step_arithmetic(S, vol, dZ, dead):
    S_new = S + vol * dZ
    hit = (S_new <= EPS_S) | dead
    return np.where(hit, EPS_S, S_new), hit


# ------------------------------------------------------------- local vol


def simulate_local_vol(
    model: LocalVolModel, grid: SimGrid, n_paths: int, seed: int, spot: float,
    record=None, chunk_size: int | None = None, workers: int = 1,
) -> PathEnsemble:
    """Euler-Maruyama for ``dS = v(S, t) dW`` (log-Euler when ``v = c(t) s``)."""
    if not (spot > 0):
        raise DomainError("spot must be positive")
    idx = grid.indices(record)
    lognormal = isinstance(model, CEVLocalVol) and model.gamma == 1.0
    scheme = "log-euler" if lognormal else "euler-absorb"
    t = grid.times

    def chunk(start, count):
        dW = _increments(seed, _CH_VOL, grid, start, count)
        S = np.full(count, float(spot))
        dead = np.zeros(count, dtype=bool)
        out = np.empty((count, idx.size))
        pos = 0
        for i in range(grid.M + 1):
            if pos < idx.size and idx[pos] == i:
                out[:, pos] = S
                pos += 1
            if i == grid.M:
                break
            if lognormal:
                c = model.scale(t[i])
                S = S * np.exp(c * dW[:, i] - 0.5 * c * c * grid.dt[i])
            else:
                S, dead = _step_arithmetic(S, model.v(S, t[i]), dW[:, i], dead)
        return {"S": out, "absorbed": dead}

    res = _run_chunks(n_paths, chunk_size, workers, chunk)
    return PathEnsemble(t[idx], res["S"], seed, scheme, grid, absorbed=res["absorbed"], spot=float(spot))


# ------------------------------------------------------------------ SABR


def _is_lognormal_backbone(bb) -> bool:
    return isinstance(bb, CEVBackbone) and bb.gamma == 1.0


def simulate_sabr(
    params: SabrParams, grid: SimGrid, n_paths: int, seed: int, spot: float,
    record=None, chunk_size: int | None = None, workers: int = 1,
) -> PathEnsemble:
    """Exact geometric alpha, Euler (or log-Euler for ``beta(s) = c s``) spot."""
    if not (spot > 0):
        raise DomainError("spot must be positive")
    idx = grid.indices(record)
    bb = params.backbone
    lognormal = _is_lognormal_backbone(bb)
    scheme = "sabr-exact-alpha/" + ("log-euler" if lognormal else "euler-absorb")
    nu, rho = params.nu, params.rho
    rho_perp = math.sqrt(1.0 - rho * rho)

    def chunk(start, count):
        dW = _increments(seed, _CH_VOL, grid, start, count)
        dZ = rho * dW + rho_perp * _increments(seed, _CH_PERP, grid, start, count)
        S = np.full(count, float(spot))
        a = np.full(count, float(params.alpha0))
        dead = np.zeros(count, dtype=bool)
        out_S = np.empty((count, idx.size))
        out_a = np.empty((count, idx.size))
        pos = 0
        for i in range(grid.M + 1):
            if pos < idx.size and idx[pos] == i:
                out_S[:, pos] = S
                out_a[:, pos] = a
                pos += 1
            if i == grid.M:
                break
            h = grid.dt[i]
            if lognormal:
                v = a * bb.c
                S = S * np.exp(v * dZ[:, i] - 0.5 * v * v * h)
            else:
                S, dead = _step_arithmetic(S, a * bb(S), dZ[:, i], dead)
            a = a * np.exp(nu * dW[:, i] - 0.5 * nu * nu * h)
        return {"S": out_S, "alpha": out_a, "absorbed": dead}

    res = _run_chunks(n_paths, chunk_size, workers, chunk)
    return PathEnsemble(grid.times[idx], res["S"], seed, scheme, grid, alpha=res["alpha"],
                        absorbed=res["absorbed"], spot=float(spot))


# ------------------------------------------------------------ rough SABR


def rough_kernel_matrix(H: float, eta: float, times: np.ndarray):
    """Per-step RMS kernel ``K[i, j]`` (zero unless ``j > i``) and variances ``K^2 dt``."""
    t = np.asarray(times, dtype=float)
    M = t.size - 1
    dt = np.diff(t)
    lag_lo = t[None, :] - t[:-1, None]  # s_j - t_i
    lag_hi = t[None, :] - t[1:, None]  # s_j - t_{i+1}
    live = lag_hi >= -1e-15 * max(t[-1], 1.0)
    live &= np.arange(M + 1)[None, :] > np.arange(M)[:, None]
    two_h = 2.0 * H
    with np.errstate(invalid="ignore"):
        var = eta * eta * (np.power(np.maximum(lag_lo, 0.0), two_h) - np.power(np.maximum(lag_hi, 0.0), two_h))
    var = np.where(live, np.maximum(var, 0.0), 0.0)
    K = np.sqrt(var / dt[:, None])
    return K, var


def _bucket_kernel_integrals(H, t_r, s_lo, s_hi):
    """``int zeta(s - t_r) ds`` over buckets, up to the constant ``eta sqrt(2H)``."""
    p = H + 0.5
    return (np.power(s_hi - t_r, p) - np.power(s_lo - t_r, p)) / p


def simulate_rough_sabr(
    params: RoughSabrParams, grid: SimGrid, n_paths: int, seed: int, spot: float,
    record=None, chunk_size: int | None = None, workers: int = 1, horizons=None,
) -> PathEnsemble:
    """Bucketed exact-lognormal forward variance with Euler (or log-Euler) spot.

    ``U`` and ``R`` are computed at each recorded time ``t < T`` from the
    bucketed curve ``xi_t(s_j)`` (constant on ``[s_j, s_{j+1})``); they are
    NaN at ``t = T``. ``horizons`` (grid maturities) adds the same two
    quantities for every maturity ``T_h`` in ``ens.info["U_h"]`` and
    ``ens.info["R_h"]``, arrays of shape ``(paths, recorded, horizons)``.
    """
    if not (spot > 0):
        raise DomainError("spot must be positive")
    if grid.M < 10:
        raise DomainError("rough SABR simulation needs at least 10 time steps")
    idx = grid.indices(record)
    t = grid.times
    M = grid.M
    H, rho = params.H, params.rho
    rho_perp = math.sqrt(1.0 - rho * rho)
    bb = params.backbone
    lognormal = _is_lognormal_backbone(bb)
    scheme = "rough-bucketed-rms/" + ("log-euler" if lognormal else "euler-absorb")

    h_idx = np.array([], dtype=int) if horizons is None else grid.indices(horizons)
    K, var = rough_kernel_matrix(H, params.eta, t)
    log_xi0 = np.log(np.asarray(params.xi0(t), dtype=float))
    drift = log_xi0 - 0.5 * np.cumsum(np.vstack([np.zeros(M + 1), var]), axis=0)  # drift[r, j]: after r steps
    log_a2_drift = drift[np.arange(M + 1), np.arange(M + 1)]
    K_diag = K  # columns give alpha at each grid time via one matmul

    def chunk(start, count):
        dW = _increments(seed, _CH_VOL, grid, start, count)
        dZ = rho * dW + rho_perp * _increments(seed, _CH_PERP, grid, start, count)
        log_a2 = dW @ K_diag + log_a2_drift  # (count, M+1)
        alpha = np.exp(0.5 * log_a2)
        S = np.full(count, float(spot))
        dead = np.zeros(count, dtype=bool)
        out_S = np.empty((count, idx.size))
        pos = 0
        for i in range(M + 1):
            if pos < idx.size and idx[pos] == i:
                out_S[:, pos] = S
                pos += 1
            if i == M:
                break
            a = alpha[:, i]
            if lognormal:
                v = a * bb.c
                S = S * np.exp(v * dZ[:, i] - 0.5 * v * v * grid.dt[i])
            else:
                S, dead = _step_arithmetic(S, a * bb(S), dZ[:, i], dead)
        U = np.full((count, idx.size), np.nan)
        R = np.full((count, idx.size), np.nan)
        U_h = np.full((count, idx.size, h_idx.size), np.nan)
        R_h = np.full((count, idx.size, h_idx.size), np.nan)
        for c, r in enumerate(idx):
            if r >= M:
                continue
            xi = np.exp(dW[:, :r] @ K[:r, r:M] + drift[r, r:M])  # (count, M-r)
            width = np.diff(t[r:])
            kint = _bucket_kernel_integrals(H, t[r], t[r:M], t[r + 1:])
            # running integrals over [t_r, s_m] for every grid maturity s_m > t_r
            flat = np.cumsum(xi * width, axis=1)
            kern = np.cumsum(xi * kint, axis=1)
            taus = t[r + 1:] - t[r]
            U_all = np.sqrt(flat / taus)
            R_all = kern / (np.power(taus, H - 0.5) * flat)
            U[:, c], R[:, c] = U_all[:, -1], R_all[:, -1]
            for m, hm in enumerate(h_idx):
                if hm > r:
                    U_h[:, c, m] = U_all[:, hm - r - 1]
                    R_h[:, c, m] = R_all[:, hm - r - 1]
        return {"S": out_S, "alpha": alpha[:, idx], "U": U, "R": R, "absorbed": dead, "U_h": U_h, "R_h": R_h}

    res = _run_chunks(n_paths, chunk_size, workers, chunk)
    info = {}
    if h_idx.size:
        info = {"horizons": t[h_idx], "U_h": res["U_h"], "R_h": res["R_h"]}
    return PathEnsemble(t[idx], res["S"], seed, scheme, grid, alpha=res["alpha"], U=res["U"], R=res["R"],
                        absorbed=res["absorbed"], spot=float(spot), info=info)


# --------------------------------------------------------------- pricing


def _payoff_stats(pay):
    pay = np.ascontiguousarray(pay)
    n = pay.size
    m = pay.sum() / n  # contiguous 1-d sums are pairwise in numpy
    se = math.sqrt(np.sum((pay - m) ** 2) / (n - 1) / n) if n > 1 else float("nan")
    return m, se


def _price_vector(ens, strike, put):
    ST = ens.terminal
    if ST.size == 0:
        raise DomainError("empty ensemble")
    K = np.atleast_1d(np.asarray(strike, dtype=float))
    price = np.empty(K.shape)
    se = np.empty(K.shape)
    for j, k in enumerate(K.flat):
        pay = np.maximum(k - ST, 0.0) if put else np.maximum(ST - k, 0.0)
        price.flat[j], se.flat[j] = _payoff_stats(pay)
    if np.ndim(strike) == 0:
        return float(price[0]), float(se[0])
    return price, se


def mc_call_price(ens: PathEnsemble, strike):
    """Sample mean and standard error of ``(S_T - K)^+``; broadcasts over strikes."""
    return _price_vector(ens, strike, put=False)


def mc_put_price(ens: PathEnsemble, strike):
    """Sample mean and standard error of ``(K - S_T)^+``."""
    return _price_vector(ens, strike, put=True)


def mc_implied_vols(ens: PathEnsemble, strikes, spot: float | None = None, side: str = "otm"):
    """Black-Scholes implied vols of MC prices with delta-method standard errors.

    ``side="otm"`` prices strikes below spot from the put payoff and converts
    by put-call parity (``C = P + S_0 - K``, valid since S is a martingale);
    ``side="call"`` uses the call payoff everywhere. Deep in-the-money call
    payoffs carry the full sampling noise of ``S_T`` and make the implied vol
    needlessly noisy.
    """
    if side not in ("otm", "call"):
        raise ValueError("side must be 'otm' or 'call'")
    spot = ens.spot if spot is None else spot
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    price, se = mc_call_price(ens, strikes)
    if side == "otm":
        itm = strikes < spot
        if np.any(itm):
            p_put, se_put = mc_put_price(ens, strikes[itm])
            price[itm] = p_put + spot - strikes[itm]
            se[itm] = se_put
    tau = ens.grid.T
    iv = np.atleast_1d(implied_vol_bs(price, spot, strikes, tau, on_error="nan"))
    vega = np.atleast_1d(bs_vega(spot, strikes, tau, np.where(np.isfinite(iv), iv, 1.0)))
    return iv, se / vega


def martingale_zscore(ens: PathEnsemble) -> float:
    """``(mean S_T - S_0) / stderr``; small for a martingale scheme."""
    ST = np.ascontiguousarray(ens.terminal)
    m = ST.sum() / ST.size
    se = ST.std(ddof=1) / math.sqrt(ST.size)
    return float((m - ens.spot) / se) if se > 0 else 0.0


def dump_paths_csv(ens: PathEnsemble, path, max_paths: int | None = None) -> None:
    """Write ``path_id,time,S,alpha,U,R`` rows (empty cells for absent fields)."""
    n = ens.n_paths if max_paths is None else min(max_paths, ens.n_paths)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "time", "S", "alpha", "U", "R"])
        for p in range(n):
            for c, tm in enumerate(ens.times):
                row = [p, repr(float(tm)), repr(float(ens.S[p, c]))]
                for a in (ens.alpha, ens.U, ens.R):
                    row.append("" if a is None else repr(float(a[p, c])))
                w.writerow(row)
