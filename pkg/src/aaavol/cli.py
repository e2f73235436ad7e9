"""Command-line front end: ``aaavol {gfun,smile,validate,residual} --config FILE``.

Configs are flat ``key = value`` files (``#`` starts a comment); list values
are comma separated. Every command writes ``<verb>_<tag>.csv`` into ``--out``,
where the tag is a hash of the verb, the resolved config and the seed, and
prints a short summary. Exit codes: 0 success, 1 a verdict failed,
2 invalid config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import math
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConvergenceError, DomainError, InvariantViolation
from .gfun import (
    GParams,
    curvature_closed_form,
    curvature_coeff,
    ode_residual,
    pointwise_residual,
    solve_g_march,
    solve_g_picard,
)

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# key -> kind; "float", "int", "str", "floats"
KEYS = {
    "model.type": "str",
    "model.h": "float",
    "model.eta": "float",
    "model.rho": "float",
    "model.nu": "float",
    "model.alpha0": "float",
    "backbone.kind": "str",
    "backbone.c": "float",
    "backbone.gamma": "float",
    "backbone.grid": "floats",
    "backbone.values": "floats",
    "curve.grid": "floats",
    "curve.values": "floats",
    "sim.paths": "int",
    "sim.steps": "int",
    "sim.seed": "int",
    "run.tau_levels": "floats",
    "run.strike_ratios": "floats",
    "run.flavor": "str",
    "run.tol_bp": "float",
    "run.atm_tol_bp": "float",
    "gfun.ymax": "float",
    "gfun.tol": "float",
    "market.spot": "float",
    "market.tau": "float",
}

MODEL_TYPES = ("localvol", "sabr", "roughsabr")
DEFAULT_VALIDATE_RATIOS = np.round(np.linspace(0.9, 1.1, 11), 12)


def _convert(key, raw):
    kind = KEYS[key]
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            v = int(raw, 0)
            return v
        if kind == "floats":
            return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw.strip()


def parse_config(text: str) -> dict:
    """Parse a flat ``key = value`` document; unknown or repeated keys are errors."""
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        cfg[key] = _convert(key, raw)
    return cfg


def config_tag(verb: str, cfg: dict) -> str:
    canon = verb + "\n" + "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ------------------------------------------------------------------ builders


def _need(cfg, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")


def _backbone(cfg):
    from .smile import CEVBackbone, TabulatedBackbone

    kind = cfg.get("backbone.kind", "cev")
    if kind == "cev":
        return CEVBackbone(cfg.get("backbone.c", 1.0), cfg.get("backbone.gamma", 1.0))
    if kind == "table":
        _need(cfg, "backbone.grid", "backbone.values")
        return TabulatedBackbone(cfg["backbone.grid"], cfg["backbone.values"])
    raise ConfigError(f"backbone.kind must be 'cev' or 'table', got {kind!r}")


def build_model(cfg):
    from .smile import (CEVLocalVol, ForwardVarianceCurve, RoughSabrParams, SabrParams,
                        TabulatedLocalVol)

    _need(cfg, "model.type")
    mtype = cfg["model.type"]
    if mtype not in MODEL_TYPES:
        raise ConfigError(f"model.type must be one of {MODEL_TYPES}, got {mtype!r}")
    if mtype == "localvol":
        kind = cfg.get("backbone.kind", "cev")
        if kind == "cev":
            return CEVLocalVol(cfg.get("backbone.c", 0.2), cfg.get("backbone.gamma", 1.0))
        if kind == "table":
            _need(cfg, "backbone.grid", "backbone.values")
            return TabulatedLocalVol(cfg["backbone.grid"], [0.0], [cfg["backbone.values"]])
        raise ConfigError(f"backbone.kind must be 'cev' or 'table', got {kind!r}")
    if mtype == "sabr":
        _need(cfg, "model.alpha0", "model.nu", "model.rho")
        return SabrParams(cfg["model.alpha0"], cfg["model.nu"], cfg["model.rho"], _backbone(cfg))
    _need(cfg, "model.h", "model.eta", "model.rho", "curve.grid", "curve.values")
    curve = ForwardVarianceCurve(cfg["curve.grid"], cfg["curve.values"])
    return RoughSabrParams(cfg["model.h"], cfg["model.eta"], cfg["model.rho"], curve, _backbone(cfg))


def _spot(cfg):
    s = cfg.get("market.spot", 100.0)
    if not (s > 0):
        raise ConfigError("market.spot must be positive")
    return s


def _tau(cfg):
    _need(cfg, "market.tau")
    if not (cfg["market.tau"] > 0):
        raise ConfigError("market.tau must be positive")
    return cfg["market.tau"]


def _ratios(cfg, default):
    r = np.asarray(cfg.get("run.strike_ratios", default), dtype=float)
    if r.size == 0 or np.any(~(r > 0)):
        raise ConfigError("run.strike_ratios must be positive")
    return r


def _sim(cfg):
    paths = cfg.get("sim.paths", 20000)
    steps = cfg.get("sim.steps", 100)
    seed = cfg.get("sim.seed", 0)
    if paths < 2 or steps < 1:
        raise ConfigError("sim.paths must be >= 2 and sim.steps >= 1")
    if not (0 <= seed < 2**64):
        raise ConfigError("sim.seed must be an unsigned 64-bit integer")
    return paths, steps, seed


def _fmt(x):
    return repr(float(x))


# ------------------------------------------------------------------ commands


def cmd_gfun(cfg, out: io.TextIOBase, log):
    _need(cfg, "model.rho", "model.h")
    gp = GParams(cfg["model.rho"], cfg["model.h"])
    ymax = cfg.get("gfun.ymax", 8.0)
    tol = cfg.get("gfun.tol", 1e-12)
    if not (ymax > 0) or not (tol > 0):
        raise ConfigError("gfun.ymax and gfun.tol must be positive")
    n = 2 * int(math.ceil(ymax / (8.0 / 2048))) + 1
    pic = solve_g_picard(gp, y_max=ymax, n=n, tol=tol)
    mar = solve_g_march(gp, y_max=ymax, n=n, tol=min(1e-10, 100 * tol))
    res_p, res_m = ode_residual(pic), ode_residual(mar)
    nz = np.abs(pic.y) > 0
    gap = float(np.max(np.abs(pic.g[nz] / pic.y[nz] - mar.g[nz] / mar.y[nz])))
    b_fd, b_cf = curvature_coeff(gp), curvature_closed_form(gp)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["y", "g", "gprime", "residual"])
    resid = pointwise_residual(pic)
    for row in zip(pic.y, pic.g, pic.gprime, resid):
        w.writerow([_fmt(v) for v in row])
    log(f"rho={gp.rho} H={gp.H} y_max={ymax}")
    log(f"picard: iterations={pic.iterations} max_residual={res_p:.3e}")
    log(f"march:  max_residual={res_m:.3e}")
    log(f"sup |g/y picard - g/y march| = {gap:.3e}")
    log(f"b closed form={b_cf!r} finite difference={b_fd!r}")
    ok = res_p <= 1e-8 and gap <= 1e-6
    log("verdict: " + ("pass" if ok else "fail"))
    return ok


def cmd_smile(cfg, out, log):
    from .pricing import MarketPoint
    from .smile import smile_table

    model = build_model(cfg)
    spot, tau = _spot(cfg), _tau(cfg)
    strikes = spot * _ratios(cfg, DEFAULT_VALIDATE_RATIOS)
    table = smile_table(model, strikes, MarketPoint(spot, spot, tau))
    out.write(table.to_csv())
    for row in table.rows:
        log(f"K={row['strike']:.6g} sigma_bs={row['sigma_bs']:.10f} sigma_bachelier={row['sigma_bachelier']:.10f}")
    if table.errors:
        for e in table.errors:
            log(f"error: {e}")
    return not table.errors


def _formula_vols(model, spot, strikes, tau):
    from .smile import (LocalVolModel, RoughSabrParams, bbf_sigma_bs, rough_sabr_sigma_bs, sabr_sigma_bs,
                        solve_for_range, rough_sabr_y, u_average_vol)

    if isinstance(model, LocalVolModel):
        return np.asarray(bbf_sigma_bs(spot, strikes, tau, model))
    if isinstance(model, RoughSabrParams):
        u = u_average_vol(model.xi0, 0.0, tau)
        y = np.max(np.abs(rough_sabr_y(spot, strikes, tau, u, model)))
        sol = solve_for_range(model, y)
        return np.asarray(rough_sabr_sigma_bs(spot, strikes, tau, model, sol))
    return np.asarray(sabr_sigma_bs(spot, strikes, model))


def simulate_for(model, grid, paths, seed, spot, record):
    from .mc import simulate_local_vol, simulate_rough_sabr, simulate_sabr
    from .smile import LocalVolModel, SabrParams

    if isinstance(model, LocalVolModel):
        return simulate_local_vol(model, grid, paths, seed, spot, record=record)
    if isinstance(model, SabrParams):
        return simulate_sabr(model, grid, paths, seed, spot, record=record)
    return simulate_rough_sabr(model, grid, paths, seed, spot, record=record)


def cmd_validate(cfg, out, log, dump_paths=None):
    from .mc import SimGrid, dump_paths_csv, martingale_zscore, mc_implied_vols

    model = build_model(cfg)
    spot, tau = _spot(cfg), _tau(cfg)
    ratios = _ratios(cfg, DEFAULT_VALIDATE_RATIOS)
    paths, steps, seed = _sim(cfg)
    tol = cfg.get("run.tol_bp", 50.0) * 1e-4
    atm_tol = cfg.get("run.atm_tol_bp", cfg.get("run.tol_bp", 50.0)) * 1e-4
    strikes = spot * ratios
    formula = _formula_vols(model, spot, strikes, tau)
    grid = SimGrid.uniform(tau, steps)
    ens = simulate_for(model, grid, paths, seed, spot, record=None if dump_paths else [tau])
    if dump_paths:
        dump_paths_csv(ens, dump_paths)
    iv, se = mc_implied_vols(ens, strikes)
    atm = np.abs(ratios - 1.0) < 1e-12
    allowed = np.maximum(3.0 * se, np.where(atm, atm_tol, tol))
    diff = np.abs(iv - formula)
    ok = np.isfinite(diff) & (diff <= allowed)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["strike_ratio", "strike", "mc_iv", "mc_stderr", "formula_iv", "abs_diff", "allowed", "pass"])
    for r, K, a, s, f, d, al, p in zip(ratios, strikes, iv, se, formula, diff, allowed, ok):
        w.writerow([_fmt(r), _fmt(K), _fmt(a), _fmt(s), _fmt(f), _fmt(d), _fmt(al), "pass" if p else "fail"])
        log(f"K/S={r:.4f} mc={a:.6f} (+-{s:.6f}) formula={f:.6f} diff={d * 1e4:.1f}bp {'ok' if p else 'FAIL'}")
    z = martingale_zscore(ens)
    log(f"paths={paths} steps={steps} seed={seed} scheme={ens.scheme} martingale z={z:.2f}")
    if ens.absorbed is not None and np.any(ens.absorbed):
        log(f"absorbed paths: {int(np.count_nonzero(ens.absorbed))}")
    return bool(np.all(ok))


def cmd_residual(cfg, out, log):
    from .verify import residual_sweep

    model = build_model(cfg)
    taus = np.asarray(cfg.get("run.tau_levels", [0.2, 0.1, 0.05, 0.025]), dtype=float)
    if taus.size < 3 or np.any(taus <= 0) or np.any(np.diff(taus) >= 0):
        raise ConfigError("run.tau_levels needs at least three positive, strictly decreasing values")
    ratios = _ratios(cfg, np.geomspace(0.8, 1.25, 11))
    flavor = cfg.get("run.flavor", "bs")
    if flavor not in ("bs", "bachelier"):
        raise ConfigError("run.flavor must be 'bs' or 'bachelier'")
    paths, steps, seed = _sim(cfg)
    rep = residual_sweep(model, taus, ratios, n_states=paths, seed=seed, flavor=flavor,
                         spot=_spot(cfg), steps=steps)
    out.write(rep.to_csv())
    for tau, m in zip(rep.tau_levels, rep.max_over_strikes):
        log(f"tau={tau:g} max over strikes of median|r| = {m:.4e}")
    log(f"exponent={rep.exponent:.4f} +- {rep.exponent_stderr:.4f} (expected {rep.expected_exponent})")
    for k, v in rep.diagnostics.items():
        log(f"{k}={v:.4f}")
    for k, v in rep.verdicts.items():
        log(f"verdict {k}: {'pass' if v else 'fail'}")
    for n in rep.notes:
        log(f"note: {n}")
    return rep.passed


COMMANDS = {"gfun": cmd_gfun, "smile": cmd_smile, "validate": cmd_validate, "residual": cmd_residual}


def build_parser():
    p = argparse.ArgumentParser(prog="aaavol", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path, default=Path("."))
        sp.add_argument("--seed", type=int, default=None, help="overrides sim.seed")
        if verb == "validate":
            sp.add_argument("--dump-paths", type=Path, default=None, help="write simulated paths to this CSV")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg):
        print(msg)

    try:
        cfg = parse_config(args.config.read_text())
        if args.seed is not None:
            if not (0 <= args.seed < 2**64):
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg["sim.seed"] = args.seed
        buf = io.StringIO()
        kwargs = {"dump_paths": args.dump_paths} if args.verb == "validate" else {}
        ok = COMMANDS[args.verb](cfg, buf, log, **kwargs)
    except (ConfigError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, InvariantViolation) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{args.verb}_{config_tag(args.verb, cfg)}.csv"
    path.write_text(buf.getvalue())
    print(f"wrote {path}")
    return EXIT_OK if ok else EXIT_VERDICT


if __name__ == "__main__":
    sys.exit(main())
