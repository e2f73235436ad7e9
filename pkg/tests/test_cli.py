"""Command-line verbs: exit codes, CSV layout and byte-for-byte determinism."""

import pytest

from aaavol.cli import EXIT_CONFIG, EXIT_OK, main, parse_config
from aaavol.errors import ConfigError

ROUGH_GFUN = "model.rho = -0.3\nmodel.h = 0.1\n"
SABR_VALIDATE = """
model.type = sabr
model.alpha0 = 0.2
model.nu = 0.5
model.rho = -0.3
market.tau = 0.1
sim.paths = 20000
sim.seed = 7
"""


def run(tmp_path, verb, text, *extra):
    tmp_path.mkdir(parents=True, exist_ok=True)
    cfg = tmp_path / f"{verb}.cfg"
    cfg.write_text(text)
    out = tmp_path / "out"
    code = main([verb, "--config", str(cfg), "--out", str(out), *extra])
    files = sorted(out.glob(f"{verb}_*.csv")) if out.exists() else []
    return code, files


def read_table(path):
    lines = [l for l in path.read_text().splitlines() if l and not l.startswith("#")]
    header = lines[0].split(",")
    rows = [dict(zip(header, l.split(","))) for l in lines[1:]]
    return header, rows


class TestConfig:
    def test_comments_and_lists(self):
        cfg = parse_config("run.tau_levels = 0.2, 0.1  # ladder\nsim.paths = 10\n")
        assert cfg == {"run.tau_levels": [0.2, 0.1], "sim.paths": 10}

    @pytest.mark.parametrize("text", ["foo.bar = 1", "sim.paths = 1\nsim.paths = 2", "sim.paths", "sim.paths = x"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestGfun:
    def test_passes(self, tmp_path):
        code, files = run(tmp_path, "gfun", ROUGH_GFUN)
        assert code == EXIT_OK
        header, rows = read_table(files[0])
        assert header == ["y", "g", "gprime", "residual"]
        assert max(float(r["residual"]) for r in rows) <= 1e-8

    @pytest.mark.parametrize("text", ["model.rho = -1.0\nmodel.h = 0.1\n", "model.rho = -0.3\nmodel.h = 0.6\n"])
    def test_invalid_params(self, tmp_path, text):
        assert run(tmp_path, "gfun", text)[0] == EXIT_CONFIG


class TestSmile:
    def test_lognormal_local_vol(self, tmp_path):
        code, files = run(tmp_path, "smile", "model.type = localvol\nbackbone.c = 0.2\nmarket.tau = 0.5\n")
        assert code == EXIT_OK
        _, rows = read_table(files[0])
        assert all(float(r["sigma_bs"]) == pytest.approx(0.2, rel=1e-14) for r in rows)

    def test_rough_atm(self, tmp_path):
        text = "model.type = roughsabr\nmodel.h = 0.1\nmodel.eta = 1.0\nmodel.rho = -0.3\n" \
               "curve.grid = 0\ncurve.values = 0.04\nmarket.tau = 0.05\nrun.strike_ratios = 0.9, 1.0, 1.1\n"
        code, files = run(tmp_path, "smile", text)
        assert code == EXIT_OK
        _, rows = read_table(files[0])
        atm = [r for r in rows if float(r["strike"]) == 100.0][0]
        assert float(atm["sigma_bs"]) == pytest.approx(0.2, abs=1e-10)

    def test_rough_needs_curve(self, tmp_path):
        text = "model.type = roughsabr\nmodel.h = 0.1\nmodel.eta = 1.0\nmodel.rho = -0.3\nmarket.tau = 0.05\n"
        assert run(tmp_path, "smile", text)[0] == EXIT_CONFIG


class TestValidate:
    def test_zero_vol_of_vol(self, tmp_path):
        code, files = run(tmp_path, "validate", SABR_VALIDATE.replace("0.5", "0.0"))
        assert code == EXIT_OK
        _, rows = read_table(files[0])
        assert len(rows) == 11
        for r in rows:
            assert float(r["abs_diff"]) <= 3 * float(r["mc_stderr"])

    def test_deterministic_and_dump(self, tmp_path):
        code, files = run(tmp_path / "a", "validate", SABR_VALIDATE)
        code2, files2 = run(tmp_path / "b", "validate", SABR_VALIDATE)
        assert code == code2 == EXIT_OK
        assert files[0].name == files2[0].name
        assert files[0].read_bytes() == files2[0].read_bytes()

    def test_seed_override_changes_tag(self, tmp_path):
        _, a = run(tmp_path, "validate", SABR_VALIDATE.replace("20000", "2000"))
        _, b = run(tmp_path, "validate", SABR_VALIDATE.replace("20000", "2000"), "--seed", "8")
        assert len(a) == 1 and len(b) == 2

    def test_dump_paths(self, tmp_path):
        dump = tmp_path / "paths.csv"
        code, _ = run(tmp_path, "validate", SABR_VALIDATE.replace("20000", "200"), "--dump-paths", str(dump))
        assert code in (0, 1)
        assert dump.read_text().splitlines()[0] == "path_id,time,S,alpha,U,R"


class TestResidual:
    def test_sabr(self, tmp_path):
        text = "model.type = sabr\nmodel.alpha0 = 0.2\nmodel.nu = 0.5\nmodel.rho = -0.3\nsim.paths = 300\n"
        code, files = run(tmp_path, "residual", text)
        assert code == EXIT_OK
        text_out = files[0].read_text()
        assert text_out.startswith("tau,strike_ratio,median_abs_r,iqr_r\n")
        assert "# verdict exponent,pass" in text_out

    def test_lognormal_short_circuit(self, tmp_path):
        code, files = run(tmp_path, "residual", "model.type = localvol\nbackbone.c = 0.3\nsim.paths = 100\n")
        assert code == EXIT_OK
        assert "# verdict machine_zero,pass" in files[0].read_text()

    def test_bad_tau_grid(self, tmp_path):
        text = "model.type = sabr\nmodel.alpha0 = 0.2\nmodel.nu = 0.5\nmodel.rho = -0.3\nrun.tau_levels = 0.1, 0.2, 0.05\n"
        assert run(tmp_path, "residual", text)[0] == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        assert run(tmp_path, "residual", "foo.bar = 1\n")[0] == EXIT_CONFIG


def test_all_verbs_registered():
    from aaavol.cli import COMMANDS

    assert set(COMMANDS) == {"gfun", "smile", "validate", "residual"}
