import json

import numpy as np
import pytest

from contagion_hjb import cli
from contagion_hjb.model import ConfigError


def small(tmp_path, **edits):
    d = json.loads(cli.default_config_text())
    d["grid"] = {"n_space": 31, "n_time": 200}
    d["sim"].update(dt=2e-3, n_paths=400)
    d["verify"].update(calibration_paths=200, lambdas=[0.5])
    for k, v in edits.items():
        block, _, key = k.partition("__")
        if key:
            d[block][key] = v
        else:
            d[block] = v
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return p


def test_shipped_config_is_benchmark():
    exp = cli.loads(cli.default_config_text())
    m = exp.market
    assert m.gamma == 0.3 and m.rate == 0.0 and m.horizon == 3.0
    np.testing.assert_array_equal(m.drift[:, :, 0], [[1, .5], [1.2, .4]])
    np.testing.assert_array_equal(m.intensity[:, :, 0], [[1, .1], [1, .1]])
    np.testing.assert_array_equal(m.volatility[:, 0], [.4, .6])
    np.testing.assert_array_equal(m.generator, [[-.5, .5], [.4, -.4]])


def test_round_trip_is_identity():
    text = cli.dumps(cli.loads(cli.default_config_text()))
    assert cli.dumps(cli.loads(text)) == text
    assert text == cli.default_config_text()


def test_transition_rates_accepted():
    d = json.loads(cli.default_config_text())
    del d["market"]["generator"]
    d["market"]["transition_rates"] = [[0, .5], [.4, 0]]
    assert np.array_equal(cli.config_from_dict(d).market.generator, [[-.5, .5], [.4, -.4]])


def test_missing_field_named(tmp_path, capsys):
    d = json.loads(cli.default_config_text())
    del d["market"]["intensity"]
    with pytest.raises(ConfigError, match="market.intensity"):
        cli.config_from_dict(d)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    assert cli.main(["solve", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "market.intensity" in capsys.readouterr().err


def test_syntax_error_has_line():
    with pytest.raises(ConfigError, match="line 3"):
        cli.loads('{\n  "market": {},\n  oops\n}')


def test_unknown_fields_rejected():
    d = json.loads(cli.default_config_text())
    d["grid"]["n_spcae"] = 3
    with pytest.raises(ConfigError, match="grid"):
        cli.config_from_dict(d)


def test_parameter_paths(cfg):
    assert np.all(cli.get_parameter(cfg, "intensity[1][1]") == 1.0)
    c = cli.set_parameter(cfg, "intensity[1][1]", 1.4)
    assert np.all(c.intensity[0, 0] == 1.4) and np.all(c.intensity[1, 0] == 1.0)
    assert cli.set_parameter(cfg, "volatility[2]", 0.8).volatility[1, 0] == 0.8
    assert cli.set_parameter(cfg, "gamma", 0.5).gamma == 0.5
    for bad in ("intensity[3][1]", "sigma", "drift[1]"):
        with pytest.raises(ConfigError):
            cli.get_parameter(cfg, bad)


def test_solve_outputs(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["solve", "--config", str(small(tmp_path)), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["bounds.csv", "strategy_t0.csv", "surface_00.csv", "surface_01.csv", "surface_10.csv",
                     "surface_11.csv"]
    lines = (out / "surface_11.csv").read_text().splitlines()
    assert lines[0] == "t,lambda,w" and len(lines) == 1 + 31 * 200
    assert all(float(l.split(",")[2]) == 0.0 for l in lines[1:])
    bounds = (out / "bounds.csv").read_text().splitlines()
    assert all(r.split(",")[9] == "true" for r in bounds[1:])


def test_outputs_are_deterministic(tmp_path):
    cfgp = small(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    for verb in ("solve", "filter-demo"):
        assert cli.main([verb, "--config", str(cfgp), "--out", str(a), "--seed", "3"]) == 0
        assert cli.main([verb, "--config", str(cfgp), "--out", str(b), "--seed", "3"]) == 0
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_sweep(tmp_path, capsys):
    out = tmp_path / "o"
    rc = cli.main(["sweep", "--config", str(small(tmp_path)), "--out", str(out), "--parameter", "gamma",
                   "--values", "0.1,0.3,0.5,0.7"])
    assert rc == 0
    files = sorted(p.name for p in out.iterdir())
    assert len([f for f in files if f.startswith("sweep_gamma=")]) == 8
    assert "sweep_gamma_properties.csv" in files
    assert "increasing in gamma" in capsys.readouterr().out


def test_sweep_errors(tmp_path):
    p = small(tmp_path)
    assert cli.main(["sweep", "--config", str(p), "--parameter", "gamma", "--values", ""]) == 1
    assert cli.main(["sweep", "--config", str(p), "--parameter", "kappa", "--values", "1"]) == 1
    d = json.loads(p.read_text())
    d["sweep"]["values"] = []
    with pytest.raises(ConfigError, match="empty"):
        cli.config_from_dict(d)


def test_verify_all_distressed_passes(tmp_path):
    p = small(tmp_path, verify__z0="11")
    assert cli.main(["verify", "--config", str(p), "--out", str(tmp_path / "v")]) == 0
    assert (tmp_path / "v" / "verification.csv").exists()


def test_verify_numerical_failure_exit_code(tmp_path):
    # a step this coarse pushes the filter out of the simplex
    p = small(tmp_path, sim__dt=0.05)
    assert cli.main(["verify", "--config", str(p), "--out", str(tmp_path / "v")]) == 2


def test_show_config(capsys):
    assert cli.main(["show-config"]) == 0
    assert json.loads(capsys.readouterr().out)["market"]["gamma"] == 0.3
