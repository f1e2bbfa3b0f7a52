import json
from pathlib import Path

import pytest

from mpftc import cli
from mpftc.config import apply_override, dump_scenario, load_config, parse_value, read_stub
from mpftc.core import ConfigurationError, IntegrationError

from conftest import SCENARIOS

BASE = Path(SCENARIOS)
MINIMAL = """
schema_version = 1
[defaults]
model = "double_integrator"
reference = {kind = "double_integrator", v_r = 4.0}
cost = {q = [10.0, 10.0], r = [1.0], w = 1.0}
t_s = 0.02
duration = 0.1
x0 = [0.0, 0.0]
tau0 = 0.0
[[scenarios]]
name = "tiny"
N = 5
"""


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_shipped_configs_load():
    names = [sc.name for f in sorted(BASE.glob("*.toml")) for sc in load_config(f)]
    assert names == ["car_mpftc", "di_safe_mpftc", "di_mpftc", "di_mpc", "robot_safe_mpftc"]


def test_defaults_merge_and_only():
    scs = load_config(BASE / "double_integrator.toml", only=["di_mpc"])
    assert len(scs) == 1 and scs[0].mode == "mpc" and scs[0].t_s == 0.02
    with pytest.raises(ConfigurationError, match="no scenario named"):
        load_config(BASE / "double_integrator.toml", only=["nope"])


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="horizon"):
        load_config(_write(tmp_path, MINIMAL + "horizon = 3\n"))
    with pytest.raises(ConfigurationError, match="cost.qq"):
        load_config(_write(tmp_path, MINIMAL.replace("w = 1.0}", "w = 1.0, qq = 1}")))
    with pytest.raises(ConfigurationError, match="top-level"):
        load_config(_write(tmp_path, "extra = 1\n" + MINIMAL))
    with pytest.raises(ConfigurationError, match="schema_version"):
        load_config(_write(tmp_path, MINIMAL.replace("schema_version = 1", "schema_version = 7")))
    with pytest.raises(ConfigurationError, match="duplicate"):
        load_config(_write(tmp_path, MINIMAL + '[[scenarios]]\nname = "tiny"\nN = 3\n'))


def test_parse_errors_and_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, "schema_version = = 1"))
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "missing.toml")


def test_overrides():
    assert parse_value("3") == 3 and parse_value("[1, 2]") == [1, 2] and parse_value("a/b.json") == "a/b.json"
    d = apply_override({"cost": {"w": 1.0}}, "cost.w=5")
    assert d["cost"]["w"] == 5
    with pytest.raises(ConfigurationError):
        apply_override({}, "nonsense=1")
    with pytest.raises(ConfigurationError):
        apply_override({}, "N")
    sc = load_config(BASE / "car.toml", overrides=["N=30", "solver.max_iter=50"])[0]
    assert sc.N == 30 and sc.solver["max_iter"] == 50


def test_effective_config_round_trip(tmp_path):
    for f in sorted(BASE.glob("*.toml")):
        for sc in load_config(f):
            p = _write(tmp_path, dump_scenario(sc), "eff.toml")
            again = load_config(p)[0]
            assert again.to_dict() == sc.to_dict()


def test_stub_is_kept_but_not_run():
    stub = read_stub(BASE / "car.toml")
    assert stub["Q"] == [8e4, 8e5, 8e5, 0.5] and stub["intervals"] == 20


# -- CLI ------------------------------------------------------------------------------------

def test_cli_missing_file_exit_2(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.toml")]) == cli.EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_cli_unknown_key_exit_2(tmp_path):
    assert cli.main(["validate", str(_write(tmp_path, MINIMAL + "bogus = 1\n"))]) == cli.EXIT_CONFIG


def test_cli_list(capsys):
    assert cli.main(["list", str(BASE)]) == 0
    out = capsys.readouterr().out
    assert "car.toml:car_mpftc" in out and "robot.toml:robot_safe_mpftc" in out and "mpfc_stub" in out


def test_cli_validate(robot_artifact, capsys):
    files = [str(p) for p in sorted(BASE.glob("*.toml"))]
    # without the synthesized artifact the robot scenario cannot be built
    assert cli.main(["validate", *files]) == cli.EXIT_CONFIG
    assert "synth" in capsys.readouterr().err
    assert cli.main(["validate", *files, "--override", f"terminal.artifact={robot_artifact}"]) == 0
    assert capsys.readouterr().out.count("ok ") == 5


def test_cli_synth_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["synth", "robot-appendix-b", "--out", str(a)]) == 0
    assert cli.main(["synth", "robot-appendix-b", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(capsys.readouterr().out.split("artifact:")[0])
    assert abs(rep["gamma_star"]["rel_dev"]) < 0.05 and abs(rep["K1"]["rel_dev"]) < 0.03
    c = tmp_path / "di.json"
    assert cli.main(["synth", "double-integrator-lqr", "--out", str(c)]) == 0
    assert json.loads(c.read_text())["schema_version"] == 1


def test_cli_run_output_root_from_env(tmp_path, monkeypatch):
    cfg = _write(tmp_path, MINIMAL + 'expect = {safe = true}\n')
    monkeypatch.setenv("MPFTC_OUTPUT_ROOT", str(tmp_path / "out"))
    assert cli.main(["run", str(cfg)]) == 0
    run_dirs = list((tmp_path / "out").iterdir())
    assert len(run_dirs) == 1 and run_dirs[0].name.endswith("-c")
    d = run_dirs[0] / "tiny"
    for f in ("effective_config.toml", "log.csv", "log.json", "trajectory.csv", "report.json"):
        assert (d / f).is_file()
    rep = json.loads((d / "report.json").read_text())
    assert rep["checks"][0]["name"] == "safe" and rep["checks"][0]["ok"]
    # the effective config reproduces the run
    assert load_config(d / "effective_config.toml")[0].N == 5


def test_cli_failed_expectation_exit_3(tmp_path):
    cfg = _write(tmp_path, MINIMAL + 'expect = {velocity_max = {value = 0.0, window = [0.0, 0.1]}}\n')
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o"), "--override", "x0=[0.0, 1.0]"]) == cli.EXIT_ACCEPT


def test_cli_numerical_failure_exit_4(tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise IntegrationError("non-finite state")

    monkeypatch.setattr(cli, "run_closed_loop", boom)
    assert cli.main(["run", str(_write(tmp_path, MINIMAL)), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "mpftc", "list", str(BASE)], capture_output=True, text=True)
    assert out.returncode == 0 and "di_mpc" in out.stdout
