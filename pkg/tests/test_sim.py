import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from mpftc.config import load_config
from mpftc.core import ConfigurationError
from mpftc.sim import (LOG_SCHEMA_VERSION, ClosedLoopLog, Scenario, build_controller, evaluate_expectations,
                       monitor_lyapunov, monitor_safety, run_closed_loop)

from conftest import SCENARIOS

BASE = Path(SCENARIOS)


def _car(duration=1.0):
    sc = load_config(BASE / "car.toml")[0]
    return dataclasses.replace(sc, duration=duration)


def _di_safe(duration=0.4, **kw):
    sc = [s for s in load_config(BASE / "double_integrator.toml") if s.mode == "mpftc-safe"][0]
    return dataclasses.replace(sc, duration=duration, **kw)


@pytest.fixture(scope="module")
def car_log():
    return run_closed_loop(_car(), BASE)


def test_log_length_and_final_row(car_log):
    sc = _car()
    assert len(car_log) == sc.steps + 1 == 21
    assert car_log.status[-1] == "final" and np.all(np.isnan(car_log.u[-1]))
    for name in ("x", "tau", "u", "v", "value", "stage", "status", "g_true", "g_pred", "wall_time"):
        assert len(getattr(car_log, name)) == len(car_log)
    np.testing.assert_allclose(np.diff(car_log.t), sc.t_s)


def test_clock_update(car_log):
    tau, v = car_log.array("tau"), car_log.array("v")
    np.testing.assert_allclose(np.diff(tau), 0.05 + v[:-1], atol=1e-15)


def test_replay_is_bit_identical(car_log):
    again = run_closed_loop(_car(), BASE)
    assert again.replay_signature() == car_log.replay_signature()


def test_seed_changes_obstacle_realisation(robot_artifact):
    sc = load_config(BASE / "robot.toml")[0]
    sc = dataclasses.replace(sc, terminal={**sc.terminal, "artifact": str(robot_artifact)}, duration=0.09)
    a = run_closed_loop(sc, BASE)
    b = run_closed_loop(dataclasses.replace(sc, seed=1), BASE)
    assert a.obstacle_w[0] == b.obstacle_w[0]
    assert a.obstacle_w[-1] != b.obstacle_w[-1]


def test_golden_csv_header(car_log, tmp_path):
    p = car_log.write_csv(tmp_path / "log.csv")
    with p.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "t", "tau", "x0", "x1", "x2", "u0", "u1", "v", "value", "stage", "status",
                       "fallback", "solver_violation", "certificate_violation", "h_violation", "g_true",
                       "g_pred", "iterations", "wall_time"]
    assert len(rows) == len(car_log) + 1


def test_json_round_trip(car_log, tmp_path):
    p = car_log.write_json(tmp_path / "log.json")
    d = json.loads(p.read_text())
    assert d["schema_version"] == LOG_SCHEMA_VERSION
    assert d == json.loads(json.dumps(car_log.to_dict()))
    np.testing.assert_allclose(np.asarray(d["x"]), car_log.array("x"))
    assert d["g_true"][0] == "-inf"  # no obstacle in the car scenario
    assert d["open_loop"]["k"] == [0, 10]


def test_scenario_duration_must_be_multiple():
    with pytest.raises(ConfigurationError):
        dataclasses.replace(_car(), duration=1.01)


def test_wrong_initial_dimension():
    with pytest.raises(ConfigurationError):
        run_closed_loop(dataclasses.replace(_car(), x0=[0.0, 0.0]), BASE)


def test_missing_artifact_is_configuration_error(tmp_path):
    sc = load_config(BASE / "robot.toml")[0]
    sc = dataclasses.replace(sc, terminal={**sc.terminal, "artifact": str(tmp_path / "nope.json")})
    with pytest.raises(ConfigurationError, match="synth"):
        build_controller(sc, BASE)


# -- fallback ---------------------------------------------------------------------------

def test_certificate_fallback_on_solver_failure():
    sc = _di_safe(0.3)
    ctl = build_controller(sc, BASE)
    solve = ctl.nlp.solve

    def flaky(x_k, tau_k, constraints=(), guess=None, k=0, lam=None):
        sol = solve(x_k, tau_k, constraints, guess, k, lam)
        return dataclasses.replace(sol, status="max-iter") if k >= 3 and k % 2 else sol

    ctl.nlp.solve = flaky
    log = run_closed_loop(sc, BASE, controller=ctl)
    fb = np.asarray(log.fallback[:-1])
    assert fb.sum() == sum(1 for k in range(sc.steps) if k >= 3 and k % 2)
    rep = monitor_safety(log)
    assert rep.uncertified == 0 and rep.safe and rep.fallbacks == fb.sum()
    # the applied input on a fallback step is the shifted certificate's first input
    k = 3
    assert log.status[k] == "max-iter" and log.certificate_violation[k] <= 1e-6


def test_unsafe_mode_does_not_fall_back():
    sc = dataclasses.replace(_di_safe(0.2), mode="mpftc", M=None, penalty=1e6, slices={}, expect={})
    ctl = build_controller(sc, BASE)
    solve = ctl.nlp.solve
    ctl.nlp.solve = lambda *a, **kw: dataclasses.replace(solve(*a, **kw), status="max-iter")
    log = run_closed_loop(sc, BASE, controller=ctl)
    assert not any(log.fallback)


# -- monitors on synthetic logs -----------------------------------------------------------

def _synthetic(values, stages, mode="mpftc", g=None, status=None):
    n = len(values)
    lg = ClosedLoopLog("syn", mode, 0.1, 1, 1)
    for k in range(n + 1):
        last = k == n
        lg.t.append(0.1 * k)
        lg.x.append([0.0])
        lg.tau.append(0.1 * k)
        lg.u.append([np.nan] if last else [0.0])
        lg.v.append(np.nan if last else 0.0)
        lg.value.append(np.nan if last else values[k])
        lg.stage.append(np.nan if last else stages[k])
        lg.status.append("final" if last else (status[k] if status else "optimal"))
        lg.fallback.append(False)
        lg.solver_violation.append(np.nan if last else 0.0)
        lg.certificate_violation.append(np.nan)
        lg.h_violation.append(np.nan if last else -1.0)
        lg.g_true.append(-1.0 if g is None else g[min(k, n - 1)])
        lg.g_pred.append(np.nan if last else -1.0)
        lg.obstacle_active.append([])
        lg.obstacle_w.append([])
        lg.iterations.append(0)
        lg.wall_time.append(0.0)
    return lg


def test_lyapunov_monitor_pass_and_fail():
    V = [10.0, 8.0, 6.5, 5.5]
    good = monitor_lyapunov(_synthetic(V, [2.0, 1.5, 1.0, 1.0]))
    assert good.checked == 3 and good.pass_rate == 1.0
    bad = monitor_lyapunov(_synthetic(V, [2.0, 2.0, 1.0, 1.0]))
    assert bad.passed == 2 and bad.failures[0][0] == 1 and bad.failures[0][1] == pytest.approx(0.5)


def test_lyapunov_monitor_skips_non_nominal():
    rep = monitor_lyapunov(_synthetic([10.0, 20.0, 5.0], [1.0, 1.0, 1.0], status=["optimal", "max-iter", "optimal"]))
    assert rep.checked == 0 and rep.pass_rate == 1.0


def test_safety_monitor_records_signed_violation():
    lg = _synthetic([1.0] * 5, [0.0] * 5, g=[-0.5, -0.1, 0.2, -0.3, -0.3])
    rep = monitor_safety(lg)
    assert rep.violations == 1 and rep.max_g_violation == pytest.approx(0.2)
    assert rep.first_violation_time == pytest.approx(0.2) and not rep.safe
    assert monitor_safety(_synthetic([1.0] * 3, [0.0] * 3)).safe


def test_safety_monitor_uncertified_in_safe_mode():
    lg = _synthetic([1.0] * 3, [0.0] * 3, mode="mpftc-safe", status=["optimal", "infeasible", "optimal"])
    rep = monitor_safety(lg)
    assert rep.uncertified == 1 and not rep.safe


def test_expectations(car_log):
    sc = dataclasses.replace(_car(), expect={"tau0": [0.573, 0.02], "lyapunov_pass_rate": 0.99})
    ctl = build_controller(sc, BASE)
    checks = evaluate_expectations(sc, car_log, ctl.model, ctl.ref, 1.0)
    assert [c.name for c in checks] == ["tau0", "lyapunov_pass_rate"] and all(c.ok for c in checks)
    assert checks[0].line().startswith("PASS tau0")
    with pytest.raises(ConfigurationError):
        evaluate_expectations(dataclasses.replace(sc, expect={"bogus": 1}), car_log, ctl.model, ctl.ref)
