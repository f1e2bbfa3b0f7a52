import casadi as ca
import numpy as np
import pytest

from mpftc.core import IntegrationError
from mpftc.models import (DomainError, RobotParams, car_dynamics, car_model, double_integrator_model,
                          double_integrator_step, integrate_rk4, make_model, robot_dynamics, robot_matrices,
                          robot_model)
from mpftc.terminal import sampled_model_bounds


@pytest.mark.parametrize("x,u,out", [
    ((0, 0, 0), (1, 0), (1, 0, 0)),
    ((0, 0, np.pi / 2), (2, 0), (0, 2, 0)),
    ((0, 0, 0), (1, 0.63), (1, 0, np.tan(0.63))),
])
def test_car_dynamics_examples(x, u, out):
    np.testing.assert_allclose(car_dynamics(x, u), out, atol=1e-15)


def test_car_tan_value():
    assert car_dynamics((0, 0, 0), (1, 0.63))[2] == pytest.approx(0.7291, abs=1e-4)


def test_car_steering_domain():
    with pytest.raises(DomainError):
        car_dynamics((0, 0, 0), (1, np.pi / 2))


@pytest.mark.parametrize("x,a,ts,out", [
    ((0, 0), 0.0, 0.02, (0, 0)),
    ((0, 4), 0.0, 0.02, (0.08, 4)),
    ((0, 0), 5.0, 0.02, (0.001, 0.1)),
])
def test_double_integrator_zoh(x, a, ts, out):
    np.testing.assert_allclose(double_integrator_step(x, [a], ts), out, atol=1e-15)
    np.testing.assert_allclose(double_integrator_model().step(x, [a], ts), out, atol=1e-15)


def test_rk4_matches_zoh_for_double_integrator(rng):
    m = double_integrator_model()
    for _ in range(20):
        x = rng.uniform(-10, 10, 2)
        u = rng.uniform(-1, 5, 1)
        np.testing.assert_allclose(integrate_rk4(m, x, u, 0.02), double_integrator_step(x, u, 0.02), atol=1e-12)


def test_car_straight_line_step():
    np.testing.assert_allclose(car_model().step([0, 0, 0], [5, 0], 0.05), [0.25, 0, 0], atol=1e-14)


@pytest.mark.parametrize("name,ts", [("car", 0.05), ("robot", 0.03), ("double_integrator", 0.02)])
def test_rk4_step_halving_oracle(name, ts, rng):
    m = make_model(name)
    for _ in range(10):
        if name == "robot":
            x = np.concatenate([rng.uniform(-np.pi, np.pi, 2), rng.uniform(-2, 2, 2)])
            u = np.asarray(m.rest_input(x[:2].tolist() + [0, 0])).ravel() + rng.uniform(-200, 200, 2)
        elif name == "car":
            x = rng.uniform(-5, 5, 3)
            u = np.array([rng.uniform(0, 6), rng.uniform(-0.6, 0.6)])
        else:
            x = rng.uniform(-5, 5, 2)
            u = rng.uniform(-1, 5, 1)
        one = integrate_rk4(m, x, u, ts)
        fine = integrate_rk4(m, x, u, ts, substeps=10)
        assert np.max(np.abs(one - fine) / (1 + np.abs(fine))) <= 1e-6


def test_robot_gravity_compensation_at_rest():
    m = robot_model()
    for q in ([0.3, -1.2], [-5.86, 2.43], [2.0, 0.1]):
        x = np.array(q + [0.0, 0.0])
        u = np.asarray(m.rest_input(x)).ravel()
        np.testing.assert_allclose(robot_dynamics(x, u), 0.0, atol=1e-12)


def test_robot_free_fall_at_origin():
    B0 = np.array([[250.0, 48.5], [48.5, 122.5]])
    g0 = np.array([1030.1, 245.3])
    xd = robot_dynamics([0, 0, 0, 0], [0, 0])
    np.testing.assert_allclose(xd[2:], -np.linalg.solve(B0, g0), rtol=1e-12)
    B, _, g = robot_matrices([0, 0], [0, 0])
    np.testing.assert_allclose(B, B0)
    np.testing.assert_allclose(g, g0)


def test_robot_inertia_quarter_turn():
    B, _, _ = robot_matrices([0.0, np.pi / 2], [0, 0])
    np.testing.assert_allclose(B, [[200, 23.5], [23.5, 122.5]], atol=1e-12)


def test_robot_params_table_defaults():
    p = RobotParams()
    assert (p.b1, p.b2, p.b3, p.b4, p.b5, p.c1, p.g1, p.g2) == (200, 50, 23.5, 25, 122.5, -25, 784.8, 245.3)


def test_robot_inertia_symmetric_positive_definite_on_grid():
    for q1 in np.linspace(-np.pi, np.pi, 50):
        for q2 in np.linspace(-np.pi, np.pi, 50):
            B, _, _ = robot_matrices([q1, q2], [0, 0])
            assert np.array_equal(B, B.T)
            assert np.linalg.eigvalsh(B)[0] > 0
            assert np.linalg.cond(B) < 1e6


def test_published_model_bounds_cover_sampled_region():
    # published bounds carry one decimal; compare at that precision
    Bn, Cn, gn = sampled_model_bounds()
    assert round(Bn, 1) <= 266.4 and round(Cn, 1) <= 269.6 and round(gn, 1) <= 1058.9
    p = RobotParams()
    assert gn == pytest.approx(np.hypot(p.g1 + p.g2, p.g2), rel=1e-9)


@pytest.mark.parametrize("name", ["car", "robot", "double_integrator"])
def test_jacobians_match_central_differences(name, rng):
    m = make_model(name)
    dfdx, dfdu = m.jacobians()
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-2, 2, m.n_x)
        u = rng.uniform(-0.5, 0.5, m.n_u) * (1000 if name == "robot" else 1)
        Jx = np.asarray(dfdx(x, u))
        Ju = np.asarray(dfdu(x, u))
        for J, var, is_x in ((Jx, x, True), (Ju, u, False)):
            for i in range(var.size):
                h = 1e-6 * (1 + abs(var[i]))
                e = np.zeros(var.size); e[i] = h
                if is_x:
                    fd = (m.f(x + e, u) - m.f(x - e, u)) / (2 * h)
                else:
                    fd = (m.f(x, u + e) - m.f(x, u - e)) / (2 * h)
                err = np.max(np.abs(fd - J[:, i]) / (1 + np.abs(J[:, i])))
                worst = max(worst, err)
    assert worst <= 1e-5


def test_non_finite_step_raises():
    m = car_model()
    with pytest.raises(IntegrationError):
        m.step([np.inf, 0, 0], [1, 0], 0.05)
