import numpy as np
import pytest
from hypothesis import given, strategies as st

from mpftc.core import ConfigurationError, PropertyFailure
from mpftc.uncertainty import (INACTIVE, ObstacleRealisation, ObstacleSpec, RangeError, RobustConstraint,
                               UncertaintyModel, UncertaintySet, check_monotonicity, eval_robust_constraint,
                               node_constraint_expr, propagate_tube, robot_uncertainty)

W0 = np.array([-6.0, -2.0])


def test_tube_horizon_zero():
    tube = propagate_tube(robot_uncertainty(0.03), W0, 0)
    assert len(tube) == 1
    np.testing.assert_allclose(tube[0].center, W0)
    assert tube[0].radius == pytest.approx(0.03)


def test_tube_ten_steps():
    tube = propagate_tube(robot_uncertainty(0.03), W0, 10, k=4)
    s = tube[10]
    np.testing.assert_allclose(s.center - W0, [0.0636396, 0.0636396], atol=1e-7)
    assert s.radius == pytest.approx(0.33)
    assert (s.n, s.k) == (14, 4)


def test_tube_constant_without_drift():
    m = UncertaintyModel(np.zeros(2), 0.0, 0.0, 0.1)
    tube = propagate_tube(m, W0, 5)
    assert all(np.allclose(s.center, W0) and s.radius == 0.1 for s in tube)


def test_tube_negative_horizon():
    with pytest.raises(ConfigurationError):
        propagate_tube(robot_uncertainty(0.03), W0, -1)


def test_uncertainty_set_radius_nonnegative():
    with pytest.raises(ConfigurationError):
        UncertaintySet([0, 0], -0.1, 0, 0)


def test_tube_contains_sampled_propagation(rng):
    m = robot_uncertainty(0.03)
    tube = propagate_tube(m, W0, 50)
    for _ in range(200):
        w = W0.copy()
        for j in range(1, 51):
            w = m.omega(w, m.sample_xi(rng))
            # reachable from a measured point: radius j * xi_bound, inside the tube's w-disc
            assert np.linalg.norm(w - tube[j].center) <= tube[j].radius - m.r0 + 1e-12


def _disc_rc(center, radius, body, n=0):
    return RobustConstraint("disc", [UncertaintySet(center, radius, n, n)], (0, 1), body)


def test_robust_value_far_away():
    rc = _disc_rc([0, 0], 0.33, 0.33)
    assert rc.value([10.0, 0.0, 0, 0]) == pytest.approx(0.33**2 - 100)


def test_robust_value_at_center_positive():
    rc = _disc_rc([1, 1], 0.33, 0.03)
    assert rc.value([1.0, 1.0, 0, 0]) == pytest.approx(0.03**2)


def test_static_obstacle_instance():
    spec = ObstacleSpec("static", (0,), (0.0, 15.0), bound=20.0)
    rc = spec.measured(0, [20.0], 10, 0.02)
    assert eval_robust_constraint(rc, [25.0, 0.0], [0.0], 3)[0] == pytest.approx(5.0)
    assert spec.true_value([25.0, 0.0], [20.0], 1.0) == pytest.approx(5.0)
    # time-invariant inside its window, gone afterwards
    assert rc.value([21.0, 0], None, 0) == rc.value([21.0, 0], None, 10)
    assert spec.true_value([25.0, 0.0], [20.0], 15.5) == -np.inf
    assert not spec.measured(800, [20.0], 10, 0.02).active


def test_out_of_range_step():
    rc = propagate_tube(robot_uncertainty(0.03), W0, 5, k=2)
    c = RobustConstraint("disc", rc, (0, 1), 0.03)
    with pytest.raises(RangeError):
        c.value([0, 0, 0, 0], None, 8)
    with pytest.raises(RangeError):
        c.value([0, 0, 0, 0], None, 1)
    with pytest.raises(RangeError):
        eval_robust_constraint(c, [0, 0, 0, 0], None, 3, k=1)


def test_robust_dominates_nominal(rng):
    m = robot_uncertainty(0.03)
    tube = propagate_tube(m, W0, 20)
    rc = RobustConstraint("disc", tube, (0, 1), 0.03)
    for _ in range(500):
        n = int(rng.integers(0, 21))
        s = tube[n]
        x = np.r_[s.center + rng.normal(scale=0.5, size=2), 0, 0]
        a = rng.uniform(0, 2 * np.pi)
        r = (s.radius - 0.03) * np.sqrt(rng.uniform())
        w = s.center + r * np.array([np.cos(a), np.sin(a)])
        gamma = 0.03**2 - np.sum((x[:2] - w) ** 2)
        assert rc.value(x, None, n) >= gamma - 1e-12


def test_smooth_row_has_same_zero_level_set(rng):
    rc = RobustConstraint("disc", propagate_tube(robot_uncertainty(0.03), W0, 10), (0, 1), 0.03)
    for _ in range(300):
        n = int(rng.integers(0, 11))
        x = np.r_[W0 + rng.normal(scale=0.4, size=2), 0, 0]
        assert np.sign(rc.value(x, None, n)) == np.sign(rc.smooth_value(x, n))


def test_inactive_row_value():
    prm = np.array([0.0, 1.0, 2.0, 3.0])
    assert node_constraint_expr("disc", np.array([1.0, 2.0]), prm, (0, 1)) == INACTIVE


def _reanchor(rng, k, horizon=50, inside=True):
    m = robot_uncertainty(0.03)
    w_k = W0 + rng.normal(scale=0.1, size=2)
    rc_k = RobustConstraint("disc", propagate_tube(m, w_k, horizon, k), (0, 1), 0.03)
    if inside:
        w_k1 = m.omega(w_k, m.sample_xi(rng))
    else:
        w_k1 = w_k + m.drift + np.array([0.2, 0.0])
    rc_k1 = RobustConstraint("disc", propagate_tube(m, w_k1, horizon, k + 1), (0, 1), 0.03)
    return rc_k, rc_k1


def _samples(rng, rc, count=1000):
    out = []
    for _ in range(count):
        n = int(rng.integers(rc.k + 1, rc.k + len(rc.tube)))
        c = rc.set_at(n).center
        out.append((np.r_[c + rng.normal(scale=0.6, size=2), rng.normal(size=2)], rng.normal(size=2), n))
    return out


def test_monotone_under_reanchoring(rng):
    rc_k, rc_k1 = _reanchor(rng, 3)
    rep = check_monotonicity(rc_k, rc_k1, _samples(rng, rc_k), tol=1e-9)
    assert rep.ok and rep.n_checked == 1000


def test_identical_tubes_give_equality(rng):
    rc_k, _ = _reanchor(rng, 0)
    rep = check_monotonicity(rc_k, rc_k, _samples(rng, rc_k, 200))
    assert rep.ok and rep.max_increase == 0.0


def test_adversarial_reanchor_is_reported(rng):
    rc_k, rc_k1 = _reanchor(rng, 0, inside=False)
    rep = check_monotonicity(rc_k, rc_k1, _samples(rng, rc_k))
    assert not rep.ok
    n, i, inc = rep.failures[0]
    assert inc > 1e-9
    with pytest.raises(PropertyFailure, match="n="):
        check_monotonicity(rc_k, rc_k1, _samples(rng, rc_k), raise_on_failure=True)


@given(seed=st.integers(0, 2**31 - 1), k=st.integers(0, 500))
def test_tube_nesting_property(seed, k):
    rng = np.random.default_rng(seed)
    rc_k, rc_k1 = _reanchor(rng, k, horizon=30)
    for n in range(k + 1, k + 31):
        a, b = rc_k.set_at(n), rc_k1.set_at(n)
        assert np.linalg.norm(a.center - b.center) + b.radius <= a.radius + 1e-12


def test_realisation_is_seeded():
    spec = ObstacleSpec("drifting-disc", (0, 1), w0=(-6.0, -2.0), speed=0.3, heading=np.pi / 4, xi_bound=0.03,
                        growth=0.03, body_radius=0.03)
    a = ObstacleRealisation(spec, 0.03, 7)
    b = ObstacleRealisation(spec, 0.03, 7)
    c = ObstacleRealisation(spec, 0.03, 8)
    assert np.array_equal(a.at(100), b.at(100))
    assert not np.array_equal(a.at(100), c.at(100))
    # every realised step stays inside the one-step tube of the previous measurement
    m = spec.model(0.03)
    for k in range(100):
        assert np.linalg.norm(a.at(k + 1) - (a.at(k) + m.drift)) <= m.xi_bound + 1e-12


def test_unknown_kinds_rejected():
    with pytest.raises(ConfigurationError):
        ObstacleSpec("moving-box", (0,))
    with pytest.raises(ConfigurationError):
        RobustConstraint("box", [], (0,))
