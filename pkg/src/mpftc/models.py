"""The three plants: kinematic car, double integrator and two-joint planar arm.

Dynamics are written once with CasADi operations, so the same expression
serves numeric simulation, AD jacobians and the NLP transcription.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import casadi as ca
import numpy as np

from .core import ConfigurationError, IntegrationError, KnownConstraintSet


class DomainError(ValueError):
    """Model evaluated outside its mathematical domain."""


# -- robot -------------------------------------------------------------------


@dataclass(frozen=True)
class RobotParams:
    """Inertial, Coriolis and gravity coefficients of the planar arm (Table I defaults)."""

    b1: float = 200.0
    b2: float = 50.0
    b3: float = 23.5
    b4: float = 25.0
    b5: float = 122.5
    c1: float = -25.0
    g1: float = 784.8
    g2: float = 245.3


def robot_inertia(q, p: RobotParams):
    c2 = ca.cos(q[1])
    b12 = p.b3 + p.b4 * c2
    return ca.vertcat(ca.horzcat(p.b1 + p.b2 * c2, b12), ca.horzcat(b12, p.b5))


def robot_coriolis(q, qd, p: RobotParams):
    s = -p.c1 * ca.sin(q[1])
    return s * ca.vertcat(ca.horzcat(qd[0], qd[0] + qd[1]), ca.horzcat(-qd[0], 0))


def robot_gravity(q, p: RobotParams):
    c12 = ca.cos(q[0] + q[1])
    return ca.vertcat(p.g1 * ca.cos(q[0]) + p.g2 * c12, p.g2 * c12)


def _inv2(B):
    det = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
    return ca.vertcat(ca.horzcat(B[1, 1], -B[0, 1]), ca.horzcat(-B[1, 0], B[0, 0])) / det


def _robot_ode(x, u, p: RobotParams):
    q, qd = x[0:2], x[2:4]
    rhs = u - ca.mtimes(robot_coriolis(q, qd, p), qd) - robot_gravity(q, p)
    return ca.vertcat(qd, ca.mtimes(_inv2(robot_inertia(q, p)), rhs))


def _car_ode(x, u):
    return ca.vertcat(u[0] * ca.cos(x[2]), u[0] * ca.sin(x[2]), u[0] * ca.tan(u[1]))


def _di_ode(x, u):
    return ca.vertcat(x[1], u[0])


def _np(v) -> np.ndarray:
    return np.asarray(v, dtype=float).ravel()


# -- plant container -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlantModel:
    """A plant with continuous dynamics, box constraints and discretisation.

    ``exact_step`` (if given) builds the exact discrete map for a sampling
    time; otherwise :meth:`discrete` uses one classical RK4 step.
    """

    name: str
    n_x: int
    n_u: int
    ode: ca.Function
    known: KnownConstraintSet
    rest_input: ca.Function
    position_index: tuple[int, ...]
    velocity_index: tuple[int, ...]
    state_scale: np.ndarray
    input_scale: np.ndarray
    exact_step: Optional[Callable[[float], ca.Function]] = None
    params: object = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def f(self, x, u) -> np.ndarray:
        return _np(self.ode(_np(x), _np(u)))

    def jacobians(self) -> tuple[ca.Function, ca.Function]:
        if "jac" not in self._cache:
            x = ca.SX.sym("x", self.n_x)
            u = ca.SX.sym("u", self.n_u)
            fx = self.ode(x, u)
            self._cache["jac"] = (
                ca.Function("dfdx", [x, u], [ca.jacobian(fx, x)]),
                ca.Function("dfdu", [x, u], [ca.jacobian(fx, u)]),
            )
        return self._cache["jac"]

    def discrete(self, t_s: float) -> ca.Function:
        """Discrete map ``x+ = F(x, u)`` for sampling time ``t_s``."""
        if t_s <= 0:
            raise ConfigurationError("sampling time must be positive")
        key = ("disc", float(t_s))
        if key not in self._cache:
            if self.exact_step is not None:
                fn = self.exact_step(t_s)
            else:
                x = ca.SX.sym("x", self.n_x)
                u = ca.SX.sym("u", self.n_u)
                fn = ca.Function(f"{self.name}_rk4", [x, u], [rk4_expr(self.ode, x, u, t_s)])
            self._cache[key] = fn
        return self._cache[key]

    def step(self, x, u, t_s: float) -> np.ndarray:
        out = _np(self.discrete(t_s)(_np(x), _np(u)))
        if not np.all(np.isfinite(out)):
            raise IntegrationError(f"{self.name}: non-finite successor state {out}")
        return out

    def with_params(self, **kw) -> "PlantModel":
        return replace(self, _cache={}, **kw)


def rk4_expr(ode, x, u, t_s: float, substeps: int = 1):
    h = t_s / substeps
    for _ in range(substeps):
        k1 = ode(x, u)
        k2 = ode(x + h / 2 * k1, u)
        k3 = ode(x + h / 2 * k2, u)
        k4 = ode(x + h * k3, u)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def integrate_rk4(model: PlantModel, x, u, t_s: float, substeps: int = 1) -> np.ndarray:
    """Fixed-step classical RK4 with ``u`` held over ``[0, t_s]``."""
    if t_s <= 0:
        raise ConfigurationError("t_s must be positive")
    x = _np(x)
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite initial state {x}")
    out = _np(rk4_expr(model.ode, ca.DM(x), ca.DM(_np(u)), t_s, substeps))
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"non-finite state after integration: {out}")
    return out


# -- constructors ---------------------------------------------------------------


def car_model(speed_max: float = 6.0, steer_max: float = 0.63) -> PlantModel:
    x = ca.SX.sym("x", 3)
    u = ca.SX.sym("u", 2)
    ode = ca.Function("car_ode", [x, u], [_car_ode(x, u)])
    inf = np.inf
    known = KnownConstraintSet(
        state_lb=[-inf] * 3, state_ub=[inf] * 3, input_lb=[0.0, -steer_max], input_ub=[speed_max, steer_max]
    )
    rest = ca.Function("car_rest", [x], [ca.DM.zeros(2)])
    return PlantModel(
        "car", 3, 2, ode, known, rest, (0, 1), (), np.ones(3), np.ones(2),
        params={"speed_max": speed_max, "steer_max": steer_max},
    )


def _di_exact(t_s: float) -> ca.Function:
    x = ca.SX.sym("x", 2)
    u = ca.SX.sym("u", 1)
    nxt = ca.vertcat(x[0] + t_s * x[1] + 0.5 * t_s**2 * u[0], x[1] + t_s * u[0])
    return ca.Function("di_zoh", [x, u], [nxt])


def double_integrator_model(a_min: float = -1.0, a_max: float = 5.0) -> PlantModel:
    x = ca.SX.sym("x", 2)
    u = ca.SX.sym("u", 1)
    ode = ca.Function("di_ode", [x, u], [_di_ode(x, u)])
    known = KnownConstraintSet(
        state_lb=[-np.inf, 0.0], state_ub=[np.inf, np.inf], input_lb=[a_min], input_ub=[a_max]
    )
    rest = ca.Function("di_rest", [x], [ca.DM.zeros(1)])
    return PlantModel(
        "double_integrator", 2, 1, ode, known, rest, (0,), (1,), np.ones(2), np.ones(1),
        exact_step=_di_exact, params={"a_min": a_min, "a_max": a_max},
    )


def robot_model(
    params: RobotParams = RobotParams(), torque_max: float = 4000.0, speed_max: float = 1.5 * np.pi
) -> PlantModel:
    x = ca.SX.sym("x", 4)
    u = ca.SX.sym("u", 2)
    ode = ca.Function("robot_ode", [x, u], [_robot_ode(x, u, params)])
    inf = np.inf
    known = KnownConstraintSet(
        state_lb=[-inf, -inf, -speed_max, -speed_max],
        state_ub=[inf, inf, speed_max, speed_max],
        input_lb=[-torque_max] * 2,
        input_ub=[torque_max] * 2,
    )
    rest = ca.Function("robot_rest", [x], [robot_gravity(x[0:2], params)])
    return PlantModel(
        "robot", 4, 2, ode, known, rest, (0, 1), (2, 3),
        np.ones(4), np.full(2, 1000.0), params=params,
    )


def make_model(name: str, **kw) -> PlantModel:
    builders = {"car": car_model, "double_integrator": double_integrator_model, "robot": robot_model}
    if name not in builders:
        raise ConfigurationError(f"unknown model {name!r}; expected one of {sorted(builders)}")
    return builders[name](**kw)


# -- numeric entry points ---------------------------------------------------------


def car_dynamics(x, u) -> np.ndarray:
    """``(u1 cos psi, u1 sin psi, u1 tan u2)``."""
    x, u = _np(x), _np(u)
    if abs(u[1]) >= np.pi / 2:
        raise DomainError(f"steering angle {u[1]} outside (-pi/2, pi/2)")
    return _np(_car_ode(ca.DM(x), ca.DM(u)))


def double_integrator_step(x, u, t_s: float) -> np.ndarray:
    """Exact zero-order-hold step of ``p'' = a``."""
    p, pd = _np(x)
    a = float(np.asarray(u).ravel()[0])
    return np.array([p + t_s * pd + 0.5 * t_s**2 * a, pd + t_s * a])


def robot_matrices(q, qd, params: RobotParams = RobotParams()):
    q, qd = ca.DM(_np(q)), ca.DM(_np(qd))
    return (
        np.asarray(robot_inertia(q, params)),
        np.asarray(robot_coriolis(q, qd, params)),
        _np(robot_gravity(q, params)),
    )


def robot_dynamics(x, u, params: RobotParams = RobotParams()) -> np.ndarray:
    x, u = _np(x), _np(u)
    B, _, _ = robot_matrices(x[:2], x[2:], params)
    if np.linalg.cond(B) >= 1e6:
        raise FloatingPointError(f"inertia matrix numerically singular at q={x[:2]}")
    return _np(_robot_ode(ca.DM(x), ca.DM(u), params))
