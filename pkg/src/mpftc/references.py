"""Reference trajectories built from a geometric path and a speed profile.

A path ``p(theta)`` is re-parametrised by arc length once, on a dense grid,
and the inverse map ``s -> theta`` is stored as a cubic B-spline.  The speed
profile is constant up to ``t_c`` and then decelerates linearly to rest so
that the path end is reached exactly when the speed hits zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import casadi as ca
import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.optimize import minimize_scalar

from .core import ConfigurationError, ReferenceTrajectory
from .models import RobotParams, robot_coriolis, robot_gravity, robot_inertia


@dataclass(frozen=True)
class TimingLaw:
    """Arc-length profile ``s(t)``: speed ``v0`` until ``t_c``, then constant
    deceleration ``a`` chosen so the speed vanishes at ``s = arc_length``."""

    v0: float
    t_c: float
    arc_length: float

    def __post_init__(self):
        if self.v0 <= 0 or self.t_c < 0:
            raise ConfigurationError("timing law needs v0 > 0 and t_c >= 0")
        if self.arc_length <= self.v0 * self.t_c:
            raise ConfigurationError("path too short for the cruise phase")

    @property
    def decel(self) -> float:
        return self.v0**2 / (2.0 * (self.arc_length - self.v0 * self.t_c))

    @property
    def t_stop(self) -> float:
        return self.t_c + self.v0 / self.decel

    def expr(self, t):
        """``(s, sdot, sddot)`` as CasADi expressions (also works on floats)."""
        a, tc, ts = self.decel, self.t_c, self.t_stop
        t = ca.fmax(t, 0.0)
        dt = t - tc
        s_dec = self.v0 * t - 0.5 * a * dt**2
        s = ca.if_else(t <= tc, self.v0 * t, ca.if_else(t < ts, s_dec, self.arc_length))
        sd = ca.if_else(t <= tc, self.v0, ca.if_else(t < ts, self.v0 - a * dt, 0.0))
        sdd = ca.if_else(ca.logic_and(t > tc, t < ts), -a, 0.0)
        return s, sd, sdd

    def speed(self, t: float) -> float:
        return float(max(self.v0 - self.decel * max(t - self.t_c, 0.0), 0.0))


def _path_functions(path: Callable, dim: int):
    th = ca.SX.sym("th")
    p = path(th)
    dp = ca.jacobian(p, th)
    ddp = ca.jacobian(dp, th)
    return ca.Function("path", [th], [p, dp, ddp])


@dataclass(frozen=True, eq=False)
class ArcLengthPath:
    """Path with its arc-length table and the spline inverse ``theta(s)``."""

    fn: ca.Function
    theta_range: tuple[float, float]
    s_grid: np.ndarray
    theta_grid: np.ndarray
    theta_of_s: ca.Function

    @property
    def length(self) -> float:
        return float(self.s_grid[-1])

    @classmethod
    def build(cls, path: Callable, theta_range, dim: int = 2, n_grid: int = 20001) -> "ArcLengthPath":
        fn = _path_functions(path, dim)
        th = np.linspace(theta_range[0], theta_range[1], n_grid)
        dp = np.asarray(fn.map(n_grid)(th)[1]).reshape(dim, n_grid)
        speed = np.linalg.norm(dp, axis=0)
        s = cumulative_simpson(speed, x=th, initial=0.0)
        if np.any(np.diff(s) <= 0):
            raise ConfigurationError("path parametrisation must be regular (nonzero tangent)")
        spline = ca.interpolant("theta_of_s", "bspline", [s], th)
        return cls(fn, (float(theta_range[0]), float(theta_range[1])), s, th, spline)

    def theta(self, s):
        return self.theta_of_s(ca.fmin(ca.fmax(s, 0.0), self.length))


def _kinematics(path: ArcLengthPath, law: TimingLaw, t):
    """``theta, p, p', p'', thetadot, thetaddot`` along the timed path."""
    s, sd, sdd = law.expr(t)
    th = path.theta(s)
    p, dp, ddp = path.fn(th)
    n = ca.norm_2(dp)
    thd = sd / n
    thdd = (sdd - ca.dot(dp, ddp) * thd**2 / n) / n
    return th, p, dp, ddp, thd, thdd


# -- car ---------------------------------------------------------------------------


def car_path(th):
    rho2 = -6.0 * ca.log(20.0 / (5.0 - th)) * ca.sin(0.35 * th)
    return ca.vertcat(th, rho2)


def car_reference(v0: float = 5.0, t_c: float = 7.0, theta_start: float = -30.0, n_grid: int = 20001,
                  input_lead: float = 0.0) -> ReferenceTrajectory:
    """Kinematic-car reference: state ``(rho, atan rho2')``, input ``(speed, atan curvature)``.

    Defined for ``theta <= 0`` where ``|theta| = -theta``.  ``input_lead``
    samples the input reference ahead of the state reference; half a sampling
    period makes a held input follow the path to third order.
    """
    path = ArcLengthPath.build(car_path, (theta_start, 0.0), 2, n_grid)
    law = TimingLaw(v0, t_c, path.length)
    t = ca.SX.sym("tau")
    th, p, dp, ddp, thd, thdd = _kinematics(path, law, t)
    psi = ca.atan2(dp[1], dp[0])
    xr = ca.vertcat(p, psi)
    _, _, dpl, ddpl, _, _ = _kinematics(path, law, t + input_lead)
    curv = (dpl[0] * ddpl[1] - dpl[1] * ddpl[0]) / ca.norm_2(dpl) ** 3
    _, sd, _ = law.expr(t + input_lead)
    ur = ca.vertcat(sd, ca.atan(curv))
    return ReferenceTrajectory(
        state_fn=ca.Function("car_rx", [t], [xr]),
        input_fn=ca.Function("car_ru", [t], [ur]),
        domain=(0.0, law.t_stop),
        position_fn=ca.Function("car_pos", [t], [p]),
        position_index=(0, 1),
        name="car",
        params={"v0": v0, "t_c": t_c, "theta_start": theta_start, "decel": law.decel,
                "arc_length": path.length, "t_stop": law.t_stop, "input_lead": input_lead},
    )


# -- robot -------------------------------------------------------------------------


def robot_path(th):
    z = th - np.pi / 3
    return ca.vertcat(z, 5.0 * ca.sin(0.6 * z))


def robot_reference(
    params: RobotParams = RobotParams(), v0: float = 1.0, t_c: float = 5.0, theta_start: float = -5.3,
    n_grid: int = 20001, input_lead: float = 0.0,
) -> ReferenceTrajectory:
    """Joint-space reference; the torque reference is the inverse dynamics of
    the timed path, which past the stop time reduces to gravity compensation.
    ``input_lead`` as for :func:`car_reference`."""
    path = ArcLengthPath.build(robot_path, (theta_start, 0.0), 2, n_grid)
    law = TimingLaw(v0, t_c, path.length)
    t = ca.SX.sym("tau")

    def joint(tt):
        _, p, dp, ddp, thd, thdd = _kinematics(path, law, tt)
        return p, dp * thd, ddp * thd**2 + dp * thdd

    p, pd, _ = joint(t)
    pl, pdl, pddl = joint(t + input_lead)
    u = (ca.mtimes(robot_inertia(pl, params), pddl) + ca.mtimes(robot_coriolis(pl, pdl, params), pdl)
         + robot_gravity(pl, params))
    return ReferenceTrajectory(
        state_fn=ca.Function("robot_rx", [t], [ca.vertcat(p, pd)]),
        input_fn=ca.Function("robot_ru", [t], [u]),
        domain=(0.0, law.t_stop),
        position_fn=ca.Function("robot_pos", [t], [p]),
        position_index=(0, 1),
        name="robot",
        params={"v0": v0, "t_c": t_c, "theta_start": theta_start, "decel": law.decel,
                "arc_length": path.length, "t_stop": law.t_stop, "input_lead": input_lead},
    )


def robot_path_bounds(ref: ReferenceTrajectory, n: int = 4001) -> tuple[float, float]:
    """Sampled ``max |p_dot|`` and ``max |p_ddot|`` along the timed robot path."""
    t = ca.SX.sym("t")
    xr = ref.state_fn(t)
    acc = ca.Function("acc", [t], [ca.jacobian(xr[2:4], t)])
    ts = np.linspace(ref.domain[0], ref.domain[1], n)
    vel = max(np.linalg.norm(ref.state(x)[2:4]) for x in ts)
    a = max(np.linalg.norm(np.asarray(acc(x)).ravel()) for x in ts)
    return float(vel), float(a)


# -- double integrator ---------------------------------------------------------------


def double_integrator_reference(v_r: float = 4.0, t_end: float = 1e3) -> ReferenceTrajectory:
    t = ca.SX.sym("tau")
    return ReferenceTrajectory(
        state_fn=ca.Function("di_rx", [t], [ca.vertcat(v_r * t, v_r)]),
        input_fn=ca.Function("di_ru", [t], [ca.SX(1, 1)]),
        domain=(0.0, float(t_end)),
        position_index=(0,),
        name="double_integrator",
        params={"v_r": v_r},
    )


def make_reference(name: str, **kw) -> ReferenceTrajectory:
    builders = {"car": car_reference, "robot": robot_reference, "double_integrator": double_integrator_reference}
    if name not in builders:
        raise ConfigurationError(f"unknown reference {name!r}")
    return builders[name](**kw)


# -- projection -------------------------------------------------------------------


def project_onto_reference(position, ref: ReferenceTrajectory, n_grid: int = 4001) -> float:
    """``argmin_tau |position - pos(tau)|`` over the domain.

    Dense grid first (ties go to the smallest ``tau``), then a bounded scalar
    refinement inside the neighbouring grid cells.
    """
    position = np.asarray(position, dtype=float).ravel()
    lo, hi = ref.domain
    grid = np.linspace(lo, hi, n_grid)
    if ref.position_fn is not None:
        pts = np.asarray(ref.position_fn.map(n_grid)(grid)).reshape(-1, n_grid).T
    else:
        pts = np.array([ref.position(t) for t in grid])
    d = np.linalg.norm(pts - position, axis=1)
    i = int(np.argmin(d))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    if b <= a:
        return float(grid[i])
    res = minimize_scalar(
        lambda t: float(np.linalg.norm(ref.position(t) - position)), bounds=(a, b), method="bounded",
        options={"xatol": 1e-10},
    )
    return float(res.x) if res.fun <= d[i] else float(grid[i])
