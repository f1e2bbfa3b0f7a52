"""Shared domain types: references, augmented state/input, quadratic costs and
known constraints.

Every callable that has to enter an optimisation problem is a CasADi
``Function`` so the same object serves numeric evaluation and symbolic
transcription.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import casadi as ca
import numpy as np


class ConfigurationError(ValueError):
    """Inconsistent dimensions or options."""


class SynthesisError(RuntimeError):
    """Offline terminal-ingredient synthesis failed."""


class IntegrationError(RuntimeError):
    """Non-finite state encountered while integrating a model."""


class PropertyFailure(AssertionError):
    """A runtime-verified property (monotonicity, recursive feasibility...) failed."""


def _as_vec(v, n: Optional[int] = None, what: str = "vector") -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if n is not None and arr.size != n:
        raise ConfigurationError(f"{what}: expected dimension {n}, got {arr.size}")
    return arr


def is_spd(m: np.ndarray, tol: float = 0.0) -> bool:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
        return False
    return bool(np.linalg.eigvalsh(m)[0] > tol)


@dataclass(frozen=True, eq=False)
class ReferenceTrajectory:
    """Parametrised reference ``tau -> (r_x(tau), r_u(tau))``.

    ``state_fn``/``input_fn`` are CasADi functions of the scalar ``tau``.  They
    already implement the terminal hold: beyond ``domain[1]`` the final state
    is frozen and the input is the model's rest input for that state.
    ``position_fn`` maps ``tau`` to the tracked position (used for the initial
    ``tau`` projection).
    """

    state_fn: ca.Function
    input_fn: ca.Function
    domain: tuple[float, float]
    position_fn: Optional[ca.Function] = None
    position_index: tuple[int, ...] = ()
    name: str = ""
    params: dict = field(default_factory=dict, compare=False)

    @property
    def n_x(self) -> int:
        return self.state_fn.size1_out(0)

    @property
    def n_u(self) -> int:
        return self.input_fn.size1_out(0)

    def state(self, tau: float) -> np.ndarray:
        return np.asarray(self.state_fn(float(tau))).ravel()

    def input(self, tau: float) -> np.ndarray:
        return np.asarray(self.input_fn(float(tau))).ravel()

    def position(self, tau: float) -> np.ndarray:
        if self.position_fn is not None:
            return np.asarray(self.position_fn(float(tau))).ravel()
        return self.state(tau)[list(self.position_index)]

    def consistency_residual(self, step: Callable, taus: Sequence[float], t_s: float) -> np.ndarray:
        """Scaled one-step residual ``|r_x(t+t_s) - f(r_x(t), r_u(t))| / (1 + |r_x|)``
        for a discrete map ``step(x, u)``."""
        out = []
        for tau in taus:
            xr = self.state(tau)
            nxt = np.asarray(step(xr, self.input(tau))).ravel()
            tgt = self.state(tau + t_s)
            out.append(np.max(np.abs(nxt - tgt) / (1.0 + np.abs(tgt))))
        return np.asarray(out)


@dataclass(frozen=True, eq=False)
class AugmentedState:
    x: np.ndarray
    tau: float
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", _as_vec(self.x, what="state"))
        if not np.isfinite(self.tau):
            raise ConfigurationError("fictitious time must be finite")


@dataclass(frozen=True, eq=False)
class AugmentedInput:
    u: np.ndarray
    v: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "u", _as_vec(self.u, what="input"))
        if not (np.all(np.isfinite(self.u)) and np.isfinite(self.v)):
            raise ConfigurationError("augmented input must be finite")


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Quadratic tracking cost ``[dx; du]' W [dx; du] + w v^2`` and terminal ``dx' P dx``."""

    W: np.ndarray
    P: np.ndarray
    w: float = 0.0

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if not is_spd(W):
            raise ConfigurationError("stage weight W must be symmetric positive definite")
        if not is_spd(P):
            raise ConfigurationError("terminal weight P must be symmetric positive definite")
        if self.w < 0:
            raise ConfigurationError("v-penalty w must be non-negative")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "P", P)

    @classmethod
    def from_diagonals(cls, q, r, w: float, p=None) -> "CostSpec":
        q = np.asarray(q, dtype=float)
        r = np.asarray(r, dtype=float)
        W = np.diag(np.concatenate([q, r]))
        P = np.diag(q) if p is None else np.atleast_2d(np.asarray(p, dtype=float))
        return cls(W=W, P=P, w=float(w))

    @property
    def n_x(self) -> int:
        return self.P.shape[0]

    @property
    def n_u(self) -> int:
        return self.W.shape[0] - self.P.shape[0]

    @property
    def Wxx(self) -> np.ndarray:
        return self.W[: self.n_x, : self.n_x]

    def stage(self, x, u, tau, v, ref: ReferenceTrajectory):
        """Symbolic-or-numeric stage cost (no dimension checks)."""
        d = ca.vertcat(x - ref.state_fn(tau), u - ref.input_fn(tau))
        return ca.bilin(ca.DM(self.W), d, d) + self.w * v**2

    def terminal(self, x, tau, ref: ReferenceTrajectory):
        d = x - ref.state_fn(tau)
        return ca.bilin(ca.DM(self.P), d, d)


def _check_dims(cost: CostSpec, ref: ReferenceTrajectory, x=None, u=None):
    if ref.n_x != cost.n_x or ref.n_u != cost.n_u:
        raise ConfigurationError(
            f"cost is for n_x={cost.n_x}, n_u={cost.n_u}; reference has n_x={ref.n_x}, n_u={ref.n_u}"
        )
    if x is not None and x.size != cost.n_x:
        raise ConfigurationError(f"state has dimension {x.size}, expected {cost.n_x}")
    if u is not None and u.size != cost.n_u:
        raise ConfigurationError(f"input has dimension {u.size}, expected {cost.n_u}")


def eval_stage_cost(state: AugmentedState, inp: AugmentedInput, ref: ReferenceTrajectory, cost: CostSpec) -> float:
    _check_dims(cost, ref, state.x, inp.u)
    return float(cost.stage(state.x, inp.u, state.tau, inp.v, ref))


def eval_terminal_cost(state: AugmentedState, ref: ReferenceTrajectory, cost: CostSpec) -> float:
    _check_dims(cost, ref, state.x)
    return float(cost.terminal(state.x, state.tau, ref))


def advance_fictitious_time(tau: float, v: float, t_s: float) -> float:
    """Relaxed reference clock: ``tau + t_s + v`` (``v = 0`` is the natural clock)."""
    return tau + t_s + v


@dataclass(frozen=True, eq=False)
class KnownConstraintSet:
    """Known constraints ``h(x, u) <= 0``.

    Box bounds are kept explicit so the transcription can pass them as
    variable bounds; ``extra`` is an optional CasADi function ``(x, u) -> h``.
    """

    state_lb: np.ndarray
    state_ub: np.ndarray
    input_lb: np.ndarray
    input_ub: np.ndarray
    extra: Optional[ca.Function] = None

    def __post_init__(self):
        for name in ("state_lb", "state_ub", "input_lb", "input_ub"):
            object.__setattr__(self, name, _as_vec(getattr(self, name), what=name))
        if self.state_lb.size != self.state_ub.size or self.input_lb.size != self.input_ub.size:
            raise ConfigurationError("bound vectors must match in size")

    @property
    def n_h(self) -> int:
        n = 2 * (self.state_lb.size + self.input_lb.size)
        if self.extra is not None:
            n += self.extra.size1_out(0)
        return n

    def h(self, x, u, n: int = 0):
        """Residual vector, ``<= 0`` when satisfied.  Infinite bounds give ``-inf`` rows."""
        x = _as_vec(x, self.state_lb.size, "state")
        u = _as_vec(u, self.input_lb.size, "input")
        with np.errstate(invalid="ignore"):
            rows = [self.state_lb - x, x - self.state_ub, self.input_lb - u, u - self.input_ub]
        if self.extra is not None:
            rows.append(np.asarray(self.extra(x, u)).ravel())
        return np.concatenate(rows)

    def max_violation(self, x, u) -> float:
        h = self.h(x, u)
        h = h[np.isfinite(h)]
        return float(h.max()) if h.size else -np.inf
