"""Constraints that are only known online, evaluated worst-case over
outer-approximated reachable sets of an uncertainty state ``w``.

Two instances are provided:

* ``drifting-disc``: a round obstacle of radius ``body_radius`` whose centre
  ``w`` moves by a nominal drift plus bounded noise.  The reachable set of
  ``w`` after ``j`` steps is the disc of radius ``j * growth`` around the
  propagated nominal centre, so the keep-out region is a disc of radius
  ``body_radius + j * growth``.
* ``static``: a half-line ``x[i] <= c`` with no uncertainty.

Both carry an activation window in closed-loop time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import casadi as ca
import numpy as np

from .core import ConfigurationError, PropertyFailure

INACTIVE = -1.0  # value an inactive constraint row takes inside the NLP


class RangeError(IndexError):
    """Prediction step outside the stored tube."""


@dataclass(frozen=True, eq=False)
class UncertaintySet:
    """Disc-shaped keep-out region valid for prediction step ``n`` given data at ``k``.

    ``radius`` is the radius of the whole region to avoid (obstacle body plus
    reachable displacement of its centre).
    """

    center: np.ndarray
    radius: float
    n: int
    k: int
    kind: str = "disc"

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, float)))
        if self.radius < 0:
            raise ConfigurationError("radius must be non-negative")

    def contains(self, w, tol: float = 0.0) -> bool:
        return bool(np.linalg.norm(np.asarray(w, float) - self.center) <= self.radius + tol)


@dataclass(frozen=True, eq=False)
class UncertaintyModel:
    """``w+ = w + drift + xi``, ``|xi| <= xi_bound``; tube radius grows by ``growth`` per step."""

    drift: np.ndarray
    xi_bound: float
    growth: float
    r0: float

    def __post_init__(self):
        object.__setattr__(self, "drift", np.asarray(self.drift, float))
        if self.xi_bound < 0 or self.growth < 0 or self.r0 < 0:
            raise ConfigurationError("uncertainty bounds must be non-negative")

    def omega(self, w, xi, x=None, u=None) -> np.ndarray:
        """One step of the uncertainty dynamics (``x``, ``u`` accepted but unused)."""
        return np.asarray(w, float) + self.drift + np.asarray(xi, float)

    @property
    def sound(self) -> bool:
        """Whether the linear radius growth covers the per-step noise."""
        return self.growth >= self.xi_bound

    def sample_xi(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform sample in the ``xi_bound`` disc."""
        r = self.xi_bound * np.sqrt(rng.uniform())
        a = rng.uniform(0.0, 2 * np.pi)
        return r * np.array([np.cos(a), np.sin(a)])


def robot_uncertainty(t_s: float, speed: float = 0.3, heading: float = np.pi / 4,
                      xi_bound: float = 0.03, growth: float = 0.03, r0: float = 0.03) -> UncertaintyModel:
    drift = speed * t_s * np.array([np.cos(heading), np.sin(heading)])
    return UncertaintyModel(drift, xi_bound, growth, r0)


def propagate_tube(model: UncertaintyModel, w0, horizon: int, k: int = 0) -> list[UncertaintySet]:
    """Nominal-centre propagation with linearly growing radius, steps ``k..k+horizon``."""
    if horizon < 0:
        raise ConfigurationError("horizon must be non-negative")
    w0 = np.asarray(w0, float)
    return [
        UncertaintySet(w0 + j * model.drift, model.r0 + j * model.growth, k + j, k)
        for j in range(horizon + 1)
    ]


# -- constraints ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RobustConstraint:
    """Worst case of ``gamma`` over a tube.

    ``kind == "disc"``: ``gamma(x, w) = body_radius^2 - |x[pos] - w|^2`` with
    ``w`` ranging over the disc of radius ``radius - body_radius``.
    ``kind == "halfline"``: ``gamma(x) = x[pos[0]] - center`` (no uncertainty).
    ``safe_exempt`` marks constraints that are waived at a node lying in the
    safe set (the obstacle is assumed not to hit a system at rest).
    """

    kind: str
    tube: Sequence[UncertaintySet]
    position_index: tuple[int, ...]
    body_radius: float = 0.0
    active: bool = True
    safe_exempt: bool = False

    def __post_init__(self):
        if self.kind not in ("disc", "halfline"):
            raise ConfigurationError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "disc" and any(s.radius < self.body_radius for s in self.tube):
            raise ConfigurationError("tube radius smaller than the obstacle body")

    @property
    def k(self) -> int:
        return self.tube[0].k

    def set_at(self, n: int) -> UncertaintySet:
        j = n - self.k
        if not 0 <= j < len(self.tube):
            raise RangeError(f"step {n} outside tube [{self.k}, {self.k + len(self.tube) - 1}]")
        return self.tube[j]

    def value(self, x, u=None, n: Optional[int] = None) -> float:
        """Exact worst case; ``<= 0`` means robustly satisfied."""
        if not self.active:
            return -np.inf
        s = self.set_at(self.k if n is None else n)
        pos = np.asarray(x, float)[list(self.position_index)]
        if self.kind == "halfline":
            return float(pos[0] - s.center[0])
        rho = s.radius - self.body_radius
        d = float(np.linalg.norm(pos - s.center))
        return self.body_radius**2 - max(0.0, d - rho) ** 2

    def smooth_value(self, x, n: Optional[int] = None) -> float:
        """The smooth surrogate used inside the NLP (same zero sublevel set)."""
        if not self.active:
            return INACTIVE
        return float(node_constraint_expr(self.kind, np.asarray(x, float), self.node_params(n), self.position_index))

    def node_params(self, n: Optional[int] = None) -> np.ndarray:
        """Per-node parameter vector ``(active, center..., radius)``."""
        if not self.active:
            return np.zeros(n_node_params(self.kind))
        s = self.set_at(self.k if n is None else n)
        if self.kind == "halfline":
            return np.array([1.0, s.center[0]])
        return np.array([1.0, s.center[0], s.center[1], s.radius])


def n_node_params(kind: str) -> int:
    return {"halfline": 2, "disc": 4}[kind]


def node_constraint_expr(kind: str, x, prm, position_index):
    """Smooth constraint row, symbolic or numeric.

    Disc: ``a (R^2 - |pos - c|^2) + (1 - a) * INACTIVE``; half-line analogous.
    """
    a = prm[0]
    if kind == "halfline":
        g = x[position_index[0]] - prm[1]
    else:
        dx = x[position_index[0]] - prm[1]
        dy = x[position_index[1]] - prm[2]
        g = prm[3] ** 2 - dx**2 - dy**2
    return a * g + (1 - a) * INACTIVE


def eval_robust_constraint(rc: RobustConstraint, x, u, n: int, k: Optional[int] = None) -> np.ndarray:
    if k is not None and k != rc.k:
        raise RangeError(f"constraint built at k={rc.k}, queried for k={k}")
    return np.array([rc.value(x, u, n)])


@dataclass
class MonotonicityReport:
    n_checked: int = 0
    max_increase: float = -np.inf
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_monotonicity(rc_k: RobustConstraint, rc_k1: RobustConstraint, samples, tol: float = 1e-9,
                       raise_on_failure: bool = False) -> MonotonicityReport:
    """Check ``g_{n|k+1}(x) <= g_{n|k}(x) + tol`` on ``samples`` of ``(x, u, n)``.

    Steps ``n`` outside either tube are skipped.
    """
    rep = MonotonicityReport()
    lo = max(rc_k.k, rc_k1.k)
    hi = min(rc_k.k + len(rc_k.tube), rc_k1.k + len(rc_k1.tube)) - 1
    for i, (x, u, n) in enumerate(samples):
        if not lo <= n <= hi:
            continue
        a, b = rc_k.value(x, u, n), rc_k1.value(x, u, n)
        inc = b - a if np.isfinite(a) or np.isfinite(b) else 0.0
        if np.isnan(inc):
            inc = 0.0
        rep.n_checked += 1
        rep.max_increase = max(rep.max_increase, inc)
        if inc > tol:
            rep.failures.append((int(n), i, float(inc)))
    if raise_on_failure and rep.failures:
        n, i, inc = rep.failures[0]
        raise PropertyFailure(f"monotonicity violated at n={n}, sample {i}: increase {inc:.3e}")
    return rep


# -- scenario-level obstacle description --------------------------------------------


@dataclass(frozen=True)
class ObstacleSpec:
    """Config-level obstacle: ``static`` half-line or ``drifting-disc``.

    ``window`` is the closed-loop time interval in which the obstacle exists
    and is measured.
    """

    kind: str
    position_index: tuple[int, ...]
    window: tuple[float, float] = (0.0, np.inf)
    bound: float = 0.0
    w0: tuple[float, ...] = (0.0, 0.0)
    speed: float = 0.0
    heading: float = 0.0
    xi_bound: float = 0.0
    growth: float = 0.0
    body_radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("static", "drifting-disc"):
            raise ConfigurationError(f"obstacle kind must be 'static' or 'drifting-disc', got {self.kind!r}")

    @property
    def constraint_kind(self) -> str:
        return "halfline" if self.kind == "static" else "disc"

    def model(self, t_s: float) -> UncertaintyModel:
        return robot_uncertainty(t_s, self.speed, self.heading, self.xi_bound, self.growth, self.body_radius)

    def is_active(self, t: float) -> bool:
        return self.window[0] - 1e-12 <= t <= self.window[1] + 1e-12

    def measured(self, k: int, w_k, horizon: int, t_s: float) -> RobustConstraint:
        """Constraint built from the measurement ``w_k`` at step ``k``."""
        active = self.is_active(k * t_s)
        if self.kind == "static":
            tube = [UncertaintySet([self.bound], 0.0, k + j, k) for j in range(horizon + 1)]
            return RobustConstraint("halfline", tube, self.position_index, 0.0, active, False)
        tube = propagate_tube(self.model(t_s), w_k, horizon, k)
        return RobustConstraint("disc", tube, self.position_index, self.body_radius, active, True)

    def true_value(self, x, w_true, t: float) -> float:
        """Constraint value against the realised obstacle (no tube)."""
        if not self.is_active(t):
            return -np.inf
        pos = np.asarray(x, float)[list(self.position_index)]
        if self.kind == "static":
            return float(pos[0] - self.bound)
        return float(self.body_radius**2 - np.sum((pos - np.asarray(w_true, float)) ** 2))


class ObstacleRealisation:
    """Seeded realisation of the obstacle centre trajectory ``w_0, w_1, ...``."""

    def __init__(self, spec: ObstacleSpec, t_s: float, seed: int):
        self.spec = spec
        self.t_s = t_s
        self.rng = np.random.default_rng(seed)
        self.w = [np.asarray(spec.w0, float)]
        self._model = spec.model(t_s) if spec.kind == "drifting-disc" else None

    def at(self, k: int) -> np.ndarray:
        while len(self.w) <= k:
            if self._model is None:
                self.w.append(self.w[-1].copy())
            else:
                self.w.append(self._model.omega(self.w[-1], self._model.sample_xi(self.rng)))
        return self.w[k]
