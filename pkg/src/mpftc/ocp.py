"""Direct multiple-shooting transcription of the tracking problem with a
fictitious reference clock.

Decision variables per node ``n = 0..H``: state ``x_n`` and clock ``tau_n``;
per interval ``n = 0..H-1``: input ``u_n``, clock rate ``v_n`` and, in
exact-penalty mode, one slack per unknown constraint.  ``H = M`` with a safe
tail, else ``H = N``.  ``x_0`` and ``tau_0`` are pinned through their bounds
so one NLP instance serves every closed-loop step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import casadi as ca
import numpy as np

from .core import ConfigurationError, CostSpec, ReferenceTrajectory
from .models import PlantModel, rk4_expr
from .references import project_onto_reference
from .solver import NlpProblem, NlpSolver, SolveReport, SolverOptions
from .terminal import TerminalSpec, terminal_block_constraints
from .uncertainty import INACTIVE, RobustConstraint, n_node_params, node_constraint_expr

MODES = ("mpftc", "mpc", "mpftc-safe")


@dataclass(frozen=True)
class ObstacleSlot:
    """Layout of one unknown-constraint row attached to every node."""

    kind: str
    position_index: tuple[int, ...]
    safe_exempt: bool = False


@dataclass(frozen=True, eq=False)
class OcpSpec:
    model: PlantModel
    ref: ReferenceTrajectory
    cost: CostSpec
    N: int
    t_s: float
    mode: str = "mpftc"
    M: Optional[int] = None
    terminal: Optional[TerminalSpec] = None
    obstacles: tuple[ObstacleSlot, ...] = ()
    penalty: Optional[float] = None
    v_bound: Optional[float] = None  # defaults to t_s; use np.inf to disable
    tail_weight: float = 1e-6
    substeps: int = 1
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.N < 1:
            raise ConfigurationError("N must be at least 1")
        if self.t_s <= 0:
            raise ConfigurationError("t_s must be positive")
        if self.cost.n_x != self.model.n_x or self.cost.n_u != self.model.n_u:
            raise ConfigurationError("cost dimensions do not match the model")
        if self.ref.n_x != self.model.n_x or self.ref.n_u != self.model.n_u:
            raise ConfigurationError("reference dimensions do not match the model")
        if self.safe:
            if self.terminal is None or self.terminal.safe is None:
                raise ConfigurationError("safe mode needs a terminal spec with a safe set")
            if self.terminal.N != self.N or self.terminal.M != self.horizon:
                raise ConfigurationError("terminal spec horizons disagree with N/M")
        if self.penalty is not None and self.penalty <= 0:
            raise ConfigurationError("penalty weight must be positive")

    @property
    def safe(self) -> bool:
        return self.mode == "mpftc-safe"

    @property
    def horizon(self) -> int:
        if self.safe:
            M = self.M if self.M is not None else self.N
            if M < self.N:
                raise ConfigurationError(f"M={M} must not be smaller than N={self.N}")
            return M
        return self.N

    @property
    def vb(self) -> float:
        return self.t_s if self.v_bound is None else float(self.v_bound)


@dataclass(frozen=True, eq=False)
class OcpSolution:
    X: np.ndarray  # (H+1, n_x)
    T: np.ndarray  # (H+1,)
    U: np.ndarray  # (H, n_u)
    V: np.ndarray  # (H,)
    S: np.ndarray  # (H, n_obs) slacks (empty without penalty)
    objective: float
    status: str
    violation: float
    report: Optional[SolveReport] = None
    z: Optional[np.ndarray] = None

    @property
    def u0(self) -> np.ndarray:
        return self.U[0]

    @property
    def v0(self) -> float:
        return float(self.V[0])


class TranscribedNlp:
    """The NLP of one ``OcpSpec`` plus packing helpers and a cached solver."""

    def __init__(self, spec: OcpSpec):
        self.spec = spec
        m = spec.model
        H, N = spec.horizon, spec.N
        nx, nu = m.n_x, m.n_u
        n_obs = len(spec.obstacles)
        ns = n_obs if spec.penalty is not None else 0
        self.H, self.nx, self.nu, self.n_obs, self.ns = H, nx, nu, n_obs, ns
        xs = np.asarray(m.state_scale, float)
        us = np.asarray(m.input_scale, float)
        self.x_scale, self.u_scale = xs, us

        # layout: [x_0 tau_0 | u_0 v_0 s_0 | x_1 tau_1 | ... | x_H tau_H]
        node_w, int_w = nx + 1, nu + 1 + ns
        self.ix = np.array([[n * (node_w + int_w) + i for i in range(nx)] for n in range(H + 1)])
        self.it = np.array([n * (node_w + int_w) + nx for n in range(H + 1)])
        base = lambda n: n * (node_w + int_w) + node_w
        self.iu = np.array([[base(n) + i for i in range(nu)] for n in range(H)]).reshape(H, nu)
        self.iv = np.array([base(n) + nu for n in range(H)])
        self.islack = np.array([[base(n) + nu + 1 + j for j in range(ns)] for n in range(H)]).reshape(H, ns)
        nz = (H + 1) * node_w + H * int_w
        self.nz = nz

        z = ca.SX.sym("z", nz)
        scale = np.ones(nz)
        scale[self.ix.ravel()] = np.tile(xs, H + 1)
        scale[self.iu.ravel()] = np.tile(us, H)
        self.scale = scale
        w = z * ca.DM(scale)  # unscaled values
        X = [w[self.ix[n]] for n in range(H + 1)]
        T = [w[self.it[n]] for n in range(H + 1)]
        U = [w[self.iu[n]] for n in range(H)]
        V = [w[self.iv[n]] for n in range(H)]
        Sl = [w[self.islack[n]] for n in range(H)] if ns else []

        n_prm_node = sum(n_node_params(o.kind) for o in spec.obstacles)
        p = ca.SX.sym("p", (H + 1) * n_prm_node)
        self.n_prm_node = n_prm_node

        F = m.discrete(spec.t_s) if spec.substeps == 1 else self._rk4_fn(spec.substeps)
        cost, ref = spec.cost, spec.ref

        f = 0
        for n in range(H):
            wgt = 1.0 if n < N else spec.tail_weight
            f += wgt * cost.stage(X[n], U[n], T[n], V[n], ref)
        f += cost.terminal(X[N], T[N], ref)
        if ns:
            f += spec.penalty * ca.sum1(ca.vertcat(*Sl))

        g, lbg, ubg = [], [], []
        self.row_groups: dict[str, list[int]] = {}

        def add(name, expr, lo, hi):
            expr = ca.vec(expr)
            k0 = sum(e.numel() for e in g)
            g.append(expr)
            lbg.extend(np.broadcast_to(lo, (expr.numel(),)).tolist())
            ubg.extend(np.broadcast_to(hi, (expr.numel(),)).tolist())
            self.row_groups.setdefault(name, []).extend(range(k0, k0 + expr.numel()))

        for n in range(H):
            add("dynamics", (X[n + 1] - F(X[n], U[n])) / ca.DM(xs), 0.0, 0.0)
            add("clock", T[n + 1] - T[n] - spec.t_s - V[n], 0.0, 0.0)

        # unknown constraints on nodes 1..H (exempt rows skip the safe node)
        for n in range(1, H + 1):
            off = n * n_prm_node
            for j, slot in enumerate(spec.obstacles):
                k = n_node_params(slot.kind)
                prm = p[off: off + k]
                off += k
                if spec.safe and slot.safe_exempt and n == H:
                    continue
                expr = node_constraint_expr(slot.kind, X[n], prm, slot.position_index)
                if ns and n - 1 < H:
                    expr = expr - Sl[n - 1][j]
                add("unknown", expr, -np.inf, 0.0)

        # terminal block
        if spec.terminal is not None:
            for node in terminal_block_constraints(spec.terminal):
                dx = X[node.offset] - ref.state_fn(T[node.offset])
                e, lo, hi = spec.terminal.stabilizing.residual(dx)
                if spec.terminal.stabilizing.kind == "ellipsoid":
                    e = e / spec.terminal.stabilizing.gamma
                    lo = np.asarray(lo) / spec.terminal.stabilizing.gamma
                    hi = np.asarray(hi) / spec.terminal.stabilizing.gamma
                add("stabilizing", e, lo, hi)
                if "safe" in node.rows:
                    e, lo, hi = spec.terminal.safe.residual(X[node.offset])
                    add("safe", e, lo, hi)

        self.g_expr = ca.vertcat(*g) if g else ca.SX(0, 1)
        lbz, ubz = self._variable_bounds()
        self.problem = NlpProblem(z, f, self.g_expr, lbz, ubz, lbg, ubg, np.zeros(nz), p, np.zeros(p.numel()))
        self._solver: Optional[NlpSolver] = None
        self.last_multipliers = None

    # -- construction helpers ----------------------------------------------------

    def _rk4_fn(self, substeps):
        m = self.spec.model
        x = ca.SX.sym("x", m.n_x)
        u = ca.SX.sym("u", m.n_u)
        return ca.Function("rk4_sub", [x, u], [rk4_expr(m.ode, x, u, self.spec.t_s, substeps)])

    def _variable_bounds(self):
        spec, m = self.spec, self.spec.model
        lb = np.full(self.nz, -np.inf)
        ub = np.full(self.nz, np.inf)
        for n in range(1, self.H + 1):
            lb[self.ix[n]] = m.known.state_lb / self.x_scale
            ub[self.ix[n]] = m.known.state_ub / self.x_scale
        for n in range(self.H):
            lb[self.iu[n]] = m.known.input_lb / self.u_scale
            ub[self.iu[n]] = m.known.input_ub / self.u_scale
            vb = 0.0 if spec.mode == "mpc" else spec.vb
            lb[self.iv[n]], ub[self.iv[n]] = -vb, vb
            if self.ns:
                lb[self.islack[n]] = 0.0
        return lb, ub

    def pinned_bounds(self, x_k, tau_k):
        lb, ub = self.problem.lbx.copy(), self.problem.ubx.copy()
        lb[self.ix[0]] = ub[self.ix[0]] = np.asarray(x_k, float) / self.x_scale
        lb[self.it[0]] = ub[self.it[0]] = float(tau_k)
        return lb, ub

    def params(self, constraints: Sequence[Optional[RobustConstraint]] = (), k: int = 0) -> np.ndarray:
        """Node parameters for the unknown constraints measured at step ``k``."""
        if len(constraints) != self.n_obs:
            raise ConfigurationError(f"expected {self.n_obs} unknown constraints, got {len(constraints)}")
        out = np.zeros((self.H + 1, self.n_prm_node))
        for n in range(self.H + 1):
            row = []
            for slot, rc in zip(self.spec.obstacles, constraints):
                if rc is None or not rc.active:
                    row.append(np.zeros(n_node_params(slot.kind)))
                else:
                    row.append(rc.node_params(k + n))
            out[n] = np.concatenate(row) if row else []
        return out.ravel()

    # -- packing ---------------------------------------------------------------

    def pack(self, X, T, U, V, S=None) -> np.ndarray:
        z = np.zeros(self.nz)
        z[self.ix] = np.asarray(X, float) / self.x_scale
        z[self.it] = np.asarray(T, float)
        z[self.iu] = np.asarray(U, float).reshape(self.H, self.nu) / self.u_scale
        z[self.iv] = np.asarray(V, float)
        if self.ns and S is not None:
            z[self.islack] = np.asarray(S, float).reshape(self.H, self.ns)
        return z

    def unpack(self, z):
        z = np.asarray(z, float)
        X = z[self.ix] * self.x_scale
        U = z[self.iu] * self.u_scale
        S = z[self.islack] if self.ns else np.zeros((self.H, 0))
        return X, z[self.it].copy(), U, z[self.iv].copy(), S

    # -- evaluation ------------------------------------------------------------

    def violation(self, z, x_k, tau_k, p) -> float:
        lb, ub = self.pinned_bounds(x_k, tau_k)
        saved = self.problem.lbx, self.problem.ubx
        self.problem.lbx, self.problem.ubx = lb, ub
        try:
            return self.problem.violation(z, p)
        finally:
            self.problem.lbx, self.problem.ubx = saved

    def objective(self, z, p) -> float:
        return self.problem.objective(z, p)

    def fill_slacks(self, z, p) -> np.ndarray:
        """Set slacks to the smallest feasible value for the given trajectory."""
        if not self.ns:
            return z
        z = np.array(z, float)
        z[self.islack] = 0.0
        g = self.problem.constraints(z, p)
        rows = self.row_groups.get("unknown", [])
        vals = np.maximum(g[rows], 0.0)
        # rows are ordered node-major then obstacle
        z[self.islack[: len(vals) // self.ns]] = vals.reshape(-1, self.ns)
        return z

    @property
    def solver(self) -> NlpSolver:
        if self._solver is None:
            self._solver = NlpSolver(self.problem, self.spec.solver)
        return self._solver

    def solve(self, x_k, tau_k, constraints=(), guess=None, k: int = 0, lam=None) -> OcpSolution:
        p = self.params(constraints, k)
        lb, ub = self.pinned_bounds(x_k, tau_k)
        z0 = self.cold_start(x_k, tau_k) if guess is None else np.asarray(guess, float).copy()
        z0[self.ix[0]] = np.asarray(x_k, float) / self.x_scale
        z0[self.it[0]] = tau_k
        z0 = np.clip(z0, lb, ub)
        z0 = self.fill_slacks(z0, p)
        lam_g0, lam_x0 = (None, None) if lam is None else lam
        z, rep, lam_g, lam_x = self.solver.solve(z0, p, lb, ub, lam_g0, lam_x0)
        self.last_multipliers = (lam_g, lam_x)
        obj, viol = rep.objective, rep.violation
        if self.ns and np.all(np.isfinite(z)):
            # interior-point bound relaxation leaves slacks at about -1e-9; with a
            # large penalty weight that would shift the reported objective
            z = z.copy()
            z[self.islack] = np.maximum(z[self.islack], 0.0)
            obj, viol = self.objective(z, p), self.violation(z, x_k, tau_k, p)
        X, T, U, V, S = self.unpack(z)
        return OcpSolution(X, T, U, V, S, obj, rep.status, viol, rep, z)

    def cold_start(self, x_k, tau_k) -> np.ndarray:
        """Reference-based guess ``x_n = r_x(tau_k + n t_s)`` (``x_0 = x_k``)."""
        ref, t_s = self.spec.ref, self.spec.t_s
        T = tau_k + t_s * np.arange(self.H + 1)
        X = np.array([ref.state(t) for t in T])
        X[0] = x_k
        U = np.array([ref.input(t) for t in T[:-1]]).reshape(self.H, self.nu)
        lbu, ubu = self.spec.model.known.input_lb, self.spec.model.known.input_ub
        U = np.clip(U, lbu, ubu)
        return self.pack(X, T, U, np.zeros(self.H))

    def solution_from(self, z, x_k, tau_k, constraints=(), k: int = 0, status: str = "certificate") -> OcpSolution:
        p = self.params(constraints, k)
        z = self.fill_slacks(np.asarray(z, float), p)
        X, T, U, V, S = self.unpack(z)
        return OcpSolution(X, T, U, V, S, self.objective(z, p), status, self.violation(z, x_k, tau_k, p), None, z)


def transcribe(spec: OcpSpec, x_k=None, tau_k: float = 0.0) -> TranscribedNlp:
    """Build the NLP; with ``x_k`` given the initial guess is the reference cold start."""
    nlp = TranscribedNlp(spec)
    if x_k is not None:
        if np.asarray(x_k).size != spec.model.n_x:
            raise ConfigurationError("initial state has the wrong dimension")
        nlp.problem.x0 = nlp.cold_start(x_k, tau_k)
        lb, ub = nlp.pinned_bounds(x_k, tau_k)
        nlp.problem.lbx, nlp.problem.ubx = lb, ub
    return nlp


def initial_tau_projection(x0, ref: ReferenceTrajectory, n_grid: int = 4001) -> float:
    pos = np.asarray(x0, float)[list(ref.position_index)]
    return project_onto_reference(pos, ref, n_grid)


def default_terminal_control(spec: OcpSpec) -> Callable:
    """Appended action for the shifted sequence.

    Safe mode: stay at rest (model rest input) with the clock frozen.
    Otherwise: reference input with the natural clock.
    """
    m = spec.model
    if spec.safe:
        return lambda x, tau: (np.asarray(m.rest_input(x)).ravel(), -spec.t_s)
    return lambda x, tau: (spec.ref.input(tau), 0.0)


def shift_warmstart(nlp: TranscribedNlp, prev: Optional[OcpSolution], x_next, tau_next,
                    terminal_ctrl: Optional[Callable] = None) -> np.ndarray:
    """Shift ``prev`` by one step and append the terminal action.

    The first node is replaced by the measured ``(x_next, tau_next)``; with
    no model mismatch this is exactly the old second node, so the result is
    the standard feasibility certificate.  Without ``prev`` the reference
    cold start is returned.
    """
    if prev is None:
        return nlp.cold_start(x_next, tau_next)
    spec = nlp.spec
    ctrl = terminal_ctrl or default_terminal_control(spec)
    X, T, U, V = prev.X, prev.T, prev.U, prev.V
    u_new, v_new = ctrl(X[-1], T[-1])
    F = spec.model.discrete(spec.t_s)
    x_new = np.asarray(F(X[-1], u_new)).ravel()
    Xs = np.vstack([X[1:], x_new])
    Ts = np.append(T[1:], T[-1] + spec.t_s + v_new)
    Us = np.vstack([U[1:], np.asarray(u_new, float).reshape(1, -1)])
    Vs = np.append(V[1:], v_new)
    Xs[0] = x_next
    Ts[0] = tau_next
    return nlp.pack(Xs, Ts, Us, Vs)
