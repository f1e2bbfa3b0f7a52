"""Terminal ingredients: LQR gains, Lyapunov terminal weights, ellipsoidal
levels by the S-procedure, safe/stabilising set residuals, explicit slices
for the double integrator and a terminal control program.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import casadi as ca
import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .core import ConfigurationError, PropertyFailure, SynthesisError
from .models import RobotParams, robot_coriolis, robot_gravity, robot_inertia

SCHEMA_VERSION = 1


# -- linear-quadratic building blocks ----------------------------------------------


def lqr_gain(A, B, Q, R, discrete: bool = False, return_cost: bool = False):
    """``K`` minimising the infinite-horizon quadratic cost; ``u = -K x``.

    Continuous: ``K = R^-1 B' X`` with ``X`` from the CARE.
    Discrete:   ``K = (R + B' X B)^-1 B' X A`` with ``X`` from the DARE.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise SynthesisError("R must be positive definite")
    try:
        if discrete:
            X = sla.solve_discrete_are(A, B, Q, R)
            K = np.linalg.solve(R + B.T @ X @ B, B.T @ X @ A)
        else:
            X = sla.solve_continuous_are(A, B, Q, R)
            K = np.linalg.solve(R, B.T @ X)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SynthesisError(f"Riccati equation has no stabilising solution: {exc}") from exc
    if not np.all(np.isfinite(X)):
        raise SynthesisError("Riccati solution is not finite")
    return (K, 0.5 * (X + X.T)) if return_cost else K


def terminal_cost_lyapunov(A_cl, Q, R, K) -> np.ndarray:
    """``P = A_cl' P A_cl + Q + K' R K`` for a Schur-stable ``A_cl``."""
    A_cl = np.atleast_2d(np.asarray(A_cl, float))
    rho = max(abs(np.linalg.eigvals(A_cl)))
    if rho >= 1.0:
        raise SynthesisError(f"closed loop not Schur stable (spectral radius {rho:.6g})")
    K = np.atleast_2d(np.asarray(K, float))
    Qt = np.atleast_2d(np.asarray(Q, float)) + K.T @ np.atleast_2d(np.asarray(R, float)) @ K
    P = sla.solve_discrete_lyapunov(A_cl.T, Qt)
    P = 0.5 * (P + P.T)
    res = np.abs(A_cl.T @ P @ A_cl + Qt - P).max()
    if res > 1e-8 * max(1.0, np.abs(P).max()):
        raise SynthesisError(f"Lyapunov residual {res:.3e} too large")
    return P


def double_integrator_blocks(dof: int = 1):
    """Continuous ``(A, B)`` of ``dof`` decoupled double integrators, ordered positions first."""
    A = np.kron(np.array([[0.0, 1.0], [0.0, 0.0]]), np.eye(dof))
    B = np.kron(np.array([[0.0], [1.0]]), np.eye(dof))
    return A, B


def zoh(A, B, t_s: float):
    n, m = B.shape
    M = sla.expm(np.block([[A, B], [np.zeros((m, n + m))]]) * t_s)
    return M[:n, :n], M[:n, n:]


def closed_loop_discretisation(A, B, K, t_s: float, scheme: str = "closed-loop-exact") -> np.ndarray:
    """Discrete closed-loop matrix used in the Lyapunov equation.

    ``closed-loop-exact``: ``expm((A - B K) t_s)``;
    ``zoh``: ZOH of ``(A, B)`` closed with ``K``; ``euler``: ``I + t_s (A - B K)``.
    """
    A_cl = A - B @ K
    if scheme == "closed-loop-exact":
        return sla.expm(A_cl * t_s)
    if scheme == "zoh":
        Ad, Bd = zoh(A, B, t_s)
        return Ad - Bd @ K
    if scheme == "euler":
        return np.eye(A.shape[0]) + t_s * A_cl
    raise ConfigurationError(f"unknown discretisation {scheme!r}")


# -- S-procedure ------------------------------------------------------------------


def _golden_max(fun, lo: float, hi: float, iters: int = 200):
    phi = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fun(d)
        if b - a <= 1e-14 * max(1.0, abs(b)):
            break
    best = max((fun(lo), lo), (fc, c), (fd, d), (fun(hi), hi))
    return best[1], best[0]


def _block_min_eig(P, S, c, gamma, lam):
    """Smallest eigenvalue of ``blkdiag(P, -gamma) - lam * blkdiag(S, -c)``."""
    return min(np.linalg.eigvalsh(P - lam * S)[0], lam * c - gamma)


def sproc_level(P_eta, K_eta=None, d1: float = 1.0, d2: Optional[float] = None,
                selector: Optional[np.ndarray] = None, first: str = "identity",
                rel_tol: float = 1e-10) -> float:
    """Largest ``gamma`` with ``eta' P eta <= gamma`` implying the bound constraints.

    Constraint 1 is ``eta' eta <= d1^2`` (``first="identity"``) or
    ``|K eta|^2 <= (d1 |K|)^2`` (``first="gain"``, needs ``K_eta``); constraint
    2 (optional) is ``eta' S eta <= d2^2`` with ``S = selector`` (default: the
    velocity block of a 4-state error).  For each candidate ``gamma`` every
    multiplier is found by a golden-section search on the concave smallest
    eigenvalue of the block matrix; ``gamma`` itself is bisected.
    """
    P = np.atleast_2d(np.asarray(P_eta, float))
    n = P.shape[0]
    if not np.all(np.linalg.eigvalsh(P) > 0):
        raise SynthesisError("P_eta must be positive definite")
    if d1 <= 0 or (d2 is not None and d2 <= 0):
        raise SynthesisError("bounds d1, d2 must be positive")
    blocks = []
    if first == "identity":
        blocks.append((np.eye(n), d1**2))
    elif first == "gain":
        K = np.atleast_2d(np.asarray(K_eta, float))
        blocks.append((K.T @ K, (d1 * np.linalg.norm(K, 2)) ** 2))
    else:
        raise ConfigurationError(f"unknown first-constraint form {first!r}")
    if d2 is not None:
        S = selector if selector is not None else np.diag([0.0] * (n // 2) + [1.0] * (n - n // 2))
        blocks.append((np.asarray(S, float), d2**2))

    lam_hi = [np.linalg.eigvalsh(P)[-1] / max(np.linalg.eigvalsh(S)[-1], 1e-300) for S, _ in blocks]

    def feasible(gamma):
        for (S, c), hi in zip(blocks, lam_hi):
            _, val = _golden_max(lambda lam: _block_min_eig(P, S, c, gamma, lam), 0.0, hi)
            if val < -1e-12 * max(1.0, gamma):
                return False
        return True

    lo, hi = 0.0, max(c * h for (_, c), h in zip(blocks, lam_hi))
    if not feasible(1e-12 * hi):
        raise SynthesisError("S-procedure infeasible for any positive level")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if feasible(mid) else (lo, mid)
    return lo


def sproc_level_closed_form(P_eta, d1: float, d2: Optional[float] = None) -> float:
    """Reference value: ``min(lambda_min(P) d1^2, lambda_min(Schur) d2^2)`` for the
    velocity-block selector."""
    P = np.asarray(P_eta, float)
    g = np.linalg.eigvalsh(P)[0] * d1**2
    if d2 is not None:
        h = P.shape[0] // 2
        schur = P[h:, h:] - P[h:, :h] @ np.linalg.solve(P[:h, :h], P[:h, h:])
        g = min(g, np.linalg.eigvalsh(schur)[0] * d2**2)
    return float(g)


# -- robot synthesis pipeline ----------------------------------------------------------


@dataclass(frozen=True)
class BoundLedger:
    """Model and timing-law bounds entering the tightened terminal constraints."""

    B_bar: float = 266.4
    C_bar: float = 269.6
    g_bar: float = 1058.9
    pdot_bar: float = 1.0
    pddot_bar: float = 0.823
    u_bar: float = 4000.0
    qdot_bar: float = 1.5 * np.pi

    def d1(self, K_norm: float) -> float:
        num = self.u_bar - self.C_bar * self.qdot_bar - self.g_bar - self.B_bar * self.pddot_bar
        if num <= 0:
            raise SynthesisError("input bound exhausted by the model bounds (d1 <= 0)")
        return num / (self.B_bar * K_norm)

    def d2(self) -> float:
        return self.qdot_bar - self.pdot_bar


def gain_norm(K, kind: str = "inf") -> float:
    """``inf``: induced infinity norm (max row sum); ``2``: spectral norm."""
    K = np.atleast_2d(K)
    if kind == "inf":
        return float(np.abs(K).sum(axis=1).max())
    if kind == "2":
        return float(np.linalg.norm(K, 2))
    raise ConfigurationError(f"unknown gain norm {kind!r}")


def sampled_model_bounds(params: RobotParams = RobotParams(), qdot_bar: float = 1.5 * np.pi, n: int = 61):
    """``max |B|_2``, ``max |C|_2``, ``max |g|_2`` over a grid of the operating box."""
    q2 = np.linspace(-np.pi, np.pi, 4 * n + 1)
    Bn = max(np.linalg.norm(np.asarray(robot_inertia(ca.DM([0.0, a]), params)), 2) for a in q2)
    gn = max(
        np.linalg.norm(np.asarray(robot_gravity(ca.DM([a, b]), params)))
        for a in np.linspace(-np.pi, np.pi, n) for b in np.linspace(-np.pi, np.pi, n)
    )
    qd = np.linspace(-qdot_bar, qdot_bar, 21)
    Cn = max(
        np.linalg.norm(np.asarray(robot_coriolis(ca.DM([0.0, a]), ca.DM([v1, v2]), params)), 2)
        for a in np.linspace(-np.pi, np.pi, 4 * n + 1) for v1 in (qd[0], qd[-1]) for v2 in qd
    )
    return float(Bn), float(Cn), float(gn)


@dataclass(frozen=True)
class TerminalSynthesisResult:
    K_eta: np.ndarray
    P_eta: np.ndarray
    gamma_star: float
    d1: float
    d2: float
    bounds: dict
    conventions: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not np.all(np.linalg.eigvalsh(self.P_eta) > 0):
            raise SynthesisError("P_eta not positive definite")
        if self.gamma_star <= 0:
            raise SynthesisError("gamma* must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["K_eta"] = np.asarray(self.K_eta).tolist()
        d["P_eta"] = np.asarray(self.P_eta).tolist()
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TerminalSynthesisResult":
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"{path}: unsupported schema_version {d.get('schema_version')}")
        d["K_eta"] = np.asarray(d["K_eta"])
        d["P_eta"] = np.asarray(d["P_eta"])
        return cls(**d)


def synthesize_robot_terminal(
    ledger: BoundLedger = BoundLedger(), t_s: float = 0.03,
    Q_lqr=None, R_lqr=None, Q=None, R=None,
    discretisation: str = "closed-loop-exact", norm: str = "inf",
) -> TerminalSynthesisResult:
    """Gain, terminal weight and ellipsoid level for the joint-space error system."""
    A, B = double_integrator_blocks(2)
    Q_lqr = np.eye(4) if Q_lqr is None else np.asarray(Q_lqr, float)
    R_lqr = 10.0 * np.eye(2) if R_lqr is None else np.asarray(R_lqr, float)
    Q = np.diag([1e5, 1e5, 10.0, 10.0]) if Q is None else np.asarray(Q, float)
    R = np.diag([1e-3, 1e-3]) if R is None else np.asarray(R, float)
    K = lqr_gain(A, B, Q_lqr, R_lqr)
    if np.max(np.linalg.eigvals(A - B @ K).real) >= 0:
        raise SynthesisError("LQR closed loop is not Hurwitz")
    A_d = closed_loop_discretisation(A, B, K, t_s, discretisation)
    P = terminal_cost_lyapunov(A_d, Q, R, K)
    d1 = ledger.d1(gain_norm(K, norm))
    d2 = ledger.d2()
    gamma = sproc_level(P, K, d1, d2)
    return TerminalSynthesisResult(
        K, P, gamma, d1, d2, asdict(ledger),
        {"discretisation": discretisation, "gain_norm": norm, "t_s": t_s},
    )


def synthesize_double_integrator_lqr(t_s: float = 0.02, Q=np.eye(2), R=10.0):
    """Discrete LQR gain and cost-to-go for the exact-ZOH double integrator."""
    A, B = double_integrator_blocks(1)
    Ad, Bd = zoh(A, B, t_s)
    K, P = lqr_gain(Ad, Bd, Q, np.atleast_2d(R), discrete=True, return_cost=True)
    return K, P


# -- set descriptions for the transcription ----------------------------------------------


@dataclass(frozen=True, eq=False)
class StabilizingSetSpec:
    """``kind``: ``point`` (``x = r(tau)``), ``ellipsoid`` (``dx' P dx <= gamma``)
    or ``input-admissible`` (``lb <= -K dx <= ub``)."""

    kind: str
    P: Optional[np.ndarray] = None
    gamma: float = 0.0
    K: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("point", "ellipsoid", "input-admissible"):
            raise ConfigurationError(f"unknown stabilizing set kind {self.kind!r}")
        if self.kind == "ellipsoid":
            if self.P is None or not np.all(np.linalg.eigvalsh(self.P) > 0) or self.gamma <= 0:
                raise ConfigurationError("ellipsoid needs P > 0 and gamma > 0")
        if self.kind == "input-admissible" and (self.K is None or self.lb is None or self.ub is None):
            raise ConfigurationError("input-admissible set needs K, lb, ub")

    def residual(self, dx):
        """``(expr, lb, ub)`` with ``lb <= expr <= ub`` meaning membership."""
        if self.kind == "point":
            n = dx.shape[0]
            return dx, np.zeros(n), np.zeros(n)
        if self.kind == "ellipsoid":
            return ca.bilin(ca.DM(self.P), dx, dx) - self.gamma, [-np.inf], [0.0]
        u = -ca.mtimes(ca.DM(np.atleast_2d(self.K)), dx)
        return u, np.atleast_1d(self.lb).astype(float), np.atleast_1d(self.ub).astype(float)

    def contains(self, dx, tol: float = 1e-9) -> bool:
        e, lb, ub = self.residual(ca.DM(np.asarray(dx, float)))
        e = np.asarray(e, float).ravel()
        return bool(np.all(e >= np.asarray(lb) - tol) and np.all(e <= np.asarray(ub) + tol))


@dataclass(frozen=True, eq=False)
class SafeSetSpec:
    """Steady states: ``x[velocity_index] = 0``, intersected with the stabilizing set."""

    velocity_index: tuple[int, ...]
    stabilizing: Optional[StabilizingSetSpec] = None

    def residual(self, x):
        idx = list(self.velocity_index)
        e = ca.vertcat(*[x[i] for i in idx])
        return e, np.zeros(len(idx)), np.zeros(len(idx))

    def contains(self, x, dx=None, tol: float = 1e-9) -> bool:
        x = np.asarray(x, float)
        rest = bool(np.all(np.abs(x[list(self.velocity_index)]) <= tol))
        if self.stabilizing is not None and dx is not None:
            return rest and self.stabilizing.contains(dx, tol)
        return rest


@dataclass(frozen=True)
class TailNode:
    offset: int
    rows: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    N: int
    M: int
    stabilizing: StabilizingSetSpec
    safe: Optional[SafeSetSpec] = None

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("N must be at least 1")
        if self.M < self.N:
            raise ConfigurationError(f"M={self.M} must not be smaller than N={self.N}")
        if self.safe is None and self.M != self.N:
            raise ConfigurationError("a tail (M > N) requires a safe set")


def terminal_block_constraints(spec: TerminalSpec) -> list[TailNode]:
    """Which residual groups are attached to nodes ``N..M`` (offsets from ``k``)."""
    if spec.safe is None:
        return [TailNode(spec.N, ("stabilizing",))]
    out = []
    for n in range(spec.N, spec.M + 1):
        rows = ["stabilizing"]
        if n < spec.M:
            rows = ["dynamics", "h", "g"] + rows
        else:
            rows.append("safe")
        out.append(TailNode(n, tuple(rows)))
    return out


# -- double integrator: explicit slices and terminal control program -----------------------


@dataclass(frozen=True)
class DoubleIntegratorTail:
    """Data of the linear tail problem from node ``N`` to ``M``."""

    t_s: float = 0.02
    steps: int = 50
    v_r: float = 4.0
    a_min: float = -1.0
    a_max: float = 5.0
    K: tuple[float, float] = (0.0, 0.0)
    obstacle: Optional[float] = 20.0
    v_bound: Optional[float] = None  # |v| <= v_bound; defaults to t_s

    @classmethod
    def default(cls, **kw) -> "DoubleIntegratorTail":
        t_s = kw.get("t_s", 0.02)
        K, _ = synthesize_double_integrator_lqr(t_s)
        return cls(K=tuple(np.ravel(K)), **kw)

    @property
    def vb(self) -> float:
        return self.t_s if self.v_bound is None else self.v_bound


def _tail_lp(tail: DoubleIntegratorTail, tau_N: float):
    """Equality/inequality matrices of the tail polyhedron in the variables
    ``z = (dp_0..dp_L, pd_0..pd_L, s_0..s_L, a_0..a_{L-1}, v_0..v_{L-1})`` where
    ``dp = p - v_r tau_N`` and ``s = tau - tau_N``."""
    L, h, vr = tail.steps, tail.t_s, tail.v_r
    nn = L + 1
    idp, ipd, isg = 0, nn, 2 * nn
    ia, iv = 3 * nn, 3 * nn + L
    nz = 3 * nn + 2 * L
    Aeq, beq = [], []
    for j in range(L):
        r = np.zeros(nz); r[idp + j + 1] = 1; r[idp + j] = -1; r[ipd + j] = -h; r[ia + j] = -0.5 * h * h
        Aeq.append(r); beq.append(0.0)
        r = np.zeros(nz); r[ipd + j + 1] = 1; r[ipd + j] = -1; r[ia + j] = -h
        Aeq.append(r); beq.append(0.0)
        r = np.zeros(nz); r[isg + j + 1] = 1; r[isg + j] = -1; r[iv + j] = -1
        Aeq.append(r); beq.append(h)
    r = np.zeros(nz); r[ipd + L] = 1; Aeq.append(r); beq.append(0.0)  # safe: at rest
    r = np.zeros(nz); r[isg] = 1; Aeq.append(r); beq.append(0.0)
    Aub, bub = [], []
    K1, K2 = tail.K
    for j in range(nn):
        # u_s = -K1 (dp - vr s) - K2 (pd - vr) in [a_min, a_max]
        r = np.zeros(nz); r[idp + j] = -K1; r[isg + j] = K1 * vr; r[ipd + j] = -K2
        Aub.append(r.copy()); bub.append(tail.a_max - K2 * vr)
        Aub.append(-r); bub.append(-(tail.a_min - K2 * vr))
        if tail.obstacle is not None:
            r = np.zeros(nz); r[idp + j] = 1; Aub.append(r); bub.append(tail.obstacle - vr * tau_N)
    bounds = [(None, None)] * nn + [(0.0, None)] * nn + [(None, None)] * nn
    bounds += [(tail.a_min, tail.a_max)] * L + [(-tail.vb, tail.vb)] * L
    return np.array(Aeq), np.array(beq), np.array(Aub), np.array(bub), bounds, (idp, ipd)


def tail_interval(tail: DoubleIntegratorTail, tau_N: float, pd: float):
    """Feasible range of ``p - v_r tau_N`` at velocity ``pd`` (``None`` if empty)."""
    Aeq, beq, Aub, bub, bounds, (idp, ipd) = _tail_lp(tail, tau_N)
    nz = Aeq.shape[1]
    r = np.zeros(nz); r[ipd] = 1
    Aeq = np.vstack([Aeq, r]); beq = np.append(beq, pd)
    out = []
    for sgn in (1.0, -1.0):
        c = np.zeros(nz); c[idp] = sgn
        res = linprog(c, A_ub=Aub, b_ub=bub, A_eq=Aeq, b_eq=beq, bounds=bounds, method="highs")
        if res.status == 2:
            return None
        if res.status == 3:
            out.append(-sgn * np.inf)
            continue
        if res.status != 0:
            raise SynthesisError(f"tail LP failed: {res.message}")
        out.append(sgn * res.fun)
    return out[0], out[1]


@dataclass(frozen=True, eq=False)
class TerminalSlice:
    tau_N: float
    dp: np.ndarray
    pd: np.ndarray
    mask: np.ndarray  # mask[i, j]: (dp[j], pd[i]) inside
    intervals: list

    @property
    def cells(self) -> int:
        return int(self.mask.sum())


def explicit_terminal_slice(tail: DoubleIntegratorTail, tau_N: float, dp_range=(-10.0, 10.0),
                            pd_range=(0.0, 5.0), resolution: int = 201) -> TerminalSlice:
    """Grid classification of the terminal set around ``r(tau_N)``.

    The set is a polyhedron, so each velocity row is an interval in
    ``p - v_r tau_N`` found by two LPs.
    """
    dp = np.linspace(*dp_range, resolution)
    pd = np.linspace(*pd_range, resolution)
    mask = np.zeros((resolution, resolution), dtype=bool)
    ivs = []
    for i, v in enumerate(pd):
        iv = tail_interval(tail, tau_N, float(v))
        ivs.append(iv)
        if iv is not None:
            mask[i] = (dp >= iv[0]) & (dp <= iv[1])
    return TerminalSlice(float(tau_N), dp, pd, mask, ivs)


def slice_nesting_violations(outer: TerminalSlice, inner: TerminalSlice) -> int:
    """Number of grid cells in ``inner`` but not in ``outer``."""
    return int(np.sum(inner.mask & ~outer.mask))


class DoubleIntegratorTerminalController:
    """Terminal control program: stay close to the LQR law while keeping a
    feasible tail to the safe set.

    Minimises ``|u - kappa(x, tau)|^2 + v^2`` subject to the tail problem from
    the current state.  The optimal tail is returned as a certificate.
    """

    def __init__(self, tail: DoubleIntegratorTail):
        from .solver import NlpProblem, NlpSolver, SolverOptions

        self.tail = tail
        L, h, vr = tail.steps, tail.t_s, tail.v_r
        X = ca.SX.sym("X", 2, L + 1)
        T = ca.SX.sym("T", L + 1)
        U = ca.SX.sym("U", L)
        V = ca.SX.sym("V", L)
        prm = ca.SX.sym("prm", 4)  # p0, pd0, tau0, obstacle (inf-free; use big)
        K1, K2 = tail.K
        g, lbg, ubg = [X[:, 0] - prm[0:2], T[0] - prm[2]], [0, 0, 0], [0, 0, 0]
        for j in range(L):
            nxt = ca.vertcat(X[0, j] + h * X[1, j] + 0.5 * h * h * U[j], X[1, j] + h * U[j])
            g += [X[:, j + 1] - nxt, T[j + 1] - T[j] - h - V[j]]
            lbg += [0, 0, 0]; ubg += [0, 0, 0]
        for j in range(L + 1):
            us = -K1 * (X[0, j] - vr * T[j]) - K2 * (X[1, j] - vr)
            g += [us, X[0, j] - prm[3]]
            lbg += [tail.a_min, -np.inf]; ubg += [tail.a_max, 0.0]
        g.append(X[1, L]); lbg.append(0.0); ubg.append(0.0)
        kappa = -K1 * (prm[0] - vr * prm[2]) - K2 * (prm[1] - vr)
        f = (U[0] - kappa) ** 2 + V[0] ** 2 + 1e-8 * (ca.sumsqr(U) + ca.sumsqr(V))
        z = ca.vertcat(ca.vec(X), T, U, V)
        lbx = np.concatenate([np.tile([-np.inf, 0.0], L + 1), np.full(L + 1, -np.inf),
                              np.full(L, tail.a_min), np.full(L, -tail.vb)])
        ubx = np.concatenate([np.full(2 * (L + 1), np.inf), np.full(L + 1, np.inf),
                              np.full(L, tail.a_max), np.full(L, tail.vb)])
        self.L = L
        self.problem = NlpProblem(z, f, ca.vertcat(*g), lbx, ubx, lbg, ubg, np.zeros(z.numel()), prm, np.zeros(4))
        self.solver = NlpSolver(self.problem, SolverOptions(max_iter=300, opt_tol=1e-9, feas_tol=1e-9))

    def kappa(self, x, tau) -> float:
        K1, K2 = self.tail.K
        return -K1 * (x[0] - self.tail.v_r * tau) - K2 * (x[1] - self.tail.v_r)

    def shifted(self, info) -> np.ndarray:
        """Previous certificate moved one step ahead; the appended node rests
        with ``tau`` frozen (``v = -t_s``), so it is feasible by construction."""
        X = np.vstack([info["X"][1:], info["X"][-1:]])
        T = np.append(info["T"][1:], info["T"][-1])
        U = np.append(info["U"][1:], 0.0)
        V = np.append(info["V"][1:], -self.tail.t_s)
        return np.concatenate([X.ravel(), T, U, V])

    @staticmethod
    def _accepted(rep) -> bool:
        # solved at 1e-9; accept the interior-point result up to 1e-8
        if rep.violation > 1e-8:
            return rep.status == "optimal"
        return rep.status == "optimal" or rep.backend_status in ("Solve_Succeeded", "lp_certificate")

    def feasible_point(self, x, tau, obstacle_active: bool = True):
        """Point of the tail polyhedron from ``(x, tau)`` with least ``|u_0 - kappa|``,
        in the controller's variable layout; ``None`` if the LP is infeasible."""
        tail = self.tail if obstacle_active else replace(self.tail, obstacle=None)
        Aeq, beq, Aub, bub, bounds, (idp, ipd) = _tail_lp(tail, tau)
        L, nn = self.L, self.L + 1
        nz = Aeq.shape[1]
        ia = 3 * nn
        # extra variable t >= |a_0 - kappa|
        Aeq = np.hstack([Aeq, np.zeros((Aeq.shape[0], 1))])
        Aub = np.hstack([Aub, np.zeros((Aub.shape[0], 1))])
        k = self.kappa(x, tau)
        r1 = np.zeros(nz + 1); r1[ia] = 1; r1[-1] = -1
        r2 = np.zeros(nz + 1); r2[ia] = -1; r2[-1] = -1
        fix = np.zeros((2, nz + 1)); fix[0, idp] = 1; fix[1, ipd] = 1
        c = np.zeros(nz + 1); c[-1] = 1
        res = linprog(c, A_ub=np.vstack([Aub, r1, r2]), b_ub=np.append(bub, [k, -k]),
                      A_eq=np.vstack([Aeq, fix]), b_eq=np.append(beq, [x[0] - tail.v_r * tau, x[1]]),
                      bounds=bounds + [(0.0, None)], method="highs")
        if res.status != 0:
            return None
        w = res.x[:nz]
        X = np.column_stack([w[:nn] + tail.v_r * tau, w[nn:2 * nn]])
        return np.concatenate([X.ravel(), tau + w[2 * nn:3 * nn], w[3 * nn:3 * nn + L], w[3 * nn + L:]])

    def __call__(self, x, tau, obstacle_active: bool = True, previous=None):
        """``previous``: the info dict of the last call, used as warm start."""
        obs = self.tail.obstacle if (obstacle_active and self.tail.obstacle is not None) else 1e9
        L = self.L
        if previous is not None:
            x0 = self.shifted(previous)
        else:
            x0 = np.concatenate([np.tile(np.asarray(x, float), L + 1), np.full(L + 1, tau), np.zeros(2 * L)])
        z, rep, _, _ = self.solver.solve(x0=x0, p=[x[0], x[1], tau, obs])
        if not self._accepted(rep):
            # boundary states: restart from an LP vertex of the same polyhedron
            x1 = self.feasible_point(x, tau, obstacle_active)
            if x1 is not None:
                z, rep, _, _ = self.solver.solve(x0=x1, p=[x[0], x[1], tau, obs])
                viol = self.problem.violation(x1, [x[0], x[1], tau, obs])
                if not self._accepted(rep) and viol <= 1e-8:
                    # keep the exact LP point; it is feasible, only optimality is lost
                    z, rep = x1, replace(rep, status="feasible", violation=viol, backend_status="lp_certificate")
        if not self._accepted(rep):
            raise PropertyFailure(f"terminal control program infeasible from x={x}, tau={tau}: {rep.status}")
        X = z[: 2 * (L + 1)].reshape(L + 1, 2)
        T = z[2 * (L + 1): 3 * (L + 1)]
        U = z[3 * (L + 1): 3 * (L + 1) + L]
        V = z[3 * (L + 1) + L:]
        return float(U[0]), float(V[0]), {"X": X, "T": T, "U": U, "V": V, "report": rep}


# -- robot terminal law -----------------------------------------------------------------


def robot_terminal_law(ref, K_eta, params: RobotParams = RobotParams()) -> ca.Function:
    """``u = C(x) x2 + g(x1) + B(x1) (pddot(tau) - K_eta eta)``, ``eta = x - r(tau)``."""
    x = ca.SX.sym("x", 4)
    t = ca.SX.sym("tau")
    xr = ref.state_fn(t)
    pdd = ca.jacobian(xr[2:4], t)
    eta = x - xr
    q, qd = x[0:2], x[2:4]
    u = (ca.mtimes(robot_coriolis(q, qd, params), qd) + robot_gravity(q, params)
         + ca.mtimes(robot_inertia(q, params), pdd - ca.mtimes(ca.DM(K_eta), eta)))
    return ca.Function("robot_terminal_law", [x, t], [u])
