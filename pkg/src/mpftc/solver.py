"""Narrow NLP contract around IPOPT.

Problems are stated symbolically (CasADi expressions) so that exact first and
second derivatives come from algorithmic differentiation.  ``NlpSolver``
builds the IPOPT instance once and re-solves it for new parameters and warm
starts, which is what the receding-horizon loop needs.
"""
from __future__ import annotations

import shutil
import time
from dataclasses import dataclass, field
from typing import Optional

import casadi as ca
import numpy as np

from .core import ConfigurationError

STATUSES = ("optimal", "max-iter", "infeasible", "numerical-failure")


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 500
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    print_level: int = 0
    mu_init: float = 1e-1
    warm_start: bool = False
    hessian: str = "exact"  # or "limited-memory"
    jit: bool = False  # compile derivative code with the system C compiler

    def ipopt(self) -> dict:
        opts = {
            "ipopt.max_iter": int(self.max_iter),
            "ipopt.tol": self.opt_tol,
            "ipopt.constr_viol_tol": self.feas_tol,
            "ipopt.dual_inf_tol": self.opt_tol,
            "ipopt.compl_inf_tol": self.opt_tol,
            "ipopt.acceptable_iter": 0,
            "ipopt.print_level": int(self.print_level),
            "ipopt.mu_init": self.mu_init,
            "ipopt.sb": "yes",
            "ipopt.perturb_always_cd": "yes",
            "ipopt.hessian_approximation": self.hessian,
            "print_time": False,
        }
        if self.jit and shutil.which("gcc"):
            opts.update({"jit": True, "compiler": "shell", "jit_cleanup": True,
                         "jit_options": {"flags": ["-O0"], "verbose": False}})
        if self.warm_start:
            opts.update({
                "ipopt.warm_start_init_point": "yes",
                "ipopt.warm_start_bound_push": 1e-9,
                "ipopt.warm_start_mult_bound_push": 1e-9,
                "ipopt.warm_start_slack_bound_push": 1e-9,
                "ipopt.mu_init": 1e-5,
            })
        return opts


@dataclass(eq=False)
class NlpProblem:
    """``min f(x; p)  s.t.  lbg <= g(x; p) <= ubg,  lbx <= x <= ubx``.

    Rows with ``lbg == ubg`` are equalities.  ``x``/``p`` are CasADi symbols
    and ``f``/``g`` expressions in them.
    """

    x: ca.SX
    f: ca.SX
    g: ca.SX
    lbx: np.ndarray
    ubx: np.ndarray
    lbg: np.ndarray
    ubg: np.ndarray
    x0: np.ndarray
    p: Optional[ca.SX] = None
    p0: Optional[np.ndarray] = None
    _fns: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n, m = self.x.numel(), self.g.numel()
        self.lbx = np.broadcast_to(np.asarray(self.lbx, float), (n,)).copy()
        self.ubx = np.broadcast_to(np.asarray(self.ubx, float), (n,)).copy()
        self.lbg = np.broadcast_to(np.asarray(self.lbg, float), (m,)).copy()
        self.ubg = np.broadcast_to(np.asarray(self.ubg, float), (m,)).copy()
        self.x0 = np.broadcast_to(np.asarray(self.x0, float), (n,)).copy()
        if self.p is None:
            self.p = ca.SX.sym("p", 0)
        self.p0 = np.zeros(self.p.numel()) if self.p0 is None else np.asarray(self.p0, float).ravel()
        if self.p0.size != self.p.numel():
            raise ConfigurationError("parameter value has the wrong size")
        if np.any(self.lbx > self.ubx) or np.any(self.lbg > self.ubg):
            raise ConfigurationError("inconsistent bounds")

    @property
    def n(self) -> int:
        return self.x.numel()

    @property
    def m(self) -> int:
        return self.g.numel()

    @property
    def equality_mask(self) -> np.ndarray:
        return self.lbg == self.ubg

    def _fn(self, name):
        if not self._fns:
            x, p, f, g = self.x, self.p, self.f, self.g
            self._fns["f"] = ca.Function("f", [x, p], [f])
            self._fns["grad"] = ca.Function("grad_f", [x, p], [ca.gradient(f, x)])
            self._fns["g"] = ca.Function("g", [x, p], [g])
            self._fns["jac"] = ca.Function("jac_g", [x, p], [ca.jacobian(g, x)])
            lam = ca.SX.sym("lam", g.numel())
            self._fns["jtl"] = ca.Function("jt_lam", [x, p, lam], [ca.jtimes(g, x, lam, True)])
        return self._fns[name]

    def objective(self, x, p=None) -> float:
        return float(self._fn("f")(x, self.p0 if p is None else p))

    def gradient(self, x, p=None) -> np.ndarray:
        return np.asarray(self._fn("grad")(x, self.p0 if p is None else p)).ravel()

    def constraints(self, x, p=None) -> np.ndarray:
        return np.asarray(self._fn("g")(x, self.p0 if p is None else p)).ravel()

    def jacobian(self, x, p=None) -> np.ndarray:
        return np.asarray(ca.densify(self._fn("jac")(x, self.p0 if p is None else p)))

    def jacobian_transpose_times(self, x, lam, p=None) -> np.ndarray:
        return np.asarray(self._fn("jtl")(x, self.p0 if p is None else p, lam)).ravel()

    def violation(self, x, p=None) -> float:
        x = np.asarray(x, float).ravel()
        g = self.constraints(x, p)
        parts = [self.lbx - x, x - self.ubx, self.lbg - g, g - self.ubg, [0.0]]
        with np.errstate(invalid="ignore"):
            v = np.concatenate([np.asarray(q, float) for q in parts])
        v = v[np.isfinite(v)]
        return float(max(v.max(), 0.0))


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    feasibility: float
    complementarity: float

    def ok(self, feas_tol: float, opt_tol: float) -> bool:
        return self.feasibility <= feas_tol and self.stationarity <= opt_tol and self.complementarity <= opt_tol


@dataclass(frozen=True)
class SolveReport:
    status: str
    iterations: int
    kkt: KktResiduals
    violation: float
    objective: float
    backend_status: str = ""
    wall_time: float = 0.0

    @property
    def success(self) -> bool:
        return self.status == "optimal"


def check_kkt(p: NlpProblem, x, lam_g, lam_x, params=None, s_max: float = 100.0) -> KktResiduals:
    """First-order residuals for multipliers in the sign convention
    ``L = f + lam_g' g + lam_x' x`` (positive at upper bounds).

    Stationarity is scaled like the interior-point termination test:
    divided by ``max(1, mean|multiplier| / s_max)``.  Complementarity is the
    largest ``|lam_i| * distance to the active side``, scaled the same way.
    """
    x = np.asarray(x, float).ravel()
    lam_g = np.asarray(lam_g, float).ravel()
    lam_x = np.asarray(lam_x, float).ravel()
    grad = p.gradient(x, params)
    g = p.constraints(x, params)
    r = grad + (p.jacobian_transpose_times(x, lam_g, params) if p.m else 0.0) + lam_x
    nm = p.n + p.m
    s_d = max(s_max, (np.abs(lam_g).sum() + np.abs(lam_x).sum()) / max(nm, 1)) / s_max
    stat = float(np.max(np.abs(r))) / s_d if r.size else 0.0

    def comp(lam, val, lo, hi):
        out = 0.0
        for li, vi, l, h in zip(lam, val, lo, hi):
            if l == h:
                continue
            if li > 0:
                d = h - vi if np.isfinite(h) else np.inf
            elif li < 0:
                d = vi - l if np.isfinite(l) else np.inf
            else:
                continue
            out = max(out, abs(li) * abs(d))
        return out

    c = max(comp(lam_g, g, p.lbg, p.ubg), comp(lam_x, x, p.lbx, p.ubx)) / s_d
    return KktResiduals(stat, p.violation(x, params), float(c))


_STATUS_MAP = {
    "Solve_Succeeded": "optimal",
    "Solved_To_Acceptable_Level": "optimal",
    "Maximum_Iterations_Exceeded": "max-iter",
    "Maximum_CpuTime_Exceeded": "max-iter",
    "Infeasible_Problem_Detected": "infeasible",
    "Restoration_Failed": "infeasible",
    "Invalid_Number_Detected": "numerical-failure",
}


class NlpSolver:
    """IPOPT instance bound to one problem structure; reusable across solves."""

    def __init__(self, problem: NlpProblem, opts: SolverOptions = SolverOptions()):
        self.problem = problem
        self.opts = opts
        nlp = {"x": problem.x, "f": problem.f, "g": problem.g, "p": problem.p}
        self._solver = ca.nlpsol("mpftc_nlp", "ipopt", nlp, opts.ipopt())

    def solve(self, x0=None, p=None, lbx=None, ubx=None, lam_g0=None, lam_x0=None):
        pb = self.problem
        x0 = pb.x0 if x0 is None else np.asarray(x0, float).ravel()
        p = pb.p0 if p is None else np.asarray(p, float).ravel()
        lbx = pb.lbx if lbx is None else np.asarray(lbx, float)
        ubx = pb.ubx if ubx is None else np.asarray(ubx, float)
        if not np.all(np.isfinite(x0)):
            raise ConfigurationError("initial guess must be finite")
        args = dict(x0=x0, p=p, lbx=lbx, ubx=ubx, lbg=pb.lbg, ubg=pb.ubg)
        if lam_g0 is not None:
            args["lam_g0"] = lam_g0
        if lam_x0 is not None:
            args["lam_x0"] = lam_x0
        t0 = time.perf_counter()
        try:
            sol = self._solver(**args)
        except RuntimeError as exc:  # evaluation errors surface as exceptions
            rep = SolveReport("numerical-failure", 0, KktResiduals(np.inf, np.inf, np.inf), np.inf, np.nan, str(exc))
            return x0.copy(), rep, np.zeros(pb.m), np.zeros(pb.n)
        wall = time.perf_counter() - t0
        stats = self._solver.stats()
        backend = str(stats.get("return_status", ""))
        x = np.asarray(sol["x"]).ravel()
        lam_g = np.asarray(sol["lam_g"]).ravel()
        lam_x = np.asarray(sol["lam_x"]).ravel()
        if not np.all(np.isfinite(x)):
            status = "numerical-failure"
            kkt = KktResiduals(np.inf, np.inf, np.inf)
            viol = np.inf
        else:
            status = _STATUS_MAP.get(backend, "numerical-failure")
            saved = (pb.lbx, pb.ubx)
            pb.lbx, pb.ubx = np.asarray(lbx, float), np.asarray(ubx, float)
            try:
                kkt = check_kkt(pb, x, lam_g, lam_x, p)
            finally:
                pb.lbx, pb.ubx = saved
            viol = kkt.feasibility
            if status == "optimal" and viol > self.opts.feas_tol:
                status = "infeasible"
        rep = SolveReport(status, int(stats.get("iter_count", 0)), kkt, viol, float(sol["f"]), backend, wall)
        return x, rep, lam_g, lam_x


def solve(p: NlpProblem, opts: SolverOptions = SolverOptions()):
    """One-shot solve; returns ``(x, SolveReport)``."""
    x, rep, _, _ = NlpSolver(p, opts).solve()
    return x, rep
