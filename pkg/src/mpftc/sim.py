"""Receding-horizon closed loop, property monitors and log serialisation."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import ConfigurationError, CostSpec
from .models import PlantModel, RobotParams, make_model
from .ocp import (ObstacleSlot, OcpSolution, OcpSpec, TranscribedNlp, initial_tau_projection,
                  shift_warmstart)
from .references import make_reference
from .solver import SolverOptions
from .terminal import (SafeSetSpec, StabilizingSetSpec, TerminalSpec, TerminalSynthesisResult,
                       synthesize_double_integrator_lqr)
from .uncertainty import ObstacleRealisation, ObstacleSpec

LOG_SCHEMA_VERSION = 1
CSV_BASE = ["k", "t", "tau"]


@dataclass
class Scenario:
    """Everything needed to reproduce one closed-loop run."""

    name: str
    model: str
    reference: dict
    cost: dict
    N: int
    t_s: float
    duration: float
    x0: list
    mode: str = "mpftc"
    M: Optional[int] = None
    tau0: Optional[float] = None
    model_params: dict = field(default_factory=dict)
    terminal: dict = field(default_factory=lambda: {"kind": "none"})
    obstacles: list = field(default_factory=list)
    penalty: Optional[float] = None
    v_bound: Optional[float] = None
    tail_weight: float = 1e-6
    seed: int = 0
    solver: dict = field(default_factory=dict)
    open_loop_every: int = 10
    expect: dict = field(default_factory=dict)
    slices: dict = field(default_factory=dict)  # explicit terminal-set slices (double integrator)

    def __post_init__(self):
        steps = self.duration / self.t_s
        if self.t_s <= 0 or self.duration <= 0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigurationError(f"{self.name}: duration must be a positive multiple of t_s")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.t_s))

    def to_dict(self) -> dict:
        return asdict(self)


# -- assembly ---------------------------------------------------------------------------


def _robot_params(d: dict) -> RobotParams:
    return RobotParams(**{k: float(v) for k, v in d.items()})


def build_model(sc: Scenario) -> PlantModel:
    kw = dict(sc.model_params)
    if sc.model == "robot" and "params" in kw:
        kw["params"] = _robot_params(kw["params"])
    return make_model(sc.model, **kw)


def build_reference(sc: Scenario):
    kw = {k: v for k, v in sc.reference.items() if k != "kind"}
    if kw.pop("input_lead_half_step", False):
        kw["input_lead"] = 0.5 * sc.t_s
    if sc.reference.get("kind", sc.model) == "robot" and "params" in sc.model_params:
        kw["params"] = _robot_params(sc.model_params["params"])
    return make_reference(sc.reference.get("kind", sc.model), **kw)


def load_synthesis(path) -> TerminalSynthesisResult:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(
            f"synthesis artifact {p} not found; run `mpftc synth robot-appendix-b --out {p}` first"
        )
    return TerminalSynthesisResult.load(p)


def build_ocp(sc: Scenario, model: PlantModel, ref, base_dir: Path = Path(".")) -> OcpSpec:
    q = np.asarray(sc.cost["q"], float)
    r = np.asarray(sc.cost["r"], float)
    w = float(sc.cost["w"])
    term = dict(sc.terminal)
    kind = term.get("kind", "none")
    P = None
    stab = None
    safe = None
    if kind == "point":
        stab = StabilizingSetSpec("point")
    elif kind == "lqr":
        K, P = synthesize_double_integrator_lqr(sc.t_s, np.diag(term.get("q_lqr", [1.0, 1.0])), term.get("r_lqr", 10.0))
        lb, ub = model.known.input_lb, model.known.input_ub
        if term.get("set", sc.mode == "mpftc-safe"):
            stab = StabilizingSetSpec("input-admissible", K=K, lb=lb, ub=ub)
    elif kind == "ellipsoid":
        art = Path(term["artifact"])
        if not art.is_absolute():
            art = base_dir / art
        syn = load_synthesis(art)
        P = syn.P_eta
        stab = StabilizingSetSpec("ellipsoid", P=syn.P_eta, gamma=syn.gamma_star)
    elif kind != "none":
        raise ConfigurationError(f"{sc.name}: unknown terminal kind {kind!r}")
    cost = CostSpec.from_diagonals(q, r, w, P)
    H = sc.M if sc.mode == "mpftc-safe" else sc.N
    terminal = None
    if sc.mode == "mpftc-safe":
        if stab is None:
            raise ConfigurationError(f"{sc.name}: safe mode needs a stabilizing terminal set")
        safe = SafeSetSpec(model.velocity_index, stab)
        terminal = TerminalSpec(sc.N, H, stab, safe)
    elif stab is not None:
        terminal = TerminalSpec(sc.N, sc.N, stab)
    slots = tuple(
        ObstacleSlot("halfline" if o.kind == "static" else "disc", o.position_index)
        for o in obstacle_specs(sc)
    )
    return OcpSpec(
        model, ref, cost, sc.N, sc.t_s, sc.mode, sc.M, terminal, slots, sc.penalty, sc.v_bound,
        sc.tail_weight, 1, SolverOptions(**sc.solver),
    )


def obstacle_specs(sc: Scenario) -> list[ObstacleSpec]:
    out = []
    for o in sc.obstacles:
        d = dict(o)
        d["position_index"] = tuple(d.get("position_index", ()))
        d["window"] = tuple(float(x) for x in d.get("window", (0.0, np.inf)))
        if "w0" in d:
            d["w0"] = tuple(d["w0"])
        out.append(ObstacleSpec(**d))
    return out


# -- log ------------------------------------------------------------------------------


@dataclass
class ClosedLoopLog:
    """Per-step record; rows ``0..K`` (inputs of the final row are NaN)."""

    scenario: str
    mode: str
    t_s: float
    n_x: int
    n_u: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    u: list = field(default_factory=list)
    v: list = field(default_factory=list)
    value: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    status: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    solver_violation: list = field(default_factory=list)
    certificate_violation: list = field(default_factory=list)
    h_violation: list = field(default_factory=list)
    g_true: list = field(default_factory=list)
    g_pred: list = field(default_factory=list)
    obstacle_active: list = field(default_factory=list)
    obstacle_w: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    open_loop: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    def csv_header(self) -> list[str]:
        return (CSV_BASE + [f"x{i}" for i in range(self.n_x)] + [f"u{i}" for i in range(self.n_u)]
                + ["v", "value", "stage", "status", "fallback", "solver_violation", "certificate_violation",
                   "h_violation", "g_true", "g_pred", "iterations", "wall_time"])

    def rows(self):
        for k in range(len(self)):
            yield ([k, self.t[k], self.tau[k]] + list(self.x[k]) + list(self.u[k])
                   + [self.v[k], self.value[k], self.stage[k], self.status[k], int(self.fallback[k]),
                      self.solver_violation[k], self.certificate_violation[k], self.h_violation[k],
                      self.g_true[k], self.g_pred[k], self.iterations[k], self.wall_time[k]])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.csv_header())
            for row in self.rows():
                wr.writerow(row)
        return path

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = LOG_SCHEMA_VERSION
        return _jsonable(d)

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    def replay_signature(self) -> dict:
        """Fields that must be bit-identical between replays (no timings)."""
        d = self.to_dict()
        d.pop("wall_time")
        return d


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if np.isfinite(f) else (None if np.isnan(f) else ("inf" if f > 0 else "-inf"))
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


# -- closed loop ------------------------------------------------------------------------


@dataclass
class Controller:
    scenario: Scenario
    model: PlantModel
    ref: object
    spec: OcpSpec
    nlp: TranscribedNlp
    obstacles: list


def build_controller(sc: Scenario, base_dir: Path = Path(".")) -> Controller:
    model = build_model(sc)
    ref = build_reference(sc)
    spec = build_ocp(sc, model, ref, base_dir)
    nlp = TranscribedNlp(spec)
    return Controller(sc, model, ref, spec, nlp, obstacle_specs(sc))


def _pred_unknown(nlp: TranscribedNlp, sol: OcpSolution, p) -> float:
    rows = nlp.row_groups.get("unknown", [])
    if not rows or sol.z is None:
        return float("-inf")
    g = nlp.problem.constraints(sol.z, p)[rows]
    if nlp.ns:
        # rows carry "- slack"; report the raw constraint value
        g = g + np.ravel(sol.S)[: len(rows)]
    return float(np.max(g))


def run_closed_loop(sc: Scenario, base_dir: Path = Path("."), controller: Optional[Controller] = None,
                    progress: Optional[Callable[[int, int], None]] = None) -> ClosedLoopLog:
    """Simulate ``sc``; the plant is the nominal discrete model (no mismatch)."""
    ctl = controller or build_controller(sc, base_dir)
    model, ref, spec, nlp = ctl.model, ctl.ref, ctl.spec, ctl.nlp
    t_s, K, H = sc.t_s, sc.steps, spec.horizon
    feas_tol = spec.solver.feas_tol
    x = np.asarray(sc.x0, float)
    if x.size != model.n_x:
        raise ConfigurationError(f"{sc.name}: x0 has dimension {x.size}, model needs {model.n_x}")
    tau = initial_tau_projection(x, ref) if sc.tau0 is None else float(sc.tau0)
    real = [ObstacleRealisation(o, t_s, sc.seed + 7919 * i) for i, o in enumerate(ctl.obstacles)]
    log = ClosedLoopLog(sc.name, sc.mode, t_s, model.n_x, model.n_u)
    log.open_loop = {"every": sc.open_loop_every, "k": [], "X": [], "T": [], "U": []}
    prev: Optional[OcpSolution] = None
    nan_u = [float("nan")] * model.n_u
    for k in range(K + 1):
        t = k * t_s
        w_true = [r.at(k) for r in real]
        rcs = [o.measured(k, w, H, t_s) for o, w in zip(ctl.obstacles, w_true)]
        g_true = max((o.true_value(x, w, t) for o, w in zip(ctl.obstacles, w_true)), default=float("-inf"))
        log.t.append(t)
        log.x.append(x.tolist())
        log.tau.append(float(tau))
        log.g_true.append(g_true)
        log.obstacle_active.append([bool(o.is_active(t)) for o in ctl.obstacles])
        log.obstacle_w.append([w.tolist() for w in w_true])
        if k == K:
            for name, val in (("u", nan_u), ("v", np.nan), ("value", np.nan), ("stage", np.nan),
                              ("status", "final"), ("fallback", False), ("solver_violation", np.nan),
                              ("certificate_violation", np.nan), ("h_violation", np.nan), ("g_pred", np.nan),
                              ("iterations", 0), ("wall_time", 0.0)):
                getattr(log, name).append(val)
            break
        guess = shift_warmstart(nlp, prev, x, tau)
        cert = nlp.solution_from(guess, x, tau, rcs, k) if prev is not None else None
        t0 = time.perf_counter()
        sol = nlp.solve(x, tau, rcs, guess, k)
        wall = time.perf_counter() - t0
        ok = sol.status == "optimal" and sol.violation <= feas_tol
        use, fb = sol, False
        if not ok and cert is not None and (spec.safe and cert.violation <= feas_tol):
            use, fb = cert, True
        p = nlp.params(rcs, k)
        u, v = np.asarray(use.U[0], float), float(use.V[0])
        log.u.append(u.tolist())
        log.v.append(v)
        log.value.append(float(use.objective))
        log.stage.append(float(spec.cost.stage(x, u, tau, v, ref)))
        log.status.append(sol.status)
        log.fallback.append(fb)
        log.solver_violation.append(float(sol.violation))
        log.certificate_violation.append(float(cert.violation) if cert is not None else float("nan"))
        log.h_violation.append(model.known.max_violation(x, u))
        log.g_pred.append(_pred_unknown(nlp, use, p))
        log.iterations.append(sol.report.iterations if sol.report else 0)
        log.wall_time.append(wall)
        if sc.open_loop_every and k % sc.open_loop_every == 0:
            log.open_loop["k"].append(k)
            log.open_loop["X"].append(use.X.tolist())
            log.open_loop["T"].append(use.T.tolist())
            log.open_loop["U"].append(use.U.tolist())
        x = model.step(x, u, t_s)
        tau = tau + t_s + v
        prev = use
        if progress:
            progress(k, K)
    return log


# -- monitors ---------------------------------------------------------------------------


@dataclass
class LyapunovReport:
    checked: int
    passed: int
    failures: list
    final_max_abs_v: float
    final_max_clock_error: float

    @property
    def pass_rate(self) -> float:
        return self.passed / self.checked if self.checked else 1.0

    def to_dict(self):
        return _jsonable(asdict(self) | {"pass_rate": self.pass_rate})


def monitor_lyapunov(log: ClosedLoopLog, opt_tol: float = 1e-6, nominal: Optional[np.ndarray] = None,
                     margin: float = 1e-3) -> LyapunovReport:
    """Descent ``V_{k+1} <= V_k - l_k`` on nominal steps, tolerance ``10 opt_tol (1 + |V_k|)``.

    A step is nominal when both solves succeeded without fallback and no
    unknown constraint is near-active in the applied predictions.
    """
    V = log.array("value")
    L = log.array("stage")
    n = len(log) - 1
    if nominal is None:
        gp = log.array("g_pred")
        ok = np.array([s == "optimal" for s in log.status]) & ~np.asarray(log.fallback, bool)
        nominal = ok & ~(gp > -margin)
    fails, checked = [], 0
    for k in range(n - 1):
        if not (nominal[k] and nominal[k + 1]):
            continue
        checked += 1
        slack = V[k + 1] - V[k] + L[k]
        if slack > 10 * opt_tol * (1 + abs(V[k])):
            fails.append((k, float(slack)))
    tail = max(1, n // 10)
    vv = log.array("v")[n - tail:n]
    tau = log.array("tau")
    dtau = np.diff(tau)[n - tail:n]
    return LyapunovReport(checked, checked - len(fails), fails, float(np.max(np.abs(vv))),
                          float(np.max(np.abs(dtau - log.t_s))))


@dataclass
class SafetyReport:
    steps: int
    max_h_violation: float
    max_g_violation: float
    violations: int
    first_violation_time: Optional[float]
    fallbacks: int
    uncertified: int
    safe_mode: bool

    @property
    def safe(self) -> bool:
        return self.violations == 0 and (not self.safe_mode or self.uncertified == 0)

    def to_dict(self):
        return _jsonable(asdict(self) | {"safe": self.safe})


def monitor_safety(log: ClosedLoopLog, feas_tol: float = 1e-6) -> SafetyReport:
    """Known constraints at applied ``(x_k, u_k)``, unknown constraints against the
    realised obstacle, and (safe mode) a certificate at every step."""
    h = log.array("h_violation")[:-1]
    g = log.array("g_true")
    bad = (h > feas_tol) | (g[:-1] > feas_tol)
    bad = np.append(bad, g[-1] > feas_tol)
    idx = np.flatnonzero(bad)
    safe_mode = log.mode == "mpftc-safe"
    sv = log.array("solver_violation")[:-1]
    certified = np.array([
        (s == "optimal" and viol <= feas_tol) or fb
        for s, viol, fb in zip(log.status[:-1], sv, log.fallback[:-1])
    ])
    gf = g[np.isfinite(g)]
    return SafetyReport(
        steps=len(log) - 1,
        max_h_violation=float(np.nanmax(h)) if h.size else float("-inf"),
        max_g_violation=float(gf.max()) if gf.size else float("-inf"),
        violations=int(idx.size),
        first_violation_time=float(log.t[idx[0]]) if idx.size else None,
        fallbacks=int(np.sum(log.fallback[:-1])),
        uncertified=int(np.sum(~certified)),
        safe_mode=safe_mode,
    )


# -- scenario expectations ---------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    value: object
    threshold: object

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.value} (threshold {self.threshold})"


def _speed(log: ClosedLoopLog, model: PlantModel) -> np.ndarray:
    x = log.array("x")
    if model.velocity_index:
        return np.linalg.norm(x[:, list(model.velocity_index)], axis=1)
    return np.abs(log.array("u")[:, 0])


def _longest_run(mask) -> int:
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def evaluate_expectations(sc: Scenario, log: ClosedLoopLog, model: PlantModel, ref,
                          wall_time: Optional[float] = None) -> list[Check]:
    """Evaluate the scenario's ``expect`` table against a finished log."""
    exp = dict(sc.expect)
    feas = float(exp.pop("feas_tol", sc.solver.get("feas_tol", 1e-6)))
    t = log.array("t")
    x = log.array("x")
    out: list[Check] = []
    safety = monitor_safety(log, feas)
    for key, val in exp.items():
        if key == "safe":
            out.append(Check(key, safety.safe == bool(val), safety.safe, bool(val)))
        elif key == "violation":
            pos = safety.max_g_violation > 0
            out.append(Check(key, pos == bool(val), safety.max_g_violation, "> 0" if val else "<= 0"))
        elif key == "obstacle_margin":
            out.append(Check(key, safety.max_g_violation <= float(val), safety.max_g_violation, val))
        elif key == "certified":
            out.append(Check(key, (safety.uncertified == 0) == bool(val), safety.uncertified, 0))
        elif key == "lyapunov_pass_rate":
            rep = monitor_lyapunov(log, sc.solver.get("opt_tol", 1e-6))
            out.append(Check(key, rep.checked > 0 and rep.pass_rate >= float(val), rep.pass_rate, val))
        elif key == "tau0":
            target, tol = val
            out.append(Check(key, abs(log.tau[0] - target) <= tol, log.tau[0], f"{target}+-{tol}"))
        elif key == "terminal_position_error":
            idx = list(ref.position_index)
            err = float(np.linalg.norm(x[-1, idx] - ref.position(ref.domain[1])))
            out.append(Check(key, err <= float(val), err, val))
        elif key == "terminal_speed":
            sp = _speed(log, model)
            last = sp[-1] if model.velocity_index else sp[-2]
            out.append(Check(key, last <= float(val), float(last), val))
        elif key == "velocity_max":
            lim, (a, b) = val["value"], val["window"]
            m = (t >= a - 1e-9) & (t <= b + 1e-9)
            vmax = float(_speed(log, model)[m].max())
            out.append(Check(f"{key}[{a},{b}]", vmax <= lim, vmax, lim))
        elif key == "rest":
            (a, b), tol = val["window"], val["tol"]
            m = (t >= a - 1e-9) & (t <= b + 1e-9)
            vmax = float(_speed(log, model)[m].max())
            out.append(Check(f"rest[{a},{b}]", vmax <= tol, vmax, tol))
        elif key == "speed_bound":
            vi = list(model.velocity_index)
            vmax = float(np.abs(x[:, vi]).max())
            out.append(Check(key, vmax <= float(val) + feas, vmax, val))
        elif key == "windup_steps":
            after = float(exp.get("windup_after", 0.0))
            u = log.array("u")[:-1, 0]
            ub = float(model.known.input_ub[0])
            run = _longest_run((u >= ub - 1e-6) & (t[:-1] > after))
            out.append(Check(key, run >= int(val), run, int(val)))
        elif key == "windup_after":
            continue
        elif key == "stage_recovery":
            st = log.array("stage")[:-1]
            g = log.array("g_true")[:-1]
            k_close = int(np.nanargmax(np.where(np.isfinite(g), g, -np.inf))) if np.isfinite(g).any() else 0
            peak = float(np.nanmax(st))
            tail = st[max(k_close, len(st) - max(1, len(st) // 10)):]
            ratio = float(tail.max() / peak) if peak > 0 else 0.0
            out.append(Check(key, ratio <= float(val), ratio, val))
        elif key == "runtime_s":
            if wall_time is not None:
                out.append(Check(key, wall_time <= float(val), round(wall_time, 2), val))
        else:
            raise ConfigurationError(f"{sc.name}: unknown expectation {key!r}")
    return out
