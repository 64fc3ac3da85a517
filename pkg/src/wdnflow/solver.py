"""Successive-linearization (GP-LP) solver for steady network hydraulics.

Every iteration freezes the nonlinear head-loss terms at the previous flows,
assembles the square linear system and solves it exactly.  Heads stay in
meters but flows are rescaled to a working unit (litres per second by
default): each energy row mixes a head with a flow, so the contraction factor
of the iteration depends on that choice.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .assembly import Factorization, LinearizationCoeffs, LinearSystem, assemble, solve_linear
from .errors import Diverged, SingularSystem
from .hydraulics import (
    PDDParams,
    a_f_diagonal,
    a_f_threshold,
    pdd_demand,
)
from .network import IncidencePartition, Network, build_incidence, prune_closed

log = logging.getLogger(__name__)

Termination = Literal["converged", "max_iter", "diverged", "singular"]

# an iterate moving this many times farther than the first step is treated as a blow-up
BLOWUP_FACTOR = 1e6
RATIO_AGREEMENT = 0.1


# --------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class InitialFlows:
    """Starting point: ``zeros``, ``uniform`` (value in m^3/s), ``random`` or ``warm``."""

    kind: Literal["zeros", "uniform", "random", "warm"] = "uniform"
    value: float = 0.03
    seed: int = 0
    low: float = 0.0
    high: float = 0.1
    state: "HydraulicState | None" = None

    @classmethod
    def zeros(cls) -> "InitialFlows":
        return cls("zeros", 0.0)

    @classmethod
    def uniform(cls, q0: float) -> "InitialFlows":
        return cls("uniform", q0)

    @classmethod
    def random(cls, seed: int, low: float = 0.0, high: float = 0.1) -> "InitialFlows":
        return cls("random", seed=seed, low=low, high=high)

    @classmethod
    def warm(cls, state: "HydraulicState") -> "InitialFlows":
        return cls("warm", state=state)


@dataclass(frozen=True)
class AccelPolicy:
    kind: Literal["off", "uniform", "adaptive"] = "off"
    value: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "AccelPolicy":
        text = text.strip().lower()
        if text in ("off", "none", "0"):
            return cls("off")
        if text == "adaptive":
            return cls("adaptive")
        if text.startswith("uniform="):
            return cls("uniform", float(text.split("=", 1)[1]))
        raise ValueError(f"unknown acceleration policy {text!r}")


@dataclass(frozen=True)
class SolverConfig:
    threshold: float = 0.01
    max_iter: int = 1000
    n_step: int = 5
    accel: AccelPolicy = AccelPolicy()
    init: InitialFlows = InitialFlows()
    q_min: float = -math.inf
    q_max: float = math.inf
    a_cap: float = 1000.0
    status_freeze_after: int = 8
    monitor_contraction: bool = False
    gp_base: float = 2.0
    flow_unit: float = 1e-3
    divergence_window: int = 50
    divergence_factor: float = 10.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.gp_base > 1:
            raise ValueError("gp_base must exceed 1")
        if self.n_step < 1:
            raise ValueError("n_step must be at least 1")
        if not self.flow_unit > 0:
            raise ValueError("flow_unit must be positive")


@dataclass
class HydraulicState:
    """Heads (m) per node and flows (m^3/s) per link, keyed by the input ids."""

    node_ids: list[str]
    link_ids: list[str]
    h: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.h.shape != (len(self.node_ids),) or self.q.shape != (len(self.link_ids),):
            raise ValueError("state vectors do not match the id lists")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.h, self.q])

    def head(self, node_id: str) -> float:
        return float(self.h[self.node_ids.index(node_id)])

    def flow(self, link_id: str) -> float:
        return float(self.q[self.link_ids.index(link_id)])

    @property
    def heads(self) -> dict[str, float]:
        return dict(zip(self.node_ids, map(float, self.h)))

    @property
    def flows(self) -> dict[str, float]:
        return dict(zip(self.link_ids, map(float, self.q)))

    @classmethod
    def from_dicts(cls, heads: dict[str, float], flows: dict[str, float]) -> "HydraulicState":
        return cls(list(heads), list(flows), np.array(list(heads.values()), float), np.array(list(flows.values()), float))


@dataclass
class ContractionEstimate:
    norm: float
    iterations: int
    converged: bool


@dataclass
class SolverReport:
    iterations_used: int = 0
    error_trace: list[float] = field(default_factory=list)
    pipe_step_trace: list[float] = field(default_factory=list)
    contraction_trace: list[float] | None = None
    contraction_stalls: int = 0
    status_flip_log: list[dict] = field(default_factory=list)
    final_statuses: dict[str, str] = field(default_factory=dict)
    last_status_change: int = 0
    accel_log: list[dict] = field(default_factory=list)
    termination: Termination = "max_iter"
    wall_time: float = 0.0
    bound_violations: list[str] = field(default_factory=list)
    flow_unit: float = 1e-3
    n_variables: int = 0
    sparsity: float = 0.0

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    def to_dict(self) -> dict:
        return {
            "iterations_used": self.iterations_used,
            "termination": self.termination,
            "wall_time": self.wall_time,
            "error_trace": self.error_trace,
            "pipe_step_trace": self.pipe_step_trace,
            "contraction_trace": self.contraction_trace,
            "contraction_stalls": self.contraction_stalls,
            "status_flip_log": self.status_flip_log,
            "final_statuses": self.final_statuses,
            "accel_log": self.accel_log,
            "bound_violations": self.bound_violations,
            "working_flow_unit_m3s": self.flow_unit,
            "n_variables": self.n_variables,
            "sparsity": self.sparsity,
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        contraction = self.contraction_trace or []
        writer.writerow(["iteration", "error", "pipe_step", "contraction"])
        for i, err in enumerate(self.error_trace):
            writer.writerow(
                [
                    i + 1,
                    repr(err),
                    repr(self.pipe_step_trace[i]) if i < len(self.pipe_step_trace) else "",
                    repr(contraction[i]) if i < len(contraction) else "",
                ]
            )
        return buf.getvalue()


def iteration_error(xi_n: np.ndarray, xi_prev: np.ndarray) -> float:
    xi_n = np.asarray(xi_n, dtype=float)
    xi_prev = np.asarray(xi_prev, dtype=float)
    if xi_n.shape != xi_prev.shape:
        raise ValueError("iterates differ in dimension")
    return float(np.linalg.norm(xi_n - xi_prev))


# --------------------------------------------------------------------------
# working-unit model


class WorkingModel:
    """Network parameters rescaled to working flow units, as flat arrays.

    With flows measured in ``unit`` m^3/s, a loss R*q^mu becomes
    (R*unit^mu)*Q^mu; heads are unchanged.
    """

    def __init__(self, net: Network, unit: float):
        self.net = net
        self.unit = unit
        self.inc: IncidencePartition = build_incidence(net)
        self.n_j = len(net.junctions)
        self.n_h = net.n_heads
        self.n_p = len(net.pipes)
        self.n_m = len(net.pumps)
        self.n_w = len(net.valves)
        self.mu = net.flow_exponent
        self.dw = net.headloss_formula == "D-W"
        self._R_si = net.pipe_resistances()
        self.demand = np.array([j.demand for j in net.junctions]) / unit
        self.pdd_mask = np.array([j.pdd is not None for j in net.junctions], dtype=bool)
        self.pdd = [
            PDDParams(j.pdd.d_dsgn / unit, j.pdd.h_ser, j.pdd.h_min, j.pdd.gamma) if j.pdd is not None else None
            for j in net.junctions
        ]
        pumps = net.pumps
        self.pump_h0 = np.array([m.h0 for m in pumps])
        self.pump_nu = np.array([m.nu for m in pumps])
        self.pump_r = np.array([m.r * unit**m.nu for m in pumps])
        self.pump_s = np.array([m.speed for m in pumps])
        self.valve_kind = [v.kind for v in net.valves]
        self.valve_loss = np.array([v.minor_loss * unit**2 for v in net.valves])
        self.valve_gpv_R = np.array([v.resistance * unit**v.exponent / v.openness for v in net.valves])
        self.valve_gpv_mu = np.array([v.exponent for v in net.valves])
        elev = net.elevations()
        self.valve_head_set = np.array(
            [elev[v.end] + v.setting if v.kind == "PRV" else np.nan for v in net.valves]
        )
        self.valve_flow_set = np.array([v.setting / unit if v.kind == "FCV" else np.nan for v in net.valves])
        index = net.node_index()
        self.start = np.array([index[k.start] for k in net.links], dtype=int)
        self.end = np.array([index[k.end] for k in net.links], dtype=int)

    def pipe_R(self, Q: np.ndarray) -> np.ndarray:
        """Working-unit resistances; Darcy-Weisbach refreshes friction from the current flows."""
        if self.dw and self.n_p:
            R_si = self.net.pipe_resistances(flows=Q[: self.n_p] * self.unit)
        else:
            R_si = self._R_si
        return R_si * self.unit**self.mu

    def coefficients(self, xi: np.ndarray, statuses: tuple[str, ...]) -> LinearizationCoeffs:
        h = xi[: self.n_h]
        Q = xi[self.n_h :]
        Qp = Q[: self.n_p]
        R = self.pipe_R(Q)
        c_pipe = Qp * (R * np.abs(Qp) ** (self.mu - 1.0) - 1.0)

        Qm = np.maximum(Q[self.n_p : self.n_p + self.n_m], 0.0)
        s = self.pump_s
        c1 = -(s**2) * self.pump_h0
        c2 = self.pump_r * Qm ** (self.pump_nu - 1.0) * s ** (2.0 - self.pump_nu)

        Qw = Q[self.n_p + self.n_m :]
        c_valve = np.empty(self.n_w)
        for w, (kind, status) in enumerate(zip(self.valve_kind, statuses)):
            q = Qw[w]
            if status == "ACTIVE" and kind == "PRV":
                c_valve[w] = self.valve_head_set[w]
            elif status == "ACTIVE" and kind == "FCV":
                c_valve[w] = self.valve_flow_set[w]
            elif kind == "GPV":
                c_valve[w] = self.valve_gpv_R[w] * q * abs(q) ** (self.valve_gpv_mu[w] - 1.0) - q
            else:
                c_valve[w] = q * (self.valve_loss[w] * abs(q) - 1.0)

        junction = self.demand.copy()
        for i in np.flatnonzero(self.pdd_mask):
            junction[i] = pdd_demand(h[i], self.pdd[i]) - h[i]
        return LinearizationCoeffs(c_pipe, c1, c2, c_valve, junction, self.pdd_mask if self.pdd_mask.any() else None)

    def pipe_like(self, statuses: tuple[str, ...]) -> np.ndarray:
        """Flow indices of pipes and open valves (the links with a loss row)."""
        open_valves = [
            self.n_p + self.n_m + w
            for w, (kind, status) in enumerate(zip(self.valve_kind, statuses))
            if kind == "GPV" or status == "OPEN"
        ]
        return np.concatenate([np.arange(self.n_p), np.array(open_valves, dtype=int)]).astype(int)

    def a_f(self, Q: np.ndarray, statuses: tuple[str, ...]) -> np.ndarray:
        idx = self.pipe_like(statuses)
        R = self.pipe_R(Q)
        out = np.empty(idx.size)
        out[: self.n_p] = a_f_diagonal(Q[: self.n_p], R, self.mu)
        for i, k in enumerate(idx[self.n_p :], start=self.n_p):
            w = k - self.n_p - self.n_m
            if self.valve_kind[w] == "GPV":
                mu = self.valve_gpv_mu[w]
                out[i] = mu * self.valve_gpv_R[w] * abs(Q[k]) ** (mu - 1.0) - 1.0
            else:
                out[i] = 2.0 * self.valve_loss[w] * abs(Q[k]) - 1.0
        return out


# --------------------------------------------------------------------------
# valve status logic


@dataclass
class StatusTracker:
    """Resolves PRV/FCV statuses and freezes elements that keep flipping."""

    initial: tuple[str, ...]
    fixed: tuple[bool, ...]
    freeze_after: int
    flips: list[int] = field(default_factory=list)
    history: list[list[str]] = field(default_factory=list)
    frozen: list[bool] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.initial)
        self.flips = [0] * n
        self.history = [[s] for s in self.initial]
        self.frozen = list(self.fixed)


def update_statuses(
    h: np.ndarray,
    q: np.ndarray,
    model: WorkingModel,
    statuses: tuple[str, ...],
    tracker: StatusTracker | None = None,
    tol: float = 1e-9,
) -> tuple[str, ...]:
    """Next valve statuses from the previous iterate (heads in m, flows in working units).

    PRV: an active valve opens when its upstream head drops below the
    setting; an open valve activates when its downstream head exceeds it.
    FCV: an active valve opens when the upstream head falls below the
    downstream head; an open valve activates once its flow reaches the setting.
    """
    out = list(statuses)
    offset = model.n_p + model.n_m
    for w, kind in enumerate(model.valve_kind):
        if tracker is not None and tracker.frozen[w]:
            continue
        status = statuses[w]
        k = offset + w
        hi, hj = h[model.start[k]], h[model.end[k]]
        new = status
        if kind == "PRV":
            target = model.valve_head_set[w]
            if status == "ACTIVE" and hi < target - tol:
                new = "OPEN"
            elif status == "OPEN" and hj > target + tol:
                new = "ACTIVE"
        elif kind == "FCV":
            if status == "ACTIVE" and hi < hj - tol:
                new = "OPEN"
            elif status == "OPEN" and q[k] >= model.valve_flow_set[w] - tol:
                new = "ACTIVE"
        if tracker is not None and new != status:
            tracker.flips[w] += 1
            tracker.history[w].append(new)
            if tracker.flips[w] >= tracker.freeze_after:
                counts = Counter(tracker.history[w])
                new = max(("OPEN", "ACTIVE"), key=lambda s: (counts[s], s == new))
                tracker.frozen[w] = True
        out[w] = new
    return tuple(out)


# --------------------------------------------------------------------------
# contraction monitor


def check_contraction(
    system: LinearSystem,
    a_f: np.ndarray,
    pipe_rows: np.ndarray,
    factor: Factorization | None = None,
    max_iter: int = 200,
    rtol: float = 1e-6,
) -> ContractionEstimate:
    """Spectral-norm estimate of the pipe-flow iteration map inv(A)[pipe flows, pipe rows] @ diag(a_f).

    ``pipe_rows`` are positions in the system that are both a loss row and its
    own flow column.  Only triangular solves with the LU factors are used.
    """
    factor = factor or Factorization(system)
    a_f = np.asarray(a_f, dtype=float)
    idx = np.asarray(pipe_rows, dtype=int)
    m = idx.size
    if m == 0 or not np.any(a_f):
        return ContractionEstimate(0.0, 0, True)
    n = system.size

    def apply(x):
        rhs = np.zeros(n)
        rhs[idx] = a_f * x
        return factor.solve(rhs)[idx]

    def apply_t(z):
        rhs = np.zeros(n)
        rhs[idx] = z
        return a_f * factor.solve(rhs, transpose=True)[idx]

    rng = np.random.default_rng(12345)
    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    estimate, best = 0.0, 0.0
    for it in range(1, max_iter + 1):
        w = apply_t(apply(v))
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return ContractionEstimate(0.0, it, True)
        new = math.sqrt(norm_w)
        best = max(best, new)
        v = w / norm_w
        if abs(new - estimate) <= rtol * new:
            return ContractionEstimate(new, it, True)
        estimate = new
    return ContractionEstimate(best, max_iter, False)


# --------------------------------------------------------------------------
# acceleration


def acceleration_bounds(
    q_prev,
    dq_prev,
    R,
    mu,
    q_min=-math.inf,
    q_max=math.inf,
) -> tuple[np.ndarray, np.ndarray]:
    """Open interval of extrapolation factors a keeping q + a*dq admissible.

    Two requirements are intersected: |q + a*dq| stays below the flow at which
    the a_f_diagonal entry reaches zero, and q + a*dq stays within
    [q_min, q_max].  When dq is zero the interval is unbounded.
    """
    q = np.atleast_1d(np.asarray(q_prev, dtype=float))
    dq = np.atleast_1d(np.asarray(dq_prev, dtype=float))
    t = np.broadcast_to(a_f_threshold(R, mu), q.shape)
    q_min = np.broadcast_to(np.asarray(q_min, dtype=float), q.shape)
    q_max = np.broadcast_to(np.asarray(q_max, dtype=float), q.shape)
    lo = np.full(q.shape, -math.inf)
    hi = np.full(q.shape, math.inf)
    nz = dq != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        for bound_lo, bound_hi in ((-t, t), (q_min, q_max)):
            a1 = (bound_lo - q) / dq
            a2 = (bound_hi - q) / dq
            lo = np.where(nz, np.maximum(lo, np.minimum(a1, a2)), lo)
            hi = np.where(nz, np.minimum(hi, np.maximum(a1, a2)), hi)
    # a zero step keeps q fixed: admissible everywhere iff q itself is admissible
    inside = (np.abs(q) < t) & (q >= q_min) & (q <= q_max)
    lo = np.where(nz | inside, lo, math.inf)
    hi = np.where(nz | inside, hi, -math.inf)
    return lo, hi


def choose_adaptive_factors(
    lo: np.ndarray,
    hi: np.ndarray,
    ratio: np.ndarray,
    a_cap: float,
    damping: float,
) -> np.ndarray:
    """Per-link extrapolation factors from observed step ratios.

    A link whose successive flow steps shrink geometrically by ``ratio`` gets
    the tail sum ratio/(1-ratio), scaled by ``damping`` and pulled strictly
    inside the admissible interval intersected with [0, a_cap].
    """
    target = np.where((ratio > 0) & (ratio < 1), ratio / np.maximum(1.0 - ratio, 1e-12), 0.0) * damping
    lower = np.maximum(lo, 0.0)
    upper = np.minimum(hi, a_cap)
    width = upper - lower
    finite_width = np.isfinite(width)
    margin = np.where(finite_width, 1e-3 * np.maximum(width, 0.0), 0.0)
    hi_eff = np.where(hi <= a_cap, upper - margin, upper)
    lo_eff = np.where(lo >= 0.0, lower + margin, lower)
    a = np.clip(target, lo_eff, hi_eff)
    a = np.where((lo_eff < hi_eff) & (target > 0), a, 0.0)
    return a


@dataclass
class InitialDiagnostics:
    invertible: bool
    contraction: ContractionEstimate | None
    implicated_rows: list[str]
    n_variables: int
    sparsity: float
    message: str = ""

    def to_dict(self) -> dict:
        c = self.contraction
        return {
            "invertible": self.invertible,
            "contraction_estimate": None if c is None else c.norm,
            "contraction_below_one": None if c is None else c.norm < 1.0,
            "power_iterations": None if c is None else c.iterations,
            "implicated_rows": self.implicated_rows,
            "n_variables": self.n_variables,
            "sparsity": self.sparsity,
            "message": self.message,
        }


def diagnose_initial_point(net: Network, cfg: SolverConfig | None = None) -> InitialDiagnostics:
    """Factorize the first linear system and estimate the contraction factor there, without iterating."""
    cfg = cfg or SolverConfig()
    work_net = prune_closed(net)
    model = WorkingModel(work_net, cfg.flow_unit)
    statuses = tuple(v.status if v.kind != "GPV" else "OPEN" for v in work_net.valves)
    xi = _initial_state(model, net, cfg)
    system = assemble(work_net, model.inc, model.coefficients(xi, statuses), statuses)
    try:
        factor = Factorization(system)
    except SingularSystem as exc:
        return InitialDiagnostics(False, None, list(exc.rows), system.size, system.sparsity, str(exc))
    pipe_idx = model.pipe_like(statuses)
    est = check_contraction(system, model.a_f(xi[model.n_h :], statuses), model.n_h + pipe_idx, factor)
    return InitialDiagnostics(True, est, [], system.size, system.sparsity)


def linear_system_at(
    net: Network,
    cfg: SolverConfig | None = None,
    state: HydraulicState | None = None,
    statuses: dict[str, str] | None = None,
) -> LinearSystem:
    """The linear system linearized at ``state`` (or the configured initial point), in working units."""
    cfg = cfg or SolverConfig()
    work_net = prune_closed(net)
    model = WorkingModel(work_net, cfg.flow_unit)
    current = tuple(v.status if v.kind != "GPV" else "OPEN" for v in work_net.valves)
    if statuses:
        current = tuple(statuses.get(v.id, s) for v, s in zip(work_net.valves, current))
    if state is None:
        xi = _initial_state(model, net, cfg)
    else:
        h = [state.head(nid) for nid in work_net.node_ids]
        q = [state.flow(lid) / model.unit for lid in work_net.link_ids]
        xi = np.array(h + q, dtype=float)
    return assemble(work_net, model.inc, model.coefficients(xi, current), current)


# --------------------------------------------------------------------------
# main iteration


def _initial_state(model: WorkingModel, net_full: Network, cfg: SolverConfig) -> np.ndarray:
    n_h, n_q = model.n_h, model.net.n_flows
    init = cfg.init
    fixed = model.net.fixed_heads()
    h = np.full(n_h, float(fixed.max()) if fixed.size else 0.0)
    h[model.n_j :] = fixed
    if init.kind == "zeros":
        q = np.zeros(n_q)
    elif init.kind == "uniform":
        q = np.full(n_q, init.value)
    elif init.kind == "random":
        rng = np.random.default_rng(init.seed)
        q = rng.uniform(init.low, init.high, size=net_full.n_flows)
        keep = {lid: i for i, lid in enumerate(net_full.link_ids)}
        q = q[[keep[lid] for lid in model.net.link_ids]]
    elif init.kind == "warm":
        state = init.state
        q = np.array([state.flow(lid) for lid in model.net.link_ids])
        h = np.array([state.head(nid) for nid in model.net.node_ids])
    else:
        raise ValueError(f"unknown initialisation {init.kind!r}")
    return np.concatenate([h, q / model.unit])


def run(net: Network, cfg: SolverConfig | None = None) -> tuple[HydraulicState, SolverReport]:
    """Iterate linearize-assemble-solve until successive iterates agree within ``cfg.threshold``.

    The error norm is measured in working units (m and ``cfg.flow_unit``).
    Closed links are pruned and reported with zero flow.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    work_net = prune_closed(net)
    model = WorkingModel(work_net, cfg.flow_unit)
    n_h = model.n_h
    report = SolverReport(flow_unit=cfg.flow_unit, n_variables=work_net.n_variables)
    if cfg.monitor_contraction:
        report.contraction_trace = []

    statuses = tuple(v.status if v.kind != "GPV" else "OPEN" for v in work_net.valves)
    tracker = StatusTracker(statuses, tuple(v.fixed for v in work_net.valves), cfg.status_freeze_after)
    xi_lin = _initial_state(model, net, cfg)
    xi = xi_lin.copy()
    prev_pipe_step: np.ndarray | None = None
    prev2_pipe_step: np.ndarray | None = None
    last_accel_iter = -10
    damping = 1.0
    rising_after_accel = 0
    err_at_accel = math.inf
    policy = cfg.accel

    try:
        for n in range(1, cfg.max_iter + 1):
            if n > 1:
                new_statuses = update_statuses(xi_lin[:n_h], xi_lin[n_h:], model, statuses, tracker)
                for w, (old, new) in enumerate(zip(statuses, new_statuses)):
                    if old != new:
                        report.status_flip_log.append(
                            {"iteration": n, "valve": work_net.valves[w].id, "from": old, "to": new,
                             "frozen": tracker.frozen[w]}
                        )
                        report.last_status_change = n
                statuses = new_statuses
            coeffs = model.coefficients(xi_lin, statuses)
            if not all(np.all(np.isfinite(c)) for c in (coeffs.pipe, coeffs.pump_c2, coeffs.valve, coeffs.junction)):
                report.termination = "diverged"
                raise Diverged(f"linearization constants overflowed at iteration {n}")
            system = assemble(work_net, model.inc, coeffs, statuses)
            factor = Factorization(system)
            xi = solve_linear(system, factor)
            if n == 1:
                report.sparsity = system.sparsity

            if cfg.monitor_contraction:
                pipe_idx = model.pipe_like(statuses)
                est = check_contraction(system, model.a_f(xi_lin[n_h:], statuses), n_h + pipe_idx, factor)
                report.contraction_trace.append(est.norm)
                report.contraction_stalls += 0 if est.converged else 1

            step = xi - xi_lin
            err = float(np.linalg.norm(step))
            report.error_trace.append(err)
            pipe_idx = model.pipe_like(statuses)
            pipe_step = step[n_h + pipe_idx]
            report.pipe_step_trace.append(float(np.linalg.norm(pipe_step)))
            report.iterations_used = n

            if not math.isfinite(err):
                report.termination = "diverged"
                raise Diverged(f"non-finite iterate at iteration {n}")
            if err < cfg.threshold and report.last_status_change != n:
                report.termination = "converged"
                break
            if err > BLOWUP_FACTOR * max(report.error_trace[0], cfg.threshold):
                report.termination = "diverged"
                raise Diverged(f"error exploded to {err:.3e} at iteration {n}")
            w = cfg.divergence_window
            # best error per n_step block, and only while still rising, so the decay
            # after an accelerated jump is not mistaken for growth
            k = cfg.n_step
            trace = report.error_trace
            rising = err > trace[n - 2]
            if rising and n > w + k and min(trace[n - k :]) > cfg.divergence_factor * min(trace[n - w - k : n - w]):
                report.termination = "diverged"
                raise Diverged(f"error grew more than {cfg.divergence_factor}x over {w} iterations")

            next_lin = xi
            statuses_stable = report.last_status_change < n
            if (
                policy.kind != "off"
                and n % cfg.n_step == 0
                and statuses_stable
                and prev2_pipe_step is not None
                and prev2_pipe_step.shape == pipe_step.shape
            ):
                # compare like with like: the error at the end of one accelerated cycle vs the previous one
                if last_accel_iter == n - cfg.n_step:
                    if err > err_at_accel:
                        rising_after_accel += 1
                    else:
                        rising_after_accel = 0
                        damping = min(1.0, 2.0 * damping)
                    if rising_after_accel >= 2:
                        damping *= 0.5
                        rising_after_accel = 0
                        log.debug("halving acceleration factors at iteration %d", n)
                err_at_accel = err
                a = _acceleration_factors(
                    policy, model, xi, pipe_idx, (prev2_pipe_step, prev_pipe_step, pipe_step), cfg, damping
                )
                if np.any(a):
                    next_lin = xi.copy()
                    next_lin[n_h + pipe_idx] += a * pipe_step
                    last_accel_iter = n
                    report.accel_log.append(
                        {"iteration": n, "mean": float(a.mean()), "max": float(a.max()), "damping": damping}
                    )
            prev2_pipe_step, prev_pipe_step = prev_pipe_step, pipe_step
            xi_lin = next_lin
    except SingularSystem as exc:
        report.termination = "singular"
        report.wall_time = time.perf_counter() - t0
        exc.report = report
        raise
    except Diverged as exc:
        report.wall_time = time.perf_counter() - t0
        exc.report = report
        exc.state = _to_state(net, work_net, xi, model)
        raise

    report.final_statuses = {v.id: s for v, s in zip(work_net.valves, statuses)}
    state = _to_state(net, work_net, xi, model)
    report.bound_violations = _bound_violations(work_net, state, cfg)
    report.wall_time = time.perf_counter() - t0
    return state, report


def _acceleration_factors(policy, model, xi, pipe_idx, steps, cfg, damping) -> np.ndarray:
    older, prev_step, step = steps
    if policy.kind == "uniform":
        return np.full(step.size, policy.value * damping)
    n_h = model.n_h
    Q = xi[n_h + pipe_idx]
    R, mu = _pipe_like_resistance(model, xi[n_h:], pipe_idx)
    unit = model.unit
    lo, hi = acceleration_bounds(Q, step, R, mu, cfg.q_min / unit, cfg.q_max / unit)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(prev_step != 0, step / prev_step, 0.0)
        earlier = np.where(older != 0, prev_step / older, 0.0)
    # extrapolate only links whose steps already shrink geometrically
    settled = np.abs(ratio - earlier) <= RATIO_AGREEMENT * np.abs(1.0 - ratio)
    ratio = np.where(settled, ratio, 0.0)
    a = choose_adaptive_factors(lo, hi, ratio, cfg.a_cap, damping)
    chosen = a > 0
    assert np.all((a[chosen] > lo[chosen]) & (a[chosen] < hi[chosen])), "acceleration factor left its interval"
    return a


def _pipe_like_resistance(model: WorkingModel, Q: np.ndarray, pipe_idx: np.ndarray):
    R = np.empty(pipe_idx.size)
    mu = np.empty(pipe_idx.size)
    R[: model.n_p] = model.pipe_R(Q)
    mu[: model.n_p] = model.mu
    for i, k in enumerate(pipe_idx[model.n_p :], start=model.n_p):
        w = k - model.n_p - model.n_m
        if model.valve_kind[w] == "GPV":
            R[i], mu[i] = model.valve_gpv_R[w], model.valve_gpv_mu[w]
        else:
            R[i], mu[i] = model.valve_loss[w], 2.0
    return R, mu


def _to_state(net: Network, work_net: Network, xi: np.ndarray, model: WorkingModel) -> HydraulicState:
    h = xi[: model.n_h]
    q_open = dict(zip(work_net.link_ids, xi[model.n_h :] * model.unit))
    q = np.array([q_open.get(lid, 0.0) for lid in net.link_ids])
    return HydraulicState(list(net.node_ids), list(net.link_ids), h.copy(), q)


def _bound_violations(net: Network, state: HydraulicState, cfg: SolverConfig, tol: float = 1e-9) -> list[str]:
    out = []
    for m in net.pumps:
        q = state.flow(m.id)
        if q < -tol:
            out.append(f"pump {m.id}: negative flow {q:.6g} m3/s")
        elif m.speed**2 * m.h0 - m.r * m.speed ** (2 - m.nu) * max(q, 0.0) ** m.nu < -tol:
            out.append(f"pump {m.id}: operating beyond zero-head flow")
    for v in net.valves:
        if v.kind == "PRV" and state.flow(v.id) < -tol:
            out.append(f"valve {v.id}: reverse flow through PRV")
    for lid, q in state.flows.items():
        if q < cfg.q_min - tol or q > cfg.q_max + tol:
            out.append(f"link {lid}: flow {q:.6g} outside [{cfg.q_min}, {cfg.q_max}]")
    return out
