"""Independent verification: nonlinear residuals, a damped Newton solver and error metrics.

Nothing here calls the linearization code; the residuals use the nonlinear
element relations directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import bisect

from .errors import DimensionMismatch, NewtonStall, SingularSystem
from .hydraulics import pdd_demand, pdd_demand_derivative, pipe_resistance
from .network import Network, prune_closed
from .solver import HydraulicState

JACOBIAN_EPS = 1e-8


@dataclass
class NewtonResult:
    state: HydraulicState
    iterations: int
    residual_norm: float
    statuses: tuple[str, ...]
    status_rounds: int = 1


class _Residual:
    """Residual and Jacobian of the full nonlinear system in SI units."""

    def __init__(self, net: Network, statuses: tuple[str, ...]):
        self.net = net
        self.statuses = statuses
        self.n_j = len(net.junctions)
        self.n_h = net.n_heads
        self.n_p = len(net.pipes)
        self.n_m = len(net.pumps)
        self.n_q = net.n_flows
        idx = net.node_index()
        self.start = np.array([idx[k.start] for k in net.links], dtype=int)
        self.end = np.array([idx[k.end] for k in net.links], dtype=int)
        self.mu = net.flow_exponent
        self.fixed = net.fixed_heads()
        self.demand = np.array([j.demand for j in net.junctions])
        self.elev = net.elevations()
        self.dw = net.headloss_formula == "D-W"
        self.R = net.pipe_resistances()
        if self.dw:
            self.L = np.array([p.length for p in net.pipes])
            self.D = np.array([p.diameter for p in net.pipes])
            self.C = np.array([p.roughness for p in net.pipes])

    def pipe_loss(self, q: np.ndarray) -> np.ndarray:
        if self.dw:
            R = np.atleast_1d(pipe_resistance(self.L, self.D, self.C, "D-W", flow=q))
            return R * q * np.abs(q)
        return self.R * q * np.abs(q) ** (self.mu - 1.0)

    def pipe_slope(self, q: np.ndarray) -> np.ndarray:
        if self.dw:
            step = 1e-7 * (1.0 + np.abs(q))
            return (self.pipe_loss(q + step) - self.pipe_loss(q - step)) / (2.0 * step)
        qa = np.maximum(np.abs(q), JACOBIAN_EPS)
        return self.mu * self.R * qa ** (self.mu - 1.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        net = self.net
        h, q = x[: self.n_h], x[self.n_h :]
        F = np.zeros(self.n_h + self.n_q)
        np.add.at(F, self.start, -q)
        np.add.at(F, self.end, q)
        F[: self.n_j] -= self.demand
        for i, j in enumerate(net.junctions):
            if j.pdd is not None:
                F[i] += self.demand[i] - pdd_demand(h[i], j.pdd)
        F[self.n_j : self.n_h] = h[self.n_j :] - self.fixed
        dh = h[self.start] - h[self.end]
        rows = self.n_h + np.arange(self.n_q)
        F[rows[: self.n_p]] = dh[: self.n_p] - self.pipe_loss(q[: self.n_p])
        for m, pump in enumerate(net.pumps):
            k = self.n_p + m
            s = pump.speed
            gain = -(s**2) * pump.h0 + pump.r * s ** (2 - pump.nu) * q[k] * abs(q[k]) ** (pump.nu - 1)
            F[rows[k]] = dh[k] - gain
        for w, (valve, status) in enumerate(zip(net.valves, self.statuses)):
            k = self.n_p + self.n_m + w
            if status == "ACTIVE" and valve.kind == "PRV":
                F[rows[k]] = h[self.end[k]] - (self.elev[valve.end] + valve.setting)
            elif status == "ACTIVE" and valve.kind == "FCV":
                F[rows[k]] = q[k] - valve.setting
            elif valve.kind == "GPV":
                F[rows[k]] = dh[k] - valve.resistance / valve.openness * q[k] * abs(q[k]) ** (valve.exponent - 1)
            else:
                F[rows[k]] = dh[k] - valve.minor_loss * q[k] * abs(q[k])
        return F

    def jacobian(self, x: np.ndarray) -> sp.csc_matrix:
        net = self.net
        h, q = x[: self.n_h], x[self.n_h :]
        rows, cols, vals = [], [], []
        qcol = self.n_h + np.arange(self.n_q)
        # mass balance only; fixed-head rows carry no flow terms
        for k in range(self.n_q):
            for node, sign in ((self.start[k], -1.0), (self.end[k], 1.0)):
                if node < self.n_j:
                    rows.append(node)
                    cols.append(qcol[k])
                    vals.append(sign)
        for i, j in enumerate(net.junctions):
            if j.pdd is not None:
                rows.append(i)
                cols.append(i)
                vals.append(-pdd_demand_derivative(h[i], j.pdd))
        for r in range(self.n_j, self.n_h):
            rows.append(r)
            cols.append(r)
            vals.append(1.0)
        slopes = np.zeros(self.n_q)
        slopes[: self.n_p] = self.pipe_slope(q[: self.n_p])
        for m, pump in enumerate(net.pumps):
            k = self.n_p + m
            qa = max(abs(q[k]), JACOBIAN_EPS)
            slopes[k] = pump.nu * pump.r * pump.speed ** (2 - pump.nu) * qa ** (pump.nu - 1)
        for k in range(self.n_q):
            row = self.n_h + k
            if k >= self.n_p + self.n_m:
                w = k - self.n_p - self.n_m
                valve, status = net.valves[w], self.statuses[w]
                if status == "ACTIVE" and valve.kind == "PRV":
                    rows.append(row)
                    cols.append(self.end[k])
                    vals.append(1.0)
                    continue
                if status == "ACTIVE" and valve.kind == "FCV":
                    rows.append(row)
                    cols.append(qcol[k])
                    vals.append(1.0)
                    continue
                qa = max(abs(q[k]), JACOBIAN_EPS)
                if valve.kind == "GPV":
                    slopes[k] = valve.exponent * valve.resistance / valve.openness * qa ** (valve.exponent - 1)
                else:
                    slopes[k] = 2.0 * valve.minor_loss * qa
            rows += [row, row, row]
            cols += [self.start[k], self.end[k], qcol[k]]
            vals += [1.0, -1.0, -slopes[k]]
        n = self.n_h + self.n_q
        return sp.csc_matrix((vals, (rows, cols)), shape=(n, n))


def _valve_statuses(net: Network, statuses=None) -> tuple[str, ...]:
    if statuses is None:
        return tuple("OPEN" if v.kind == "GPV" else v.status for v in net.valves)
    if isinstance(statuses, dict):
        return tuple(statuses.get(v.id, v.status) for v in net.valves)
    return tuple(statuses)


def nonlinear_residuals(net: Network, state: HydraulicState, statuses=None) -> np.ndarray:
    """Residuals of every row (mass balance, fixed heads, element relations) in SI units.

    Closed links are pruned first, so the row order matches the assembled
    linear system of the pruned network.
    """
    work = prune_closed(net)
    statuses = _valve_statuses(work, statuses)
    try:
        h = np.array([state.head(nid) for nid in work.node_ids])
        q = np.array([state.flow(lid) for lid in work.link_ids])
    except ValueError as exc:
        raise DimensionMismatch(f"state does not cover the network: {exc}") from None
    return _Residual(work, statuses)(np.concatenate([h, q]))


def _newton_fixed(
    work: Network, statuses: tuple[str, ...], x0: np.ndarray, tol: float, max_iter: int
) -> tuple[np.ndarray, int, float]:
    F = _Residual(work, statuses)
    x = x0.copy()
    r = F(x)
    norm = float(np.max(np.abs(r))) if r.size else 0.0
    for it in range(max_iter + 1):
        if norm <= tol:
            return x, it, norm
        if it == max_iter:
            break
        J = F.jacobian(x)
        try:
            with np.errstate(all="ignore"):
                dx = spla.spsolve(J, -r)
        except RuntimeError as exc:
            raise SingularSystem(f"Newton Jacobian is singular ({exc})") from None
        if not np.all(np.isfinite(dx)):
            raise SingularSystem("Newton Jacobian is singular")
        step = 1.0
        merit = float(np.linalg.norm(r))
        for _ in range(30):
            x_try = x + step * dx
            r_try = F(x_try)
            if float(np.linalg.norm(r_try)) < merit:
                break
            step *= 0.5
        x, r = x_try, r_try
        norm = float(np.max(np.abs(r)))
    raise NewtonStall(f"Newton did not reach residual {tol:g} within {max_iter} iterations (last {norm:.3e})")


def _resolve(work: Network, x: np.ndarray, statuses: tuple[str, ...]) -> tuple[str, ...]:
    n_h = work.n_heads
    idx = work.node_index()
    elev = work.elevations()
    offset = len(work.pipes) + len(work.pumps)
    out = list(statuses)
    for w, v in enumerate(work.valves):
        if v.fixed or v.kind == "GPV":
            continue
        hi, hj = x[idx[v.start]], x[idx[v.end]]
        q = x[n_h + offset + w]
        if v.kind == "PRV":
            target = elev[v.end] + v.setting
            if statuses[w] == "ACTIVE" and hi < target:
                out[w] = "OPEN"
            elif statuses[w] == "OPEN" and hj > target:
                out[w] = "ACTIVE"
        else:
            if statuses[w] == "ACTIVE" and hi < hj:
                out[w] = "OPEN"
            elif statuses[w] == "OPEN" and q >= v.setting:
                out[w] = "ACTIVE"
    return tuple(out)


def newton_iterate(
    net: Network,
    statuses=None,
    init: HydraulicState | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
    resolve_statuses: bool | None = None,
) -> NewtonResult:
    """Damped Newton on the nonlinear system.

    With explicit ``statuses`` the valve rows are fixed; otherwise PRV/FCV
    statuses are re-resolved between Newton solves until they settle.
    """
    work = prune_closed(net)
    current = _valve_statuses(work, statuses)
    if resolve_statuses is None:
        resolve_statuses = statuses is None
    fixed = work.fixed_heads()
    if init is not None:
        h = np.array([init.head(nid) for nid in work.node_ids])
        q = np.array([init.flow(lid) for lid in work.link_ids])
    else:
        h = np.full(work.n_heads, float(fixed.max()) if fixed.size else 0.0)
        h[len(work.junctions) :] = fixed
        q = np.full(work.n_flows, 0.03)
    x = np.concatenate([h, q])
    total = 0
    seen = {current}
    rounds = 0
    for rounds in range(1, 31):
        x, its, norm = _newton_fixed(work, current, x, tol, max_iter)
        total += its
        if not resolve_statuses:
            break
        nxt = _resolve(work, x, current)
        if nxt == current or nxt in seen:
            break
        seen.add(nxt)
        current = nxt
    n_h = work.n_heads
    q_open = dict(zip(work.link_ids, x[n_h:]))
    state = HydraulicState(
        list(net.node_ids), list(net.link_ids), x[:n_h].copy(), np.array([q_open.get(l, 0.0) for l in net.link_ids])
    )
    return NewtonResult(state, total, norm, current, rounds)


def newton_solve(net: Network, statuses=None, init: HydraulicState | None = None, tol: float = 1e-8,
                 max_iter: int = 200) -> HydraulicState:
    return newton_iterate(net, statuses, init, tol, max_iter).state


def series_pump_pipe_bisection(net: Network, tol: float = 1e-14) -> HydraulicState:
    """Closed-form reduction for reservoir - pump - junction - pipe - fixed-head node.

    Eliminating heads leaves one scalar equation in the pump flow, solved by
    bisection.  Only valid for that exact topology.
    """
    if not (len(net.junctions) == 1 and len(net.pumps) == 1 and len(net.pipes) == 1 and not net.valves):
        raise ValueError("network is not a single pump-junction-pipe chain")
    pump, pipe, junc = net.pumps[0], net.pipes[0], net.junctions[0]
    heads = {r.id: r.head for r in net.reservoirs} | {t.id: t.head for t in net.tanks}
    if pump.end != junc.id or pipe.start != junc.id:
        raise ValueError("expected the pump to feed the junction and the pipe to leave it")
    h_in, h_out = heads[pump.start], heads[pipe.end]
    R = net.pipe_resistances()[0]
    mu = net.flow_exponent
    s = pump.speed
    d = junc.demand

    def excess(qm):
        qp = qm - d
        lift = s**2 * pump.h0 - pump.r * s ** (2 - pump.nu) * qm**pump.nu
        return h_in + lift - h_out - R * qp * abs(qp) ** (mu - 1)

    hi = s * (pump.h0 / pump.r) ** (1 / pump.nu)
    qm = bisect(excess, 0.0, hi, xtol=tol, maxiter=500)
    h_j = h_in + s**2 * pump.h0 - pump.r * s ** (2 - pump.nu) * qm**pump.nu
    node_h = {junc.id: h_j, **heads}
    link_q = {pump.id: qm, pipe.id: qm - d}
    return HydraulicState(
        list(net.node_ids), list(net.link_ids),
        np.array([node_h[n] for n in net.node_ids]), np.array([link_q[l] for l in net.link_ids]),
    )


# --------------------------------------------------------------------------
# metrics


@dataclass
class ErrorMetrics:
    labels: list[str]
    AE: np.ndarray
    RE: list[float | None]
    EN: float

    def fraction_within(self, lo: float = 0.0, hi: float = 0.5) -> float:
        if self.AE.size == 0:
            return 1.0
        return float(np.mean((self.AE >= lo) & (self.AE <= hi)))

    def histogram(self, edges=(0.0, 1e-3, 1e-2, 0.1, 0.5, 1.0, math.inf)) -> list[dict]:
        out = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            count = int(np.sum((self.AE >= lo) & (self.AE < hi))) if hi != edges[-1] else int(np.sum(self.AE >= lo))
            out.append({"lo": lo, "hi": None if math.isinf(hi) else hi, "count": count})
        return out

    def to_dict(self) -> dict:
        return {
            "EN": self.EN,
            "max_AE": float(self.AE.max()) if self.AE.size else 0.0,
            "fraction_AE_within_0_0.5": self.fraction_within(0.0, 0.5),
            "AE_histogram": self.histogram(),
            "AE": dict(zip(self.labels, map(float, self.AE))),
            "RE_percent": dict(zip(self.labels, self.RE)),
        }


def compare(a: HydraulicState, b: HydraulicState) -> ErrorMetrics:
    """Per-entry absolute and relative error of ``a`` against reference ``b``."""
    for kind, ids_a, ids_b in (("node", a.node_ids, b.node_ids), ("link", a.link_ids, b.link_ids)):
        missing = [i for i in ids_a if i not in set(ids_b)] + [i for i in ids_b if i not in set(ids_a)]
        if missing:
            raise DimensionMismatch(f"{kind} id {missing[0]!r} is not present in both states")
    hb = np.array([b.head(n) for n in a.node_ids])
    qb = np.array([b.flow(k) for k in a.link_ids])
    va = np.concatenate([a.h, a.q])
    vb = np.concatenate([hb, qb])
    ae = np.abs(va - vb)
    re = [float(e / abs(r) * 100.0) if abs(r) >= 1e-12 else None for e, r in zip(ae, vb)]
    labels = [f"h:{n}" for n in a.node_ids] + [f"q:{k}" for k in a.link_ids]
    return ErrorMetrics(labels, ae, re, float(np.linalg.norm(va - vb)))


def load_reference_state(path: str | Path) -> HydraulicState:
    """Read {"heads": {id: m}, "flows": {id: m^3/s}} from JSON."""
    doc = json.loads(Path(path).read_text())
    try:
        return HydraulicState.from_dicts(doc["heads"], doc["flows"])
    except KeyError as exc:
        raise DimensionMismatch(f"reference file lacks {exc}") from None
