"""Typed network graph, incidence partition, pruning of closed links and validation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .hydraulics import (
    DEFAULT_VALVE_MINOR_LOSS,
    FLOW_EXPONENT,
    HeadlossFormula,
    PDDParams,
    PipeProps,
    PumpProps,
    ValveProps,
    pipe_resistance,
)

log = logging.getLogger(__name__)

LinkStatus = Literal["OPEN", "CLOSED"]


def tank_head(volume: float, area: float, elevation: float) -> float:
    if area <= 0:
        raise ValueError("tank area must be positive")
    if volume < 0:
        raise ValueError("tank volume must be non-negative")
    return volume / area + elevation


@dataclass(frozen=True)
class Junction:
    id: str
    elevation: float = 0.0
    demand: float = 0.0
    pdd: PDDParams | None = None


@dataclass(frozen=True)
class Reservoir:
    id: str
    head: float


@dataclass(frozen=True)
class Tank:
    id: str
    elevation: float
    area: float
    volume: float

    @property
    def head(self) -> float:
        return tank_head(self.volume, self.area, self.elevation)


@dataclass(frozen=True)
class Pipe:
    id: str
    start: str
    end: str
    length: float
    diameter: float
    roughness: float
    status: LinkStatus = "OPEN"


@dataclass(frozen=True)
class Pump:
    id: str
    start: str
    end: str
    h0: float
    r: float
    nu: float
    speed: float = 1.0
    status: LinkStatus = "OPEN"

    @property
    def props(self) -> PumpProps:
        return PumpProps(self.h0, self.r, self.nu, self.speed)


@dataclass(frozen=True)
class Valve:
    """A GPV, PRV or FCV.

    ``setting`` is a gauge pressure head in m for a PRV and a flow in m^3/s for
    an FCV.  ``fixed`` marks a status forced by the input file; otherwise PRV
    and FCV statuses are resolved during the solve.  A GPV loss curve is
    R*q|q|^(mu-1) divided by the openness.
    """

    id: str
    start: str
    end: str
    kind: Literal["GPV", "PRV", "FCV"]
    setting: float = 0.0
    diameter: float = 0.3
    minor_loss: float = DEFAULT_VALVE_MINOR_LOSS
    openness: float = 1.0
    status: Literal["OPEN", "ACTIVE", "CLOSED"] = "ACTIVE"
    fixed: bool = False
    resistance: float = 0.0
    exponent: float = 2.0


@dataclass(frozen=True)
class Network:
    junctions: tuple[Junction, ...] = ()
    reservoirs: tuple[Reservoir, ...] = ()
    tanks: tuple[Tank, ...] = ()
    pipes: tuple[Pipe, ...] = ()
    pumps: tuple[Pump, ...] = ()
    valves: tuple[Valve, ...] = ()
    headloss_formula: HeadlossFormula = "H-W"
    title: str = ""
    source_units: str = "CMS"

    def __post_init__(self):
        for name in ("junctions", "reservoirs", "tanks", "pipes", "pumps", "valves"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    # ---- counts and index maps

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in (*self.junctions, *self.reservoirs, *self.tanks)]

    @property
    def link_ids(self) -> list[str]:
        return [k.id for k in (*self.pipes, *self.pumps, *self.valves)]

    @property
    def links(self) -> list:
        return [*self.pipes, *self.pumps, *self.valves]

    @property
    def n_heads(self) -> int:
        return len(self.junctions) + len(self.reservoirs) + len(self.tanks)

    @property
    def n_flows(self) -> int:
        return len(self.pipes) + len(self.pumps) + len(self.valves)

    @property
    def n_variables(self) -> int:
        return self.n_heads + self.n_flows

    def counts(self) -> dict[str, int]:
        return {
            "junctions": len(self.junctions),
            "reservoirs": len(self.reservoirs),
            "tanks": len(self.tanks),
            "pipes": len(self.pipes),
            "pumps": len(self.pumps),
            "valves": len(self.valves),
        }

    def node_index(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def link_index(self) -> dict[str, int]:
        return {lid: i for i, lid in enumerate(self.link_ids)}

    def fixed_heads(self) -> np.ndarray:
        return np.array([r.head for r in self.reservoirs] + [t.head for t in self.tanks], dtype=float)

    def elevations(self) -> dict[str, float]:
        out = {j.id: j.elevation for j in self.junctions}
        out.update({r.id: r.head for r in self.reservoirs})
        out.update({t.id: t.elevation for t in self.tanks})
        return out

    @property
    def flow_exponent(self) -> float:
        return FLOW_EXPONENT[self.headloss_formula]

    def pipe_resistances(self, flows: np.ndarray | None = None) -> np.ndarray:
        """SI resistances of all pipes; Darcy-Weisbach uses ``flows`` for the Reynolds number."""
        if not self.pipes:
            return np.zeros(0)
        L = np.array([p.length for p in self.pipes])
        D = np.array([p.diameter for p in self.pipes])
        C = np.array([p.roughness for p in self.pipes])
        return np.atleast_1d(pipe_resistance(L, D, C, self.headloss_formula, flow=flows))

    def pipe_props(self) -> list[PipeProps]:
        mu = self.flow_exponent
        return [PipeProps(float(R), mu) for R in self.pipe_resistances()]

    def valve_props(self, valve: Valve, status: str | None = None) -> ValveProps:
        status = status or valve.status
        head_setting = None
        if valve.kind == "PRV":
            head_setting = self.elevations()[valve.end] + valve.setting
        return ValveProps(
            kind=valve.kind,
            status="OPEN" if valve.kind == "GPV" and status == "ACTIVE" else status,
            openness=valve.openness,
            minor_loss=valve.minor_loss,
            head_setting=head_setting,
            flow_setting=valve.setting if valve.kind == "FCV" else None,
            R=valve.resistance,
            mu=valve.exponent,
        )

    def with_valve(self, valve_id: str, **changes) -> "Network":
        if valve_id not in {v.id for v in self.valves}:
            raise KeyError(valve_id)
        valves = tuple(replace(v, **changes) if v.id == valve_id else v for v in self.valves)
        return replace(self, valves=valves)


# --------------------------------------------------------------------------
# incidence


@dataclass(frozen=True)
class IncidencePartition:
    """Node-by-link incidence split by node class (rows) and link class (columns).

    ``full`` is the n_h x n_q matrix with +1 at each link's start node and -1
    at its end node.  The nine blocks are views of it.
    """

    full: sp.csr_matrix
    node_ids: tuple[str, ...]
    link_ids: tuple[str, ...]
    node_splits: tuple[int, int, int]
    link_splits: tuple[int, int, int]
    blocks: dict[str, sp.csr_matrix] = field(default_factory=dict)

    def block(self, node_class: str, link_class: str) -> sp.csr_matrix:
        return self.blocks[node_class + "_" + link_class]


def build_incidence(net: Network) -> IncidencePartition:
    index = net.node_index()
    links = net.links
    rows, cols, vals = [], [], []
    for k, link in enumerate(links):
        rows += [index[link.start], index[link.end]]
        cols += [k, k]
        vals += [1.0, -1.0]
    full = sp.csr_matrix((vals, (rows, cols)), shape=(net.n_heads, net.n_flows))
    nj, nr, nt = len(net.junctions), len(net.reservoirs), len(net.tanks)
    np_, nm, nw = len(net.pipes), len(net.pumps), len(net.valves)
    row_ranges = {"J": (0, nj), "R": (nj, nj + nr), "TK": (nj + nr, nj + nr + nt)}
    col_ranges = {"P": (0, np_), "M": (np_, np_ + nm), "W": (np_ + nm, np_ + nm + nw)}
    blocks = {}
    for rname, (r0, r1) in row_ranges.items():
        for cname, (c0, c1) in col_ranges.items():
            blocks[f"{rname}_{cname}"] = full[r0:r1, c0:c1]
    return IncidencePartition(
        full=full,
        node_ids=tuple(net.node_ids),
        link_ids=tuple(net.link_ids),
        node_splits=(nj, nr, nt),
        link_splits=(np_, nm, nw),
        blocks=blocks,
    )


# --------------------------------------------------------------------------
# pruning and validation


def _stranded_junctions(net: Network) -> list[str]:
    touched = set()
    for link in net.links:
        touched.add(link.start)
        touched.add(link.end)
    return [j.id for j in net.junctions if j.id not in touched]


def prune_closed(net: Network) -> Network:
    """Drop closed links; nodes stay so result vectors keep stable indexing."""
    pruned = replace(
        net,
        pipes=tuple(p for p in net.pipes if p.status != "CLOSED"),
        pumps=tuple(p for p in net.pumps if p.status != "CLOSED"),
        valves=tuple(v for v in net.valves if v.status != "CLOSED"),
    )
    if pruned.n_flows != net.n_flows:
        stranded = _stranded_junctions(pruned)
        if stranded:
            log.warning("junctions left without links after pruning: %s", ", ".join(stranded))
    return pruned


@dataclass
class ValidationReport:
    components: list[list[str]]
    components_without_fixed_head: list[list[str]]
    range_violations: list[str]
    warnings: list[str] = field(default_factory=list)

    @property
    def overall_ok(self) -> bool:
        return not self.components_without_fixed_head and not self.range_violations

    @property
    def reasons(self) -> list[str]:
        out = [f"no fixed-head node in component {{{', '.join(c)}}}" for c in self.components_without_fixed_head]
        return out + self.range_violations

    def to_dict(self) -> dict:
        return {
            "overall_ok": self.overall_ok,
            "n_components": len(self.components),
            "components_without_fixed_head": self.components_without_fixed_head,
            "range_violations": self.range_violations,
            "warnings": self.warnings,
        }


def connected_node_groups(net: Network) -> list[list[str]]:
    ids = net.node_ids
    index = net.node_index()
    n = len(ids)
    if not n:
        return []
    rows = [index[k.start] for k in net.links]
    cols = [index[k.end] for k in net.links]
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    count, labels = connected_components(adj, directed=False)
    groups: list[list[str]] = [[] for _ in range(count)]
    for i, lab in enumerate(labels):
        groups[lab].append(ids[i])
    return groups


def validate(net: Network) -> ValidationReport:
    """Topology and parameter diagnostics for an (already pruned) network."""
    problems: list[str] = []
    warnings: list[str] = []
    fixed = {r.id for r in net.reservoirs} | {t.id for t in net.tanks}
    groups = connected_node_groups(net)
    floating = [g for g in groups if not fixed.intersection(g)]

    for p in net.pipes:
        for name, value in (("length", p.length), ("diameter", p.diameter), ("roughness", p.roughness)):
            if not (value > 0 and math.isfinite(value)):
                problems.append(f"pipe {p.id}: {name} must be positive (got {value})")
    for m in net.pumps:
        if not (m.h0 > 0 and m.r > 0 and m.nu > 1):
            problems.append(f"pump {m.id}: curve parameters out of range")
        if not (0 < m.speed <= 10):
            problems.append(f"pump {m.id}: speed {m.speed} outside (0, 10]")
    for v in net.valves:
        if not (0 < v.openness <= 1):
            problems.append(f"valve {v.id}: openness {v.openness} outside (0, 1]")
        if v.kind == "GPV" and not v.resistance > 0:
            problems.append(f"valve {v.id}: GPV needs a positive loss coefficient")
        if v.kind in ("PRV", "FCV") and v.minor_loss <= 0:
            problems.append(f"valve {v.id}: minor-loss coefficient must be positive")
        if v.kind == "FCV" and v.setting < 0:
            problems.append(f"valve {v.id}: flow setting must be non-negative")
    for t in net.tanks:
        if not t.area > 0:
            problems.append(f"tank {t.id}: area must be positive")
        if t.volume < 0:
            problems.append(f"tank {t.id}: volume must be non-negative")
    for j in net.junctions:
        if not math.isfinite(j.demand):
            problems.append(f"junction {j.id}: demand is not finite")
    for k in net.links:
        if k.start == k.end:
            problems.append(f"link {k.id}: both ends on node {k.start}")
    stranded = _stranded_junctions(net)
    if stranded:
        warnings.append("junctions without incident links: " + ", ".join(stranded))
    return ValidationReport(groups, floating, problems, warnings)
