"""Reader and writer for a single-snapshot subset of the EPANET `.inp` format."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DanglingReference, DuplicateId, MalformedRecord, PumpCurveUnderdetermined, UnknownUnit
from .hydraulics import DEFAULT_VALVE_MINOR_LOSS, GRAVITY, PDDParams, fit_pump_curve
from .network import Junction, Network, Pipe, Pump, Reservoir, Tank, Valve

log = logging.getLogger(__name__)

NODE_SECTIONS = ("JUNCTIONS", "RESERVOIRS", "TANKS")
LINK_SECTIONS = ("PIPES", "PUMPS", "VALVES")

# (min, max) token counts per record; None means unbounded
FIELD_COUNTS = {
    "JUNCTIONS": (2, 4),
    "RESERVOIRS": (2, 3),
    "TANKS": (7, 9),
    "PIPES": (6, 8),
    "PUMPS": (5, None),
    "VALVES": (6, 7),
    "DEMANDS": (2, 3),
    "STATUS": (2, 2),
    "CURVES": (3, 3),
    "PATTERNS": (2, None),
    "COORDINATES": (3, 3),
}

HEADLOSS_TOKENS = {"H-W": "H-W", "D-W": "D-W", "C-M": "C-M"}
HEADLOSS_NAMES = {"H-W": "Hazen-Williams", "D-W": "Darcy-Weisbach", "C-M": "Chezy-Manning"}


class FlowUnit(str, Enum):
    CFS = "CFS"
    GPM = "GPM"
    MGD = "MGD"
    IMGD = "IMGD"
    AFD = "AFD"
    LPS = "LPS"
    LPM = "LPM"
    MLD = "MLD"
    CMH = "CMH"
    CMD = "CMD"
    CMS = "CMS"


class LengthUnit(str, Enum):
    FT = "FT"
    M = "M"


_FLOW_TO_SI = {
    FlowUnit.CFS: 0.028316846592,
    FlowUnit.GPM: 0.028316846592 / 448.831,
    FlowUnit.MGD: 0.028316846592 / 0.64632,
    FlowUnit.IMGD: 0.028316846592 / 0.5382,
    FlowUnit.AFD: 0.028316846592 / 1.9837,
    FlowUnit.LPS: 1e-3,
    FlowUnit.LPM: 1e-3 / 60.0,
    FlowUnit.MLD: 1e3 / 86400.0,
    FlowUnit.CMH: 1.0 / 3600.0,
    FlowUnit.CMD: 1.0 / 86400.0,
    FlowUnit.CMS: 1.0,
}
_US_FLOWS = {FlowUnit.CFS, FlowUnit.GPM, FlowUnit.MGD, FlowUnit.IMGD, FlowUnit.AFD}


@dataclass(frozen=True)
class UnitSystem:
    """Conversion factors from an `.inp` unit system to SI (multiply to get SI)."""

    flow_unit: FlowUnit
    length_unit: LengthUnit

    @classmethod
    def from_token(cls, token: str) -> "UnitSystem":
        try:
            flow = FlowUnit(token.upper())
        except ValueError:
            raise UnknownUnit(f"unknown flow unit {token!r}") from None
        return cls(flow, LengthUnit.FT if flow in _US_FLOWS else LengthUnit.M)

    @property
    def factors(self) -> dict[str, float]:
        us = self.length_unit is LengthUnit.FT
        return {
            "flow": _FLOW_TO_SI[self.flow_unit],
            "length": 0.3048 if us else 1.0,
            "diameter": 0.0254 if us else 1e-3,
            "dw_roughness": 0.0003048 if us else 1e-3,
            "pressure": 0.3048 / 0.4333 if us else 1.0,
            "volume": 0.3048**3 if us else 1.0,
        }

    def to_si(self, value, quantity: str):
        return value * self.factors[quantity]

    def from_si(self, value, quantity: str):
        return value / self.factors[quantity]


@dataclass(frozen=True)
class Record:
    line: int
    tokens: tuple[str, ...]


@dataclass
class RawNetworkDescription:
    sections: dict[str, list[Record]] = field(default_factory=dict)
    source_units: str = "GPM"
    headloss_formula: str = "Hazen-Williams"
    title: str = ""

    def records(self, section: str) -> list[Record]:
        return self.sections.get(section, [])

    @property
    def node_count(self) -> int:
        return sum(len(self.records(s)) for s in NODE_SECTIONS)

    @property
    def link_count(self) -> int:
        return sum(len(self.records(s)) for s in LINK_SECTIONS)

    @property
    def headloss_token(self) -> str:
        return {v: k for k, v in HEADLOSS_NAMES.items()}[self.headloss_formula]


_SECTION_RE = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]\s*$")


def parse_inp(text: str) -> RawNetworkDescription:
    """Split `.inp` text into section records, checking ids and link endpoints."""
    sections: dict[str, list[Record]] = {}
    title_lines: list[str] = []
    current: str | None = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split(";", 1)[0].strip()
        if not line:
            continue
        header = _SECTION_RE.match(line)
        if header:
            current = header.group(1).upper()
            if current == "END":
                break
            sections.setdefault(current, [])
            continue
        if current is None:
            raise MalformedRecord("data before the first section header", lineno)
        if current == "TITLE":
            title_lines.append(line)
            continue
        tokens = tuple(line.split())
        bounds = FIELD_COUNTS.get(current)
        if bounds is not None:
            lo, hi = bounds
            if len(tokens) < lo or (hi is not None and len(tokens) > hi):
                expected = f"{lo}" if lo == hi else f"{lo}-{hi if hi is not None else 'n'}"
                raise MalformedRecord(f"[{current}] record has {len(tokens)} fields, expected {expected}", lineno)
        sections[current].append(Record(lineno, tokens))

    units, headloss = "GPM", None
    for rec in sections.get("OPTIONS", []):
        key = rec.tokens[0].upper()
        if key == "UNITS" and len(rec.tokens) >= 2:
            units = rec.tokens[1].upper()
        elif key == "HEADLOSS" and len(rec.tokens) >= 2:
            token = rec.tokens[1].upper()
            if token not in HEADLOSS_TOKENS:
                raise MalformedRecord(f"unknown headloss formula {rec.tokens[1]!r}", rec.line)
            if headloss is not None and headloss != token:
                raise MalformedRecord("conflicting headloss formulas", rec.line)
            headloss = token

    seen: dict[str, int] = {}
    for sec in NODE_SECTIONS:
        for rec in sections.get(sec, []):
            nid = rec.tokens[0]
            if nid in seen:
                raise DuplicateId(nid, rec.line)
            seen[nid] = rec.line
    links: dict[str, int] = {}
    for sec in LINK_SECTIONS:
        for rec in sections.get(sec, []):
            lid = rec.tokens[0]
            if lid in links:
                raise DuplicateId(lid, rec.line)
            links[lid] = rec.line
            for node in rec.tokens[1:3]:
                if node not in seen:
                    raise DanglingReference(lid, node, rec.line)
    return RawNetworkDescription(
        sections=sections,
        source_units=units,
        headloss_formula=HEADLOSS_NAMES[headloss or "H-W"],
        title="\n".join(title_lines),
    )


def read_inp(path: str | Path) -> RawNetworkDescription:
    return parse_inp(Path(path).read_text())


def load_network(path: str | Path) -> Network:
    return canonicalize(read_inp(path))


def _number(rec: Record, idx: int, what: str) -> float:
    try:
        value = float(rec.tokens[idx])
    except (IndexError, ValueError):
        raise MalformedRecord(f"expected a number for {what}", rec.line) from None
    if not math.isfinite(value):
        raise MalformedRecord(f"{what} is not finite", rec.line)
    return value


def _options(raw: RawNetworkDescription) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for rec in raw.records("OPTIONS"):
        toks = [t.upper() for t in rec.tokens]
        # two-word option names used by EPANET
        if len(toks) >= 3 and toks[0] in {"DEMAND", "MINIMUM", "REQUIRED", "PRESSURE", "SPECIFIC"}:
            out[toks[0] + " " + toks[1]] = list(rec.tokens[2:])
        else:
            out[toks[0]] = list(rec.tokens[1:])
    return out


def canonicalize(raw: RawNetworkDescription) -> Network:
    """Convert a parsed description into an SI :class:`Network`."""
    units = UnitSystem.from_token(raw.source_units)
    formula = raw.headloss_token
    opts = _options(raw)

    patterns: dict[str, list[float]] = {}
    for rec in raw.records("PATTERNS"):
        patterns.setdefault(rec.tokens[0], []).extend(
            _number(rec, i, "pattern multiplier") for i in range(1, len(rec.tokens))
        )
    default_pattern = opts.get("PATTERN", [None])[0]
    multiplier = float(opts.get("DEMAND MULTIPLIER", ["1"])[0])

    def first_multiplier(pattern_id: str | None) -> float:
        if pattern_id is None:
            pattern_id = default_pattern if default_pattern in patterns else None
        if pattern_id is None:
            return 1.0
        if pattern_id not in patterns:
            raise MalformedRecord(f"unknown pattern {pattern_id!r}")
        return patterns[pattern_id][0]

    curves: dict[str, list[tuple[float, float]]] = {}
    for rec in raw.records("CURVES"):
        curves.setdefault(rec.tokens[0], []).append((_number(rec, 1, "curve x"), _number(rec, 2, "curve y")))

    pdd_model = opts.get("DEMAND MODEL", ["DDA"])[0].upper() == "PDA"
    p_min = units.to_si(float(opts.get("MINIMUM PRESSURE", ["0"])[0]), "pressure")
    p_req = units.to_si(float(opts.get("REQUIRED PRESSURE", ["0.1"])[0]), "pressure")
    p_exp = float(opts.get("PRESSURE EXPONENT", ["0.5"])[0])

    extra_demands: dict[str, float] = {}
    junction_ids = {rec.tokens[0] for rec in raw.records("JUNCTIONS")}
    for rec in raw.records("DEMANDS"):
        jid = rec.tokens[0]
        if jid not in junction_ids:
            raise MalformedRecord(f"demand for unknown junction {jid!r}", rec.line)
        pat = rec.tokens[2] if len(rec.tokens) > 2 else None
        extra_demands[jid] = extra_demands.get(jid, 0.0) + _number(rec, 1, "demand") * first_multiplier(pat)

    junctions = []
    for rec in raw.records("JUNCTIONS"):
        jid = rec.tokens[0]
        elev = units.to_si(_number(rec, 1, "elevation"), "length")
        if jid in extra_demands:
            base = extra_demands[jid]
        elif len(rec.tokens) > 2:
            pat = rec.tokens[3] if len(rec.tokens) > 3 else None
            base = _number(rec, 2, "demand") * first_multiplier(pat)
        else:
            base = 0.0
        demand = units.to_si(base * multiplier, "flow")
        pdd = PDDParams(demand, elev + p_req, elev + p_min, p_exp) if pdd_model else None
        junctions.append(Junction(jid, elev, demand, pdd))

    reservoirs = []
    for rec in raw.records("RESERVOIRS"):
        pat = rec.tokens[2] if len(rec.tokens) > 2 else None
        head = _number(rec, 1, "head") * (first_multiplier(pat) if pat else 1.0)
        reservoirs.append(Reservoir(rec.tokens[0], units.to_si(head, "length")))

    tanks = []
    for rec in raw.records("TANKS"):
        elev = units.to_si(_number(rec, 1, "elevation"), "length")
        level = units.to_si(_number(rec, 2, "initial level"), "length")
        diam = units.to_si(_number(rec, 5, "tank diameter"), "length")
        area = math.pi * diam**2 / 4.0
        tanks.append(Tank(rec.tokens[0], elev, area, area * level))

    statuses: dict[str, tuple[str, int]] = {}
    for rec in raw.records("STATUS"):
        statuses[rec.tokens[0]] = (rec.tokens[1], rec.line)

    rough_q = "dw_roughness" if formula == "D-W" else None
    pipes = []
    for rec in raw.records("PIPES"):
        roughness = _number(rec, 5, "roughness")
        status = rec.tokens[7].upper() if len(rec.tokens) > 7 else "OPEN"
        if rec.tokens[0] in statuses:
            status = statuses[rec.tokens[0]][0].upper()
        if status == "CV":
            log.warning("pipe %s: check valves are not modeled; treated as open", rec.tokens[0])
            status = "OPEN"
        if status not in ("OPEN", "CLOSED"):
            raise MalformedRecord(f"pipe status {status!r} not recognized", rec.line)
        pipes.append(
            Pipe(
                rec.tokens[0],
                rec.tokens[1],
                rec.tokens[2],
                units.to_si(_number(rec, 3, "length"), "length"),
                units.to_si(_number(rec, 4, "diameter"), "diameter"),
                units.to_si(roughness, rough_q) if rough_q else roughness,
                status,
            )
        )

    pumps = [_canonical_pump(rec, units, curves, statuses) for rec in raw.records("PUMPS")]
    valves = [_canonical_valve(rec, units, curves, statuses) for rec in raw.records("VALVES")]

    return Network(
        junctions=junctions,
        reservoirs=reservoirs,
        tanks=tanks,
        pipes=pipes,
        pumps=pumps,
        valves=valves,
        headloss_formula=formula,
        title=raw.title,
        source_units=units.flow_unit.value,
    )


def _canonical_pump(rec: Record, units: UnitSystem, curves, statuses) -> Pump:
    lid = rec.tokens[0]
    props = rec.tokens[3:]
    if len(props) % 2:
        raise MalformedRecord(f"pump {lid}: keyword without value", rec.line)
    kw = {props[i].upper(): props[i + 1] for i in range(0, len(props), 2)}
    F, L = units.factors["flow"], units.factors["length"]
    if "POWER" in kw:
        raise PumpCurveUnderdetermined(f"pump {lid}: constant-power pumps are not supported")
    if {"SHUTOFF", "COEFF", "EXPONENT"} <= kw.keys():
        try:
            h0, r, nu = float(kw["SHUTOFF"]), float(kw["COEFF"]), float(kw["EXPONENT"])
        except ValueError:
            raise MalformedRecord(f"pump {lid}: non-numeric curve triple", rec.line) from None
    elif "HEAD" in kw:
        points = curves.get(kw["HEAD"])
        if not points:
            raise PumpCurveUnderdetermined(f"pump {lid}: curve {kw['HEAD']!r} has no points")
        h0, r, nu = fit_pump_curve(points)
    else:
        raise PumpCurveUnderdetermined(f"pump {lid}: no head curve or curve triple")
    speed = float(kw.get("SPEED", 1.0))
    status = "OPEN"
    if lid in statuses:
        token = statuses[lid][0].upper()
        if token in ("OPEN", "CLOSED"):
            status = token
        else:
            try:
                speed = float(token)
            except ValueError:
                raise MalformedRecord(f"pump {lid}: status {token!r} not recognized", statuses[lid][1]) from None
            if speed == 0.0:
                status, speed = "CLOSED", 1.0
    return Pump(lid, rec.tokens[1], rec.tokens[2], h0 * L, r * L * F**-nu, nu, speed, status)


def _canonical_valve(rec: Record, units: UnitSystem, curves, statuses) -> Valve:
    lid, start, end = rec.tokens[:3]
    diameter = units.to_si(_number(rec, 3, "valve diameter"), "diameter")
    kind = rec.tokens[4].upper()
    if kind not in ("PRV", "FCV", "GPV"):
        raise MalformedRecord(f"valve {lid}: type {kind!r} not supported", rec.line)
    k_minor = _number(rec, 6, "minor loss") if len(rec.tokens) > 6 else 0.0
    minor = 8.0 * k_minor / (GRAVITY * math.pi**2 * diameter**4) if k_minor > 0 else DEFAULT_VALVE_MINOR_LOSS
    resistance, setting = 0.0, 0.0
    if kind == "GPV":
        points = curves.get(rec.tokens[5])
        if not points:
            raise MalformedRecord(f"valve {lid}: GPV curve {rec.tokens[5]!r} not found", rec.line)
        q = np.array([units.to_si(p[0], "flow") for p in points])
        h = np.array([units.to_si(p[1], "length") for p in points])
        resistance = float(np.sum(h * q**2) / np.sum(q**4))
    else:
        raw_setting = _number(rec, 5, "valve setting")
        setting = units.to_si(raw_setting, "pressure" if kind == "PRV" else "flow")
    status, fixed = ("OPEN" if kind == "GPV" else "ACTIVE"), False
    openness = 1.0
    if lid in statuses:
        token, line = statuses[lid]
        token = token.upper()
        if token in ("OPEN", "CLOSED"):
            status, fixed = token, True
        elif token == "ACTIVE":
            status = "ACTIVE" if kind != "GPV" else "OPEN"
        else:
            try:
                value = float(token)
            except ValueError:
                raise MalformedRecord(f"valve {lid}: status {token!r} not recognized", line) from None
            if kind == "GPV":
                # a numeric GPV status is read as the opening fraction
                openness = value
            else:
                setting = units.to_si(value, "pressure" if kind == "PRV" else "flow")
    return Valve(
        lid,
        start,
        end,
        kind,
        setting=setting,
        diameter=diameter,
        minor_loss=minor,
        status=status,
        fixed=fixed,
        resistance=resistance,
        openness=openness,
    )


# --------------------------------------------------------------------------
# writing


def _fmt(value: float) -> str:
    return repr(float(value))


def write_inp(net: Network, units: str | None = None) -> str:
    """Serialize ``net`` as `.inp` text in the requested flow unit (default: its source unit)."""
    us = UnitSystem.from_token(units or net.source_units)
    F, L = us.factors["flow"], us.factors["length"]
    out: list[str] = ["[TITLE]"]
    out += [line for line in net.title.splitlines() if line.strip()]

    pdd = [j.pdd for j in net.junctions if j.pdd is not None]
    out += ["", "[JUNCTIONS]", ";ID\tElev\tDemand"]
    for j in net.junctions:
        out.append(f"{j.id}\t{_fmt(us.from_si(j.elevation, 'length'))}\t{_fmt(us.from_si(j.demand, 'flow'))}")
    out += ["", "[RESERVOIRS]", ";ID\tHead"]
    for r in net.reservoirs:
        out.append(f"{r.id}\t{_fmt(us.from_si(r.head, 'length'))}")
    out += ["", "[TANKS]", ";ID\tElev\tInitLvl\tMinLvl\tMaxLvl\tDiam\tMinVol"]
    for t in net.tanks:
        level = t.volume / t.area
        diam = math.sqrt(4.0 * t.area / math.pi)
        out.append(
            "\t".join(
                [
                    t.id,
                    _fmt(us.from_si(t.elevation, "length")),
                    _fmt(us.from_si(level, "length")),
                    "0",
                    _fmt(us.from_si(max(2.0 * level, level + 1.0), "length")),
                    _fmt(us.from_si(diam, "length")),
                    "0",
                ]
            )
        )
    out += ["", "[PIPES]", ";ID\tNode1\tNode2\tLength\tDiameter\tRoughness\tMinorLoss\tStatus"]
    for p in net.pipes:
        rough = us.from_si(p.roughness, "dw_roughness") if net.headloss_formula == "D-W" else p.roughness
        out.append(
            "\t".join(
                [
                    p.id,
                    p.start,
                    p.end,
                    _fmt(us.from_si(p.length, "length")),
                    _fmt(us.from_si(p.diameter, "diameter")),
                    _fmt(rough),
                    "0",
                    p.status.capitalize(),
                ]
            )
        )
    out += ["", "[PUMPS]", ";ID\tNode1\tNode2\tParameters"]
    for m in net.pumps:
        r_src = m.r / L * F**m.nu
        out.append(
            f"{m.id}\t{m.start}\t{m.end}\tSHUTOFF {_fmt(m.h0 / L)} COEFF {_fmt(r_src)} "
            f"EXPONENT {_fmt(m.nu)} SPEED {_fmt(m.speed)}"
        )
    out += ["", "[VALVES]", ";ID\tNode1\tNode2\tDiameter\tType\tSetting\tMinorLoss"]
    curve_lines: list[str] = []
    for v in net.valves:
        if v.kind == "GPV":
            setting = f"GPV_{v.id}"
            for qs in (0.5, 1.0, 2.0):
                q = qs * 0.01
                curve_lines.append(
                    f"{setting}\t{_fmt(us.from_si(q, 'flow'))}\t{_fmt(us.from_si(v.resistance * q * q, 'length'))}"
                )
        else:
            setting = _fmt(us.from_si(v.setting, "pressure" if v.kind == "PRV" else "flow"))
        if v.minor_loss == DEFAULT_VALVE_MINOR_LOSS:
            k_minor = 0.0
        else:
            k_minor = v.minor_loss * GRAVITY * math.pi**2 * v.diameter**4 / 8.0
        out.append(
            "\t".join(
                [v.id, v.start, v.end, _fmt(us.from_si(v.diameter, "diameter")), v.kind, setting, _fmt(k_minor)]
            )
        )
    out += ["", "[STATUS]"]
    for m in net.pumps:
        if m.status == "CLOSED":
            out.append(f"{m.id}\tClosed")
    for v in net.valves:
        if v.fixed or v.status == "CLOSED":
            out.append(f"{v.id}\t{v.status.capitalize()}")
        elif v.kind == "GPV" and v.openness != 1.0:
            out.append(f"{v.id}\t{_fmt(v.openness)}")
    out += ["", "[CURVES]"] + curve_lines
    out += ["", "[OPTIONS]", f"Units\t{us.flow_unit.value}", f"Headloss\t{net.headloss_formula}"]
    if pdd and len(pdd) == len(net.junctions):
        first_j = net.junctions[0]
        p_min = first_j.pdd.h_min - first_j.elevation
        p_req = first_j.pdd.h_ser - first_j.elevation
        out += [
            "Demand Model\tPDA",
            f"Minimum Pressure\t{_fmt(us.from_si(p_min, 'pressure'))}",
            f"Required Pressure\t{_fmt(us.from_si(p_req, 'pressure'))}",
            f"Pressure Exponent\t{_fmt(first_j.pdd.gamma)}",
        ]
    out += ["", "[END]", ""]
    return "\n".join(out)


serialize = write_inp
