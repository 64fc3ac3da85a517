"""Head-loss and head-gain physics plus the per-iteration linearization constants.

All functions are unit-agnostic: they evaluate the algebraic relations with
whatever consistent units the caller supplies.  The public network model stores
SI values; the iterative solver rescales flows to a working unit before calling
these helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import brentq, least_squares

from .errors import ClosedValve, NegativeFlow, NonPositiveDimension, PumpCurveUnderdetermined

HeadlossFormula = Literal["H-W", "D-W", "C-M"]
ValveKind = Literal["GPV", "PRV", "FCV"]
ValveStatus = Literal["OPEN", "ACTIVE", "CLOSED"]

GRAVITY = 9.80665
# EPANET's default kinematic viscosity of water at 20 C, m^2/s
KINEMATIC_VISCOSITY = 1.0219e-6
DEFAULT_VALVE_MINOR_LOSS = 1e-3

FLOW_EXPONENT = {"H-W": 1.852, "D-W": 2.0, "C-M": 2.0}


@dataclass(frozen=True)
class PipeProps:
    R: float
    mu: float

    def __post_init__(self):
        if not self.R > 0:
            raise NonPositiveDimension(f"pipe resistance must be positive, got {self.R}")
        if not self.mu > 1:
            raise ValueError(f"flow exponent must exceed 1, got {self.mu}")


@dataclass(frozen=True)
class PumpProps:
    h0: float
    r: float
    nu: float
    speed: float = 1.0

    def __post_init__(self):
        if not (self.h0 > 0 and self.r > 0 and self.nu > 1):
            raise ValueError(f"invalid pump curve (h0={self.h0}, r={self.r}, nu={self.nu})")
        if not self.speed > 0:
            raise ValueError(f"pump speed must be positive, got {self.speed}")


@dataclass(frozen=True)
class ValveProps:
    """Hydraulic description of one valve.

    ``head_setting`` is the downstream head a PRV enforces (elevation plus
    pressure setting), ``flow_setting`` the flow an FCV enforces.  ``R`` and
    ``mu`` describe the fully open loss curve of a GPV.
    """

    kind: ValveKind
    status: ValveStatus = "OPEN"
    openness: float = 1.0
    minor_loss: float = DEFAULT_VALVE_MINOR_LOSS
    head_setting: float | None = None
    flow_setting: float | None = None
    R: float = 0.0
    mu: float = 2.0


@dataclass(frozen=True)
class PDDParams:
    d_dsgn: float
    h_ser: float
    h_min: float
    gamma: float = 0.5

    def __post_init__(self):
        if not self.h_ser > self.h_min:
            raise ValueError("service head must exceed minimum head")
        if self.d_dsgn < 0:
            raise ValueError("design demand must be non-negative")


@dataclass(frozen=True)
class LinearRowSpec:
    """Template of a valve row in the linear system.

    ``loss``: h_i - h_j - q = constant; ``head``: h_j = constant;
    ``flow``: q = constant.
    """

    form: Literal["loss", "head", "flow"]
    constant: float


# --------------------------------------------------------------------------
# resistance coefficients


def darcy_friction_factor(reynolds, relative_roughness):
    """Darcy friction factor: laminar below Re 2000, Colebrook above 4000.

    The turbulent branch starts from Swamee-Jain and applies a few fixed-point
    Colebrook passes; the transition band is interpolated linearly.
    """
    re = np.maximum(np.abs(np.asarray(reynolds, dtype=float)), 1e-8)
    eps = np.broadcast_to(np.asarray(relative_roughness, dtype=float), re.shape)

    def turbulent(r):
        f = 0.25 / np.log10(eps / 3.7 + 5.74 / r**0.9) ** 2
        for _ in range(4):
            f = (-2.0 * np.log10(eps / 3.7 + 2.51 / (r * np.sqrt(f)))) ** -2
        return f

    f_turb = turbulent(np.maximum(re, 4000.0))
    f_lam = 64.0 / re
    f_2000 = 64.0 / 2000.0
    weight = np.clip((re - 2000.0) / 2000.0, 0.0, 1.0)
    f_trans = f_2000 + weight * (f_turb - f_2000)
    out = np.where(re < 2000.0, f_lam, np.where(re < 4000.0, f_trans, f_turb))
    return out if out.ndim else float(out)


def pipe_resistance(
    length,
    diameter,
    roughness,
    formula: HeadlossFormula = "H-W",
    flow=None,
    viscosity: float = KINEMATIC_VISCOSITY,
):
    """SI resistance R such that head loss [m] = R * q|q|^(mu-1) with q in m^3/s.

    Darcy-Weisbach needs a reference flow for the Reynolds number; without one
    the fully rough turbulent limit is used.
    """
    L = np.asarray(length, dtype=float)
    D = np.asarray(diameter, dtype=float)
    rough = np.asarray(roughness, dtype=float)
    if np.any(L <= 0) or np.any(D <= 0) or np.any(rough <= 0):
        raise NonPositiveDimension("length, diameter and roughness must be positive")
    if formula == "H-W":
        R = 10.667 * L * rough**-1.852 * D**-4.871
    elif formula == "C-M":
        R = 10.294 * rough**2 * L * D**-5.33
    elif formula == "D-W":
        if flow is None:
            reynolds = np.full(np.broadcast(L, D).shape, 1e12)
        else:
            velocity = 4.0 * np.abs(np.asarray(flow, dtype=float)) / (math.pi * D**2)
            reynolds = velocity * D / viscosity
        f = darcy_friction_factor(reynolds, rough / D)
        R = 8.0 * f * L / (GRAVITY * math.pi**2 * D**5)
    else:
        raise ValueError(f"unknown headloss formula {formula!r}")
    return R if np.ndim(R) else float(R)


# --------------------------------------------------------------------------
# nonlinear element relations


def _signed_power(q, exponent):
    q = np.asarray(q, dtype=float)
    return q * np.abs(q) ** (exponent - 1.0)


def head_loss_pipe(q, p: PipeProps):
    out = p.R * _signed_power(q, p.mu)
    return out if np.ndim(out) else float(out)


def head_gain_pump(q, p: PumpProps):
    """Signed head change from suction to delivery side, negative when the pump lifts."""
    qa = np.asarray(q, dtype=float)
    if np.any(qa < 0):
        raise NegativeFlow("pump curve evaluated at negative flow")
    s = p.speed
    out = -(s**2) * (p.h0 - p.r * (qa / s) ** p.nu)
    return out if np.ndim(out) else float(out)


def head_loss_valve(q, v: ValveProps):
    if v.status != "OPEN":
        if v.status == "CLOSED":
            raise ClosedValve("closed valves carry no loss relation")
        raise ValueError("ACTIVE valves are setting rows, not loss elements")
    if v.kind == "GPV":
        out = v.R / v.openness * _signed_power(q, v.mu)
    else:
        out = v.minor_loss * _signed_power(q, 2.0)
    return out if np.ndim(out) else float(out)


# --------------------------------------------------------------------------
# linearization constants


def linearize_pipe(q_prev, p: PipeProps):
    q = np.asarray(q_prev, dtype=float)
    out = q * (p.R * np.abs(q) ** (p.mu - 1.0) - 1.0)
    return out if np.ndim(out) else float(out)


def linearize_pump(q_prev, p: PumpProps):
    """Return (c1, c2) such that h_i - h_j - c2*q = c1 matches the curve at q_prev."""
    q = np.maximum(np.asarray(q_prev, dtype=float), 0.0)
    s = p.speed
    c1 = -(s**2) * p.h0
    c2 = p.r * q ** (p.nu - 1.0) * s ** (2.0 - p.nu)
    c1 = np.broadcast_to(c1, np.shape(c2)) if np.ndim(c2) else c1
    return (c1, c2) if np.ndim(c2) else (float(c1), float(c2))


def linearize_valve(q_prev: float, v: ValveProps) -> LinearRowSpec:
    if v.status == "CLOSED":
        raise ClosedValve("closed valves are pruned before assembly")
    if v.status == "ACTIVE":
        if v.kind == "PRV":
            return LinearRowSpec("head", float(v.head_setting))
        if v.kind == "FCV":
            return LinearRowSpec("flow", float(v.flow_setting))
        raise ValueError("only PRV and FCV support the ACTIVE status")
    q = float(q_prev)
    if v.kind == "GPV":
        return LinearRowSpec("loss", v.R / v.openness * q * abs(q) ** (v.mu - 1.0) - q)
    return LinearRowSpec("loss", q * (v.minor_loss * abs(q) - 1.0))


def pdd_demand(h, d: PDDParams):
    """Delivered demand as a function of nodal head (Wagner form)."""
    h = np.asarray(h, dtype=float)
    span = d.h_ser - d.h_min
    ratio = np.clip((h - d.h_min) / span, 0.0, 1.0)
    out = d.d_dsgn * ratio**d.gamma
    return out if np.ndim(out) else float(out)


def pdd_demand_derivative(h, d: PDDParams, floor: float = 1e-8):
    h = np.asarray(h, dtype=float)
    span = d.h_ser - d.h_min
    ratio = (h - d.h_min) / span
    inside = (ratio > 0) & (ratio < 1)
    safe = np.clip(ratio, floor, 1.0)
    out = np.where(inside, d.d_dsgn * d.gamma * safe ** (d.gamma - 1.0) / span, 0.0)
    return out if np.ndim(out) else float(out)


def linearize_pdd(h_prev, d: PDDParams):
    h = np.asarray(h_prev, dtype=float)
    out = pdd_demand(h, d) - h
    return out if np.ndim(out) else float(out)


def a_f_diagonal(q_prev, R, mu):
    """Diagonal of the pipe-flow iteration derivative, mu*R*|q|^(mu-1) - 1."""
    q = np.abs(np.asarray(q_prev, dtype=float))
    return np.asarray(mu, dtype=float) * np.asarray(R, dtype=float) * q ** (np.asarray(mu) - 1.0) - 1.0


def a_f_threshold(R, mu):
    """Flow magnitude at which the a_f_diagonal entry reaches zero."""
    R = np.asarray(R, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return (1.0 / (mu * R)) ** (1.0 / (mu - 1.0))


# --------------------------------------------------------------------------
# pump curves


def fit_pump_curve(points) -> tuple[float, float, float]:
    """Fit (h0, r, nu) of h = h0 - r*q^nu to curve points [(q, h), ...].

    One point follows the EPANET convention (shutoff head 4/3 of the design
    head, zero head at twice the design flow).  Three points are matched
    exactly; more points are fitted by least squares.
    """
    pts = sorted((float(q), float(h)) for q, h in points)
    if not pts:
        raise PumpCurveUnderdetermined("pump curve has no points")
    if len(pts) == 1:
        q1, h1 = pts[0]
        if q1 <= 0 or h1 <= 0:
            raise PumpCurveUnderdetermined("single design point must have positive flow and head")
        h0 = 4.0 / 3.0 * h1
        return h0, h0 / (2.0 * q1) ** 2, 2.0
    if len(pts) == 2:
        (qa, ha), (qb, hb) = pts
        if qb**2 == qa**2 or ha <= hb:
            raise PumpCurveUnderdetermined("two-point curve must have decreasing head")
        r = (ha - hb) / (qb**2 - qa**2)
        return ha + r * qa**2, r, 2.0
    if len(pts) == 3:
        return _fit_three_points(pts)
    q = np.array([p[0] for p in pts])
    h = np.array([p[1] for p in pts])
    h0_guess, r_guess, nu_guess = _fit_three_points([pts[0], pts[len(pts) // 2], pts[-1]])
    sol = least_squares(
        lambda x: x[0] - x[1] * np.abs(q) ** x[2] - h,
        x0=[h0_guess, r_guess, nu_guess],
        bounds=([0.0, 0.0, 1.0 + 1e-9], [np.inf, np.inf, 10.0]),
        x_scale="jac",
    )
    h0, r, nu = sol.x
    return float(h0), float(r), float(nu)


def _fit_three_points(pts) -> tuple[float, float, float]:
    (q0, h0), (q1, h1), (q2, h2) = pts
    if not (h0 > h1 > h2) or not (q0 < q1 < q2):
        raise PumpCurveUnderdetermined("three-point curve must have increasing flow and decreasing head")
    if q0 == 0.0:
        nu = math.log((h0 - h2) / (h0 - h1)) / math.log(q2 / q1)
        r = (h0 - h1) / q1**nu
        return h0, r, nu

    # Solve (h0 - h1)/(q1^nu - q0^nu) = (h0 - h2)/(q2^nu - q0^nu) for nu, then back out r and shutoff.
    def mismatch(nu):
        return (h0 - h1) * (q2**nu - q0**nu) - (h0 - h2) * (q1**nu - q0**nu)

    lo, hi = 1.0 + 1e-9, 10.0
    if mismatch(lo) * mismatch(hi) > 0:
        raise PumpCurveUnderdetermined("no curve exponent in (1, 10] matches the three points")
    nu = brentq(mismatch, lo, hi, xtol=1e-14, rtol=1e-14)
    r = (h0 - h1) / (q1**nu - q0**nu)
    return h0 + r * q0**nu, r, nu
