"""Square sparse system assembly, exact solves, and the equivalent GP monomial form."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, SingularSystem
from .network import IncidencePartition, Network

DENSE_LIMIT = 200
# SVD-based singularity diagnostics stay affordable up to this size
DIAGNOSTIC_LIMIT = 3000


@dataclass
class LinearizationCoeffs:
    """Right-hand sides and pump slopes for one linear solve.

    ``junction`` holds the demand (or the pressure-driven constant where
    ``pdd_mask`` is set); ``valve`` holds the loss constant for open valves and
    the enforced head or flow for active ones.
    """

    pipe: np.ndarray
    pump_c1: np.ndarray
    pump_c2: np.ndarray
    valve: np.ndarray
    junction: np.ndarray
    pdd_mask: np.ndarray | None = None


@dataclass
class LinearSystem:
    A: sp.csc_matrix
    b: np.ndarray
    row_labels: list[str]
    col_labels: list[str]
    n_heads: int
    valve_statuses: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return self.A.shape[0]

    @property
    def sparsity(self) -> float:
        n = self.size
        return 1.0 - self.A.count_nonzero() / float(n * n) if n else 1.0

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x - self.b


def assemble(
    net: Network,
    inc: IncidencePartition,
    coeffs: LinearizationCoeffs,
    statuses: tuple[str, ...] | None = None,
) -> LinearSystem:
    """Build A and b with rows ordered junctions, reservoirs, tanks, pipes, pumps, valves."""
    nj, nr, nt = inc.node_splits
    npipe, npump, nvalve = inc.link_splits
    nh = nj + nr + nt
    nq = npipe + npump + nvalve
    statuses = tuple(statuses) if statuses is not None else tuple(v.status for v in net.valves)
    for name, arr, size in (
        ("pipe", coeffs.pipe, npipe),
        ("pump_c1", coeffs.pump_c1, npump),
        ("pump_c2", coeffs.pump_c2, npump),
        ("valve", coeffs.valve, nvalve),
        ("junction", coeffs.junction, nj),
    ):
        if len(arr) != size:
            raise DimensionMismatch(f"{name} coefficients have length {len(arr)}, expected {size}")
    if len(statuses) != nvalve or nh != net.n_heads or nq != net.n_flows:
        raise DimensionMismatch("incidence partition or statuses do not match the network")

    index = net.node_index()
    starts = np.array([index[k.start] for k in net.links], dtype=int)
    ends = np.array([index[k.end] for k in net.links], dtype=int)
    link_cols = nh + np.arange(nq)

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def add(r, c, v):
        rows.append(np.atleast_1d(np.asarray(r, dtype=int)))
        cols.append(np.atleast_1d(np.asarray(c, dtype=int)))
        vals.append(np.broadcast_to(np.asarray(v, dtype=float), rows[-1].shape).copy())

    # mass balance: inflow - outflow = demand
    s_junc = starts < nj
    add(starts[s_junc], link_cols[s_junc], -1.0)
    e_junc = ends < nj
    add(ends[e_junc], link_cols[e_junc], 1.0)
    b = np.zeros(nh + nq)
    b[:nj] = coeffs.junction
    if coeffs.pdd_mask is not None and np.any(coeffs.pdd_mask):
        pdd_rows = np.flatnonzero(coeffs.pdd_mask)
        add(pdd_rows, pdd_rows, -1.0)

    fixed = np.arange(nj, nh)
    add(fixed, fixed, 1.0)
    b[nj:nh] = net.fixed_heads()

    # pipes and pumps: h_start - h_end - slope*q = constant
    energy = np.arange(npipe + npump)
    add(nh + energy, starts[energy], 1.0)
    add(nh + energy, ends[energy], -1.0)
    slopes = np.concatenate([np.ones(npipe), np.asarray(coeffs.pump_c2, dtype=float)])
    add(nh + energy, link_cols[energy], -slopes)
    b[nh : nh + npipe] = coeffs.pipe
    b[nh + npipe : nh + npipe + npump] = coeffs.pump_c1

    for w, (valve, status) in enumerate(zip(net.valves, statuses)):
        k = npipe + npump + w
        row = nh + k
        if status == "ACTIVE" and valve.kind == "PRV":
            add(row, ends[k], 1.0)
        elif status == "ACTIVE" and valve.kind == "FCV":
            add(row, link_cols[k], 1.0)
        elif status in ("OPEN", "ACTIVE"):
            add([row, row, row], [starts[k], ends[k], link_cols[k]], [1.0, -1.0, -1.0])
        else:
            raise DimensionMismatch(f"valve {valve.id} has status {status}; prune closed links first")
        b[row] = coeffs.valve[w]

    n = nh + nq
    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return LinearSystem(A, b, system_row_labels(net), system_col_labels(net), nh, statuses)


def system_row_labels(net: Network) -> list[str]:
    return (
        [f"junction:{j.id}" for j in net.junctions]
        + [f"reservoir:{r.id}" for r in net.reservoirs]
        + [f"tank:{t.id}" for t in net.tanks]
        + [f"pipe:{p.id}" for p in net.pipes]
        + [f"pump:{m.id}" for m in net.pumps]
        + [f"valve:{v.id}" for v in net.valves]
    )


def system_col_labels(net: Network) -> list[str]:
    return [f"h:{nid}" for nid in net.node_ids] + [f"q:{lid}" for lid in net.link_ids]


# --------------------------------------------------------------------------
# factorization and solves


class Factorization:
    """LU factors of a square system, dense below ``DENSE_LIMIT`` unknowns."""

    def __init__(self, system: LinearSystem):
        self.system = system
        n = system.size
        self.dense = n < DENSE_LIMIT
        if self.dense:
            M = system.A.toarray()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                self._lu = sla.lu_factor(M, check_finite=False)
            pivots = np.abs(np.diag(self._lu[0]))
            scale = max(1.0, float(np.max(np.abs(M))) if n else 1.0)
            if n and (not np.all(np.isfinite(pivots)) or pivots.min() <= 1e-13 * scale):
                raise SingularSystem("coefficient matrix is singular", implicated_rows(system))
        else:
            try:
                self._lu = spla.splu(system.A, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SingularSystem(f"sparse LU failed ({exc})", implicated_rows(system)) from None
            diag = np.abs(self._lu.U.diagonal())
            if not np.all(np.isfinite(diag)) or diag.min() <= 1e-13:
                raise SingularSystem("coefficient matrix is singular", implicated_rows(system))

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        if self.dense:
            return sla.lu_solve(self._lu, rhs, trans=1 if transpose else 0, check_finite=False)
        return self._lu.solve(np.asarray(rhs, dtype=float), trans="T" if transpose else "N")


def implicated_rows(system: LinearSystem, tol: float = 1e-8) -> list[str]:
    """Row labels taking part in a linear dependency (left null space of A)."""
    n = system.size
    if n == 0 or n > DIAGNOSTIC_LIMIT:
        return []
    U, s, _ = np.linalg.svd(system.A.toarray())
    smax = s[0] if s.size else 1.0
    null = np.flatnonzero(s <= 1e-10 * max(smax, 1.0))
    if null.size == 0:
        null = np.array([n - 1])
    weight = np.abs(U[:, null]).max(axis=1)
    return [system.row_labels[i] for i in np.flatnonzero(weight > tol)]


def solve_linear(system: LinearSystem, factor: Factorization | None = None) -> np.ndarray:
    factor = factor or Factorization(system)
    x = factor.solve(system.b)
    if not np.all(np.isfinite(x)):
        raise SingularSystem("solution is not finite", implicated_rows(system))
    return x


# --------------------------------------------------------------------------
# GP monomial form


@dataclass(frozen=True)
class GPConstraint:
    """One GP constraint: prod(x_hat_i ** a_i) * base ** log_constant (== 1 or <= 1).

    ``exponents`` maps variable labels to a_i.  Keeping the constant as a
    power of the base makes the log transform exact.
    """

    kind: str
    label: str
    exponents: dict[str, float]
    log_constant: float
    base: float

    @property
    def constant(self) -> float:
        try:
            return math.pow(self.base, self.log_constant)
        except OverflowError:
            return math.inf


@dataclass
class GPConstraintSet:
    base: float
    constraints: list[GPConstraint] = field(default_factory=list)

    def to_dict(self) -> dict:
        def finite_or_none(x):
            return x if math.isfinite(x) else None

        return {
            "base": self.base,
            "delta": self.base - 1.0,
            "constraints": [
                {
                    "kind": c.kind,
                    "label": c.label,
                    "exponents": c.exponents,
                    "log_constant": c.log_constant,
                    "constant": finite_or_none(c.constant),
                }
                for c in self.constraints
            ],
        }


def emit_gp_monomials(
    system: LinearSystem,
    base: float,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
) -> GPConstraintSet:
    """Rewrite each row sum(a_i x_i) = beta as prod(x_hat_i ** a_i) * base**(-beta) = 1.

    Optional variable bounds become monomial inequalities
    base**lower / x_hat <= 1 and x_hat / base**upper <= 1.
    """
    if not base > 1.0:
        raise ValueError("GP base must exceed 1")
    A = system.A.tocsr()
    out = GPConstraintSet(base=float(base))
    for i in range(A.shape[0]):
        start, stop = A.indptr[i], A.indptr[i + 1]
        exps = {system.col_labels[j]: float(a) for j, a in zip(A.indices[start:stop], A.data[start:stop]) if a != 0.0}
        out.constraints.append(
            GPConstraint("monomial-equality", system.row_labels[i], exps, -float(system.b[i]), float(base))
        )
    for bounds, sign, tag in ((lower, -1.0, "lower"), (upper, 1.0, "upper")):
        if bounds is None:
            continue
        for j, value in enumerate(bounds):
            if np.isfinite(value):
                label = system.col_labels[j]
                out.constraints.append(
                    GPConstraint("posynomial-inequality", f"{tag}:{label}", {label: sign}, -sign * float(value), float(base))
                )
    return out


def recover_linear_rows(gp: GPConstraintSet, col_labels: list[str]) -> tuple[sp.csr_matrix, np.ndarray]:
    """Take log_base of each monomial equality and rebuild (A, b)."""
    col = {c: j for j, c in enumerate(col_labels)}
    eqs = [c for c in gp.constraints if c.kind == "monomial-equality"]
    rows, cols, vals = [], [], []
    b = np.empty(len(eqs))
    for i, c in enumerate(eqs):
        for label, a in c.exponents.items():
            rows.append(i)
            cols.append(col[label])
            vals.append(a)
        b[i] = -c.log_constant
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(eqs), len(col_labels)))
    return A, b


# --------------------------------------------------------------------------
# debug dump


def dump_system(system: LinearSystem, stem: str | Path) -> list[Path]:
    """Write A and b in Matrix Market format plus a JSON label sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    a_path = stem.with_name(stem.name + ".A.mtx")
    b_path = stem.with_name(stem.name + ".b.mtx")
    labels_path = stem.with_name(stem.name + ".labels.json")
    scipy.io.mmwrite(str(a_path), sp.coo_matrix(system.A), precision=17)
    scipy.io.mmwrite(str(b_path), system.b.reshape(-1, 1), precision=17)
    labels_path.write_text(json.dumps({"rows": system.row_labels, "columns": system.col_labels}, indent=1))
    return [a_path, b_path, labels_path]
