"""Command-line front end: solve, compare, check, bench and gp-export over `.inp` files.

Exit codes depend only on the failure class:

    0  success
    2  unreadable file or parse error
    3  validation failure
    4  singular linear system
    5  iteration did not converge (max_iter, divergence, Newton stall)
    6  states being compared do not cover the same ids
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import dump_system, emit_gp_monomials
from .errors import (
    DimensionMismatch,
    Diverged,
    NewtonStall,
    ParseError,
    SingularSystem,
    ValidationError,
)
from .fixtures import data_dir
from .inp import load_network
from .network import Network, prune_closed, validate
from .oracle import compare, load_reference_state, newton_iterate
from .solver import (
    AccelPolicy,
    HydraulicState,
    InitialFlows,
    SolverConfig,
    SolverReport,
    diagnose_initial_point,
    linear_system_at,
    run,
)

SCHEMA_VERSION = 1
TOOL = "wdnflow"

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_SINGULAR = 4
EXIT_NOT_CONVERGED = 5
EXIT_MISMATCH = 6


class CliFailure(Exception):
    def __init__(self, code: int, message: str, document: dict | None = None):
        super().__init__(message)
        self.code = code
        self.document = document


@dataclass
class ResultDocument:
    """Machine-readable output of solve/compare; heads in m and flows in m^3/s."""

    network: str
    source_units: str
    counts: dict[str, int]
    n_variables: int
    heads: dict[str, float]
    flows: dict[str, float]
    report: dict
    seed: int | None = None
    metrics: dict | None = None
    validation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "tool": TOOL,
            "version": __version__,
            "seed": self.seed,
            "network": self.network,
            "source_units": self.source_units,
            "result_units": {"head": "m", "flow": "m3/s"},
            "counts": self.counts,
            "n_variables": self.n_variables,
            "heads": self.heads,
            "flows": self.flows,
            "report": self.report,
            "validation": self.validation,
        }
        if self.metrics is not None:
            doc["metrics"] = self.metrics
        return doc

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "id", "value", "unit"])
        for nid, h in self.heads.items():
            writer.writerow(["head", nid, repr(h), "m"])
        for lid, q in self.flows.items():
            writer.writerow(["flow", lid, repr(q), "m3/s"])
        return buf.getvalue()


# --------------------------------------------------------------------------
# argument parsing


def _parse_init(text: str) -> InitialFlows:
    text = text.strip().lower()
    if text == "zeros":
        return InitialFlows.zeros()
    kind, _, value = text.partition("=")
    try:
        if kind == "uniform" and value:
            return InitialFlows.uniform(float(value))
        if kind == "random" and value:
            return InitialFlows.random(int(value))
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected zeros, uniform=Q or random=SEED, got {text!r}")


def _parse_accel(text: str) -> AccelPolicy:
    try:
        return AccelPolicy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, default=0.01, help="stop when successive iterates differ less (default 0.01)")
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--accel", type=_parse_accel, default=AccelPolicy(), help="off | uniform=A | adaptive")
    p.add_argument(
        "--init", type=_parse_init, default=InitialFlows(), help="zeros | uniform=Q (m3/s) | random=SEED"
    )
    p.add_argument("--monitor", action="store_true", help="estimate the contraction factor every iteration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL, description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve a network and print heads, flows and the solver report")
    solve.add_argument("path")
    _add_solver_flags(solve)
    solve.add_argument("--format", choices=("json", "csv"), default="json")
    solve.add_argument("--trace", metavar="FILE", help="write the per-iteration error trace as CSV")
    solve.add_argument("--dump-system", metavar="STEM", help="write the final linear system as Matrix Market files")

    comp = sub.add_parser("compare", help="solve and compare against Newton or a reference JSON state")
    comp.add_argument("path")
    comp.add_argument("--against", default="newton", help="'newton' or a JSON file with heads and flows")
    _add_solver_flags(comp)

    check = sub.add_parser("check", help="validation, invertibility and contraction at the initial point")
    check.add_argument("path")
    check.add_argument("--init", type=_parse_init, default=InitialFlows())

    bench = sub.add_parser("bench", help="iterations and wall time per network, as CSV")
    bench.add_argument("directory", nargs="?", help="directory of .inp files (default: shipped fixtures)")
    bench.add_argument("--repeats", type=int, default=3, help="random initializations per network")
    bench.add_argument("--threshold", type=float, default=0.01)
    bench.add_argument("--max-iter", type=int, default=5000)
    bench.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    gp = sub.add_parser("gp-export", help="write the monomial form of the linearized system as JSON")
    gp.add_argument("path")
    base = gp.add_mutually_exclusive_group()
    base.add_argument("--base", type=float, help="GP base b > 1 (default 2)")
    base.add_argument("--delta", type=float, help="GP base given as b = 1 + delta")
    gp.add_argument("--init", type=_parse_init, default=InitialFlows())
    gp.add_argument("--at", choices=("initial", "solution"), default="initial", help="linearization point")
    gp.add_argument("-o", "--output", metavar="FILE")
    return parser


# --------------------------------------------------------------------------
# shared steps


def _load(path: str) -> Network:
    try:
        return load_network(path)
    except OSError as exc:
        raise CliFailure(EXIT_PARSE, f"cannot read {path}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise CliFailure(EXIT_PARSE, f"cannot read {path}: not a text file") from None
    except ParseError as exc:
        raise CliFailure(EXIT_PARSE, f"{path}: {exc}") from None
    except ValidationError as exc:
        raise CliFailure(EXIT_VALIDATION, f"{path}: {exc}") from None


def _validated(path: str) -> tuple[Network, dict]:
    net = _load(path)
    report = validate(prune_closed(net))
    if not report.overall_ok:
        raise CliFailure(EXIT_VALIDATION, f"{path}: " + "; ".join(report.reasons), {"validation": report.to_dict()})
    return net, report.to_dict()


def _config(args) -> SolverConfig:
    try:
        return SolverConfig(
            threshold=args.threshold,
            max_iter=args.max_iter,
            accel=args.accel,
            init=args.init,
            monitor_contraction=args.monitor,
        )
    except ValueError as exc:
        raise CliFailure(EXIT_VALIDATION, str(exc)) from None


def _seed(init: InitialFlows) -> int | None:
    return init.seed if init.kind == "random" else None


def _document(path: str, net: Network, state: HydraulicState, report: SolverReport, seed, validation) -> ResultDocument:
    return ResultDocument(
        network=Path(path).name,
        source_units=net.source_units,
        counts=net.counts(),
        n_variables=net.n_variables,
        heads=state.heads,
        flows=state.flows,
        report=report.to_dict(),
        seed=seed,
        validation=validation,
    )


def _solve(path: str, args) -> tuple[Network, HydraulicState, SolverReport, dict]:
    net, validation = _validated(path)
    cfg = _config(args)
    try:
        state, report = run(net, cfg)
    except SingularSystem as exc:
        raise CliFailure(EXIT_SINGULAR, str(exc)) from None
    except Diverged as exc:
        doc = _document(path, net, exc.state, exc.report, _seed(cfg.init), validation)
        raise CliFailure(EXIT_NOT_CONVERGED, f"diverged: {exc}", doc.to_dict()) from None
    return net, state, report, validation


# --------------------------------------------------------------------------
# commands


def cmd_solve(args) -> tuple[int, str]:
    net, state, report, validation = _solve(args.path, args)
    if args.trace:
        Path(args.trace).write_text(report.trace_csv())
    if args.dump_system:
        system = linear_system_at(net, _config(args), state, report.final_statuses)
        dump_system(system, args.dump_system)
    doc = _document(args.path, net, state, report, _seed(args.init), validation)
    text = doc.to_csv() if args.format == "csv" else json.dumps(doc.to_dict(), indent=2)
    if not report.converged:
        raise CliFailure(EXIT_NOT_CONVERGED, f"not converged after {report.iterations_used} iterations", doc.to_dict())
    return EXIT_OK, text


def cmd_compare(args) -> tuple[int, str]:
    net, state, report, validation = _solve(args.path, args)
    if args.against == "newton":
        try:
            reference = newton_iterate(net).state
        except NewtonStall as exc:
            raise CliFailure(EXIT_NOT_CONVERGED, f"reference solve failed: {exc}") from None
    else:
        try:
            reference = load_reference_state(args.against)
        except OSError as exc:
            raise CliFailure(EXIT_PARSE, f"cannot read {args.against}: {exc.strerror or exc}") from None
        except (json.JSONDecodeError, ValueError) as exc:
            raise CliFailure(EXIT_PARSE, f"{args.against}: {exc}") from None
        except DimensionMismatch as exc:
            raise CliFailure(EXIT_MISMATCH, str(exc)) from None
    try:
        metrics = compare(state, reference)
    except DimensionMismatch as exc:
        raise CliFailure(EXIT_MISMATCH, str(exc)) from None
    doc = _document(args.path, net, state, report, _seed(args.init), validation)
    doc.metrics = {"against": args.against, **metrics.to_dict()}
    if not report.converged:
        raise CliFailure(EXIT_NOT_CONVERGED, f"not converged after {report.iterations_used} iterations", doc.to_dict())
    return EXIT_OK, json.dumps(doc.to_dict(), indent=2)


def cmd_check(args) -> tuple[int, str]:
    net = _load(args.path)
    report = validate(prune_closed(net))
    try:
        diag = diagnose_initial_point(net, SolverConfig(init=args.init)).to_dict()
    except (ValidationError, ValueError, ArithmeticError) as exc:
        # parameter problems are already listed in the validation block
        diag = {"invertible": False, "message": str(exc)}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tool": TOOL,
        "version": __version__,
        "network": Path(args.path).name,
        "counts": net.counts(),
        "validation": report.to_dict(),
        **diag,
    }
    text = json.dumps(doc, indent=2)
    if not report.overall_ok:
        raise CliFailure(EXIT_VALIDATION, "; ".join(report.reasons), doc)
    if not diag["invertible"]:
        raise CliFailure(EXIT_SINGULAR, diag.get("message") or "coefficient matrix is singular", doc)
    return EXIT_OK, text


BENCH_COLUMNS = [
    "network", "junctions", "reservoirs", "tanks", "pipes", "pumps", "valves",
    "n_variables", "repeats", "converged_runs", "iterations_mean", "wall_time_mean_s",
]


def bench_network(path: str, repeats: int, threshold: float, max_iter: int) -> dict:
    """Average iterations and wall time over ``repeats`` seeded random initializations."""
    net = load_network(path)
    iterations, times, converged = [], [], 0
    for seed in range(repeats):
        cfg = SolverConfig(threshold=threshold, max_iter=max_iter, init=InitialFlows.random(seed))
        try:
            _, report = run(net, cfg)
        except (Diverged, SingularSystem) as exc:
            report = getattr(exc, "report", None)
            if report is None:
                continue
        iterations.append(report.iterations_used)
        times.append(report.wall_time)
        converged += report.converged
    row = {"network": Path(path).stem, **net.counts(), "n_variables": net.n_variables}
    row.update(
        repeats=repeats,
        converged_runs=converged,
        iterations_mean=float(np.mean(iterations)) if iterations else math.nan,
        wall_time_mean_s=float(np.mean(times)) if times else math.nan,
    )
    return row


def cmd_bench(args) -> tuple[int, str]:
    directory = Path(args.directory) if args.directory else data_dir()
    if not directory.is_dir():
        raise CliFailure(EXIT_PARSE, f"cannot read directory {directory}")
    paths = sorted(str(p) for p in directory.glob("*.inp"))
    if args.repeats < 1:
        raise CliFailure(EXIT_VALIDATION, "--repeats must be at least 1")
    for p in paths:
        _validated(p)
    jobs = [(p, args.repeats, args.threshold, args.max_iter) for p in paths]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(bench_network, *zip(*jobs))) if jobs else []
    else:
        rows = [bench_network(*job) for job in jobs]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return EXIT_OK, buf.getvalue()


def cmd_gp_export(args) -> tuple[int, str]:
    if args.delta is not None:
        base = 1.0 + args.delta
    else:
        base = args.base if args.base is not None else 2.0
    if not base > 1.0:
        raise CliFailure(EXIT_VALIDATION, f"GP base must exceed 1, got {base}")
    net, _ = _validated(args.path)
    cfg = SolverConfig(init=args.init, gp_base=base)
    state, statuses = None, None
    if args.at == "solution":
        try:
            state, report = run(net, cfg)
        except SingularSystem as exc:
            raise CliFailure(EXIT_SINGULAR, str(exc)) from None
        except Diverged as exc:
            raise CliFailure(EXIT_NOT_CONVERGED, f"diverged: {exc}") from None
        statuses = report.final_statuses
    try:
        system = linear_system_at(net, cfg, state, statuses)
    except SingularSystem as exc:
        raise CliFailure(EXIT_SINGULAR, str(exc)) from None
    gp = emit_gp_monomials(system, base)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tool": TOOL,
        "version": __version__,
        "network": Path(args.path).name,
        "linearization_point": args.at,
        "variables": system.col_labels,
        "working_units": {"head": "m", "flow_m3s": cfg.flow_unit},
        **gp.to_dict(),
    }
    text = json.dumps(doc, indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
        return EXIT_OK, ""
    return EXIT_OK, text


COMMANDS = {
    "solve": cmd_solve,
    "compare": cmd_compare,
    "check": cmd_check,
    "bench": cmd_bench,
    "gp-export": cmd_gp_export,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code, text = COMMANDS[args.command](args)
    except CliFailure as exc:
        if exc.document is not None:
            print(json.dumps(exc.document, indent=2))
        print(f"{TOOL} {args.command}: {exc}", file=sys.stderr)
        return exc.code
    if text:
        print(text, end="" if text.endswith("\n") else "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
