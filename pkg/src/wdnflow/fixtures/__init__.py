"""Shipped test networks with expected values, and a random looped-network generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import InfeasibleSpec
from ..inp import canonicalize, parse_inp
from ..network import Junction, Network, Pipe, Pump, Reservoir

FIXTURE_NAMES = ("three_node", "eight_node_prv", "anytown_like")


@dataclass(frozen=True)
class Fixture:
    name: str
    inp_text: str
    expected: dict

    @property
    def network(self) -> Network:
        return canonicalize(parse_inp(self.inp_text))

    @property
    def notes(self) -> list[str]:
        return list(self.expected.get("notes", []))


def data_dir() -> Path:
    return Path(str(resources.files(__package__) / "data"))


def fixture_path(name: str) -> Path:
    return data_dir() / f"{name}.inp"


def load_fixture(name: str) -> Fixture:
    base = data_dir()
    inp = (base / f"{name}.inp").read_text()
    sidecar = base / f"{name}.json"
    expected = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Fixture(name, inp, expected)


def load_network(name: str) -> Network:
    return load_fixture(name).network


# Hazen-Williams constant for the generated pipes: D = 0.2 m, C = 100
_GEN_DIAMETER = 0.2
_GEN_C = 100.0
_GEN_R_PER_METRE = 10.667 * _GEN_C**-1.852 * _GEN_DIAMETER**-4.871


def generate_random_network(
    seed: int,
    n_junctions: int,
    loop_fraction: float = 0.2,
    r_spread: float = 1.5,
    r_min: float = 2000.0,
    total_demand: float = 0.06,
    sized: bool = True,
) -> Network:
    """Random connected network fed by one reservoir through one pump.

    Junctions are scattered in a 1 km square and joined by a nearest-neighbour
    spanning tree (``n_junctions - 1`` pipes).  ``round(loop_fraction *
    (n_junctions - 1))`` extra pipes close loops.  Pipe resistances are drawn
    log-uniformly from [r_min, r_min * 10**r_spread] (SI) and realised as
    pipe lengths at a fixed diameter and roughness.  With ``sized`` the drawn
    values are handed out like a designer sizes pipes: the smallest
    resistance goes to the tree pipe feeding the most demand and loop pipes
    get the largest ones.  Demands sum to ``total_demand`` m^3/s.
    """
    if n_junctions < 2:
        raise InfeasibleSpec("need at least two junctions")
    if loop_fraction < 0 or r_spread < 0:
        raise InfeasibleSpec("loop_fraction and r_spread must be non-negative")
    rng = np.random.default_rng(seed)
    n = n_junctions
    xy = rng.uniform(0.0, 1000.0, size=(n, 2))
    edges: list[tuple[int, int]] = []
    present: set[tuple[int, int]] = set()
    for i in range(1, n):
        dist = np.linalg.norm(xy[:i] - xy[i], axis=1)
        j = int(np.argmin(dist))
        edges.append((j, i))
        present.add((min(i, j), max(i, j)))

    n_extra = int(round(loop_fraction * (n - 1)))
    capacity = n * (n - 1) // 2 - (n - 1)
    if n_extra > capacity:
        raise InfeasibleSpec(f"{n_extra} loop pipes requested but only {capacity} node pairs remain")
    if n_extra:
        candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in present]
        lengths = np.array([np.linalg.norm(xy[i] - xy[j]) for i, j in candidates])
        # prefer short loop pipes, as in real layouts, without making them deterministic
        weights = np.exp(-lengths / 250.0) + 1e-12
        picks = rng.choice(len(candidates), size=n_extra, replace=False, p=weights / weights.sum())
        edges += [candidates[k] for k in sorted(picks)]

    resistances = r_min * 10.0 ** rng.uniform(0.0, r_spread, size=len(edges))
    shares = rng.uniform(0.5, 1.5, size=n)
    demands = total_demand * shares / shares.sum()
    if sized:
        carried = np.zeros(len(edges))
        subtree = demands.copy()
        # tree edges were added child-last, so a reverse sweep accumulates subtree demand
        for k in range(n - 2, -1, -1):
            parent, child = edges[k]
            carried[k] = subtree[child]
            subtree[parent] += subtree[child]
        order = np.argsort(-carried, kind="stable")
        ranked = np.empty_like(resistances)
        ranked[order] = np.sort(resistances)
        resistances = ranked
    elevations = rng.uniform(0.0, 20.0, size=n)

    junctions = [Junction(f"J{i + 1}", float(elevations[i]), float(demands[i])) for i in range(n)]
    pipes = [
        Pipe(f"P{k + 1}", f"J{a + 1}", f"J{b + 1}", float(R / _GEN_R_PER_METRE), _GEN_DIAMETER, _GEN_C)
        for k, ((a, b), R) in enumerate(zip(edges, resistances))
    ]
    # pump sized so the design point lifts the total demand by 40 m
    design_q, design_h = 1.5 * total_demand, 40.0
    h0 = 4.0 / 3.0 * design_h
    pump = Pump("PU1", "R1", "J1", h0, h0 / (2.0 * design_q) ** 2, 2.0)
    return Network(
        junctions=junctions,
        reservoirs=[Reservoir("R1", 30.0)],
        pipes=pipes,
        pumps=[pump],
        headloss_formula="H-W",
        title=f"random network seed={seed} n={n} loops={loop_fraction} spread={r_spread}",
        source_units="LPS",
    )
