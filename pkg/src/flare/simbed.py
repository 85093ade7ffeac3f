"""Random component systems with range specifications and injected faults.

Components are wired as a DAG. Every connection is its own variable shared
by one output port and one input port; components without predecessors read
one boundary input and components without successors write one boundary
output. A value passes when it lies inside its variable's closed range.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from flare.diagnosis import (
    MAX_ITER, MU_MIN, RHO_MIN, DiagnosisVerdict, TestResults, diagnose_component,
    fit_component, rank_components,
)
from flare.errors import InfeasibleTopology

log = logging.getLogger(__name__)

DEFAULT_FAILURE_PROBABILITY = 0.7
ACCURACY_COLUMNS = ["components", "avg_io", "repeats", "accuracy_mean", "accuracy_std"]


@dataclass(frozen=True)
class Component:
    id: str
    failure_probability: float
    inputs: tuple[int, ...]  # variable indices
    outputs: tuple[int, ...]


@dataclass(frozen=True)
class ComponentSystem:
    components: tuple[Component, ...]  # topological order
    ranges: tuple[tuple[float, float], ...]  # per variable
    connections: tuple[tuple[str, str, int], ...]  # (source, target, variable)
    seed: int | None = None

    def __post_init__(self):
        idx = {c.id: k for k, c in enumerate(self.components)}
        if len(idx) != len(self.components):
            raise InfeasibleTopology("duplicate component ids")
        writer = {}
        for c in self.components:
            if not 0.0 <= c.failure_probability <= 1.0:
                raise InfeasibleTopology(f"bad failure probability for {c.id}")
            for v in c.outputs:
                if v in writer:
                    raise InfeasibleTopology(f"variable {v} has two writers")
                writer[v] = c.id
        for c in self.components:
            for v in c.inputs:
                w = writer.get(v)
                if w is not None and idx[w] >= idx[c.id]:
                    raise InfeasibleTopology("components are not in topological order")
        for lo, hi in self.ranges:
            if not lo <= hi:
                raise InfeasibleTopology("empty range")

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.components]

    @property
    def n_variables(self) -> int:
        return len(self.ranges)

    def writer_of(self) -> dict[int, str]:
        return {v: c.id for c in self.components for v in c.outputs}

    def boundary_inputs(self) -> list[int]:
        w = self.writer_of()
        return sorted({v for c in self.components for v in c.inputs if v not in w})

    def faulty(self) -> set[str]:
        return {c.id for c in self.components if c.failure_probability > 0}

    def in_degree(self) -> np.ndarray:
        return np.array([sum(1 for s, t, _ in self.connections if t == c.id) for c in self.components])

    def out_degree(self) -> np.ndarray:
        return np.array([sum(1 for s, t, _ in self.connections if s == c.id) for c in self.components])

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "seed": self.seed,
            "components": [
                {"id": c.id, "failure_probability": c.failure_probability,
                 "inputs": list(c.inputs), "outputs": list(c.outputs)}
                for c in self.components
            ],
            "ranges": [list(r) for r in self.ranges],
            "connections": [list(x) for x in self.connections],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ComponentSystem":
        comps = tuple(
            Component(c["id"], float(c["failure_probability"]), tuple(c["inputs"]), tuple(c["outputs"]))
            for c in doc["components"]
        )
        return cls(
            comps,
            tuple((float(lo), float(hi)) for lo, hi in doc["ranges"]),
            tuple((s, t, int(v)) for s, t, v in doc["connections"]),
            doc.get("seed"),
        )

    def blinded(self) -> "ComponentSystem":
        """Copy with every failure probability set to 0."""
        comps = tuple(Component(c.id, 0.0, c.inputs, c.outputs) for c in self.components)
        return ComponentSystem(comps, self.ranges, self.connections, self.seed)


def generate_system(
    n_components: int,
    avg_io: float,
    fault_count: int,
    seed: int,
    failure_probability: float = DEFAULT_FAILURE_PROBABILITY,
) -> ComponentSystem:
    """Random DAG with round(avg_io * n) connections between distinct ordered
    pairs, so mean in-degree and mean out-degree both equal avg_io."""
    n = n_components
    if n < 2:
        raise InfeasibleTopology("need at least 2 components")
    if avg_io < 1:
        raise InfeasibleTopology("avg_io must be >= 1")
    n_edges = int(round(avg_io * n))
    if n_edges > n * (n - 1) // 2:
        raise InfeasibleTopology(f"avg_io={avg_io} needs {n_edges} connections; a {n}-node DAG has at most {n * (n - 1) // 2}")
    if not 0 <= fault_count <= n:
        raise InfeasibleTopology(f"fault_count={fault_count} not in [0, {n}]")
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = sorted(pairs[k] for k in rng.choice(len(pairs), size=n_edges, replace=False))
    ids = [f"c{i}" for i in range(n)]

    ins = [[] for _ in range(n)]
    outs = [[] for _ in range(n)]
    connections = []
    n_var = 0
    for i, j in chosen:
        outs[i].append(n_var)
        ins[j].append(n_var)
        connections.append((ids[i], ids[j], n_var))
        n_var += 1
    for i in range(n):
        if not ins[i]:
            ins[i].append(n_var)
            n_var += 1
        if not outs[i]:
            outs[i].append(n_var)
            n_var += 1
    lo = rng.uniform(-100.0, 100.0, n_var)
    width = rng.uniform(1.0, 100.0, n_var)
    ranges = tuple((float(a), float(a + w)) for a, w in zip(lo, width))

    faulty = set(int(k) for k in rng.choice(n, size=fault_count, replace=False)) if fault_count else set()
    comps = tuple(
        Component(ids[i], failure_probability if i in faulty else 0.0, tuple(ins[i]), tuple(outs[i]))
        for i in range(n)
    )
    return ComponentSystem(comps, ranges, tuple(connections), seed)


@dataclass(frozen=True)
class SimulatedDataset:
    values: np.ndarray  # (n_cases, n_variables)
    passed: np.ndarray  # same shape, bool
    faulty: dict  # component id -> ground-truth flag

    def component_tests(self, system: ComponentSystem):
        """(input streams, output TestResults) per component id."""
        out = {}
        for c in system.components:
            inputs = [self.passed[:, v] for v in c.inputs]
            tests = TestResults(tuple(self.passed[:, v] for v in c.outputs))
            out[c.id] = (inputs, tests)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"v{k}" for k in range(self.values.shape[1])])
        for row in self.values:
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def simulate(system: ComponentSystem, n_cases: int, seed: int, propagation: float = 1.0) -> SimulatedDataset:
    """Evaluate every test case in topological order. A component whose fault
    fires (with its failure probability) writes out-of-range values on all its
    outputs; a component with a failing input does the same with probability
    ``propagation``; otherwise outputs are uniform inside their ranges.
    Out-of-range values lie strictly above the range, within one range width."""
    if n_cases < 2:
        raise ValueError("n_cases must be >= 2")
    rng = np.random.default_rng(seed)
    lo = np.array([r[0] for r in system.ranges])
    hi = np.array([r[1] for r in system.ranges])
    span = np.maximum(hi - lo, 1.0)
    values = np.empty((n_cases, system.n_variables))
    passed = np.ones((n_cases, system.n_variables), dtype=bool)
    for v in system.boundary_inputs():
        values[:, v] = rng.uniform(lo[v], hi[v], n_cases)
    for c in system.components:
        in_ok = passed[:, list(c.inputs)].all(axis=1) if c.inputs else np.ones(n_cases, dtype=bool)
        fires = rng.random(n_cases) < c.failure_probability
        spread = rng.random(n_cases) < propagation
        bad = fires | (~in_ok & spread)
        for v in c.outputs:
            good_val = rng.uniform(lo[v], hi[v], n_cases)
            # strictly above hi: (0, 1] fraction of the span
            bad_val = hi[v] + span[v] * (1.0 - rng.random(n_cases))
            values[:, v] = np.where(bad, bad_val, good_val)
            passed[:, v] = ~bad
    return SimulatedDataset(values, passed, {c.id: c.failure_probability > 0 for c in system.components})


def passes(system: ComponentSystem, values: np.ndarray) -> np.ndarray:
    lo = np.array([r[0] for r in system.ranges])
    hi = np.array([r[1] for r in system.ranges])
    return (values >= lo) & (values <= hi)


def diagnose_system(
    system: ComponentSystem,
    passed: np.ndarray,
    seed: int,
    mu_min: float = MU_MIN,
    rho_min: float = RHO_MIN,
    max_iter: int = MAX_ITER,
) -> dict[str, tuple]:
    """Fit and diagnose every component from pass/fail data only. Each
    component gets its own generator spawned from ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(len(system.components))
    writer = system.writer_of()
    out = {}
    for c, ss in zip(system.components, streams):
        inputs = [passed[:, v] for v in c.inputs if v in writer]
        tests = TestResults(tuple(passed[:, v] for v in c.outputs))
        cm = fit_component(c.id, inputs or None, tests, mu_min=mu_min, rho_min=rho_min,
                           max_iter=max_iter, rng=np.random.default_rng(ss))
        out[c.id] = (cm, diagnose_component(cm, tests))
    return out


def run_one(n_components, avg_io, fault_count, n_cases, seed, max_iter=MAX_ITER,
            failure_probability=DEFAULT_FAILURE_PROBABILITY) -> dict:
    """Generate, simulate, diagnose and score one system."""
    ss = np.random.SeedSequence(seed)
    s_gen, s_sim, s_diag = (int(x.generate_state(1, dtype=np.uint64)[0]) for x in ss.spawn(3))
    system = generate_system(n_components, avg_io, min(fault_count, n_components), s_gen, failure_probability)
    data = simulate(system, n_cases, s_sim)
    # the diagnosis never sees failure probabilities
    result = diagnose_system(system.blinded(), data.passed, s_diag, max_iter=max_iter)
    verdicts = {cid: v for cid, (_, v) in result.items()}
    correct = sum(verdicts[cid].faulty == data.faulty[cid] for cid in system.ids)
    ranked = rank_components(system.ids, verdicts)
    return {
        "accuracy": correct / len(system.ids),
        "ranked": [r.component for r in ranked],
        "faulty": sorted(c for c, f in data.faulty.items() if f),
    }


def _run_job(args):
    n, io_, k, n_cases, faults, seed, max_iter = args
    case_seed = int(np.random.SeedSequence([seed, n, int(round(io_ * 1000)), k]).generate_state(1, dtype=np.uint64)[0])
    try:
        return run_one(n, io_, faults, n_cases, case_seed, max_iter)["accuracy"]
    except InfeasibleTopology as e:
        log.info("skipping n=%s avg_io=%s: %s", n, io_, e)
        return None


def evaluate_accuracy(
    components: Sequence[int],
    avg_io: Sequence[float],
    n_cases: int = 100,
    repeats: int = 40,
    seed: int = 0,
    fault_count: int = 2,
    max_iter: int = MAX_ITER,
    workers: int = 1,
) -> list[dict]:
    """Accuracy per (component count, avg_io) configuration: fraction of
    components whose verdict matches the injected ground truth, averaged over
    ``repeats`` generated systems. Infeasible configurations are skipped."""
    jobs = [(n, a, k, n_cases, fault_count, seed, max_iter)
            for n in components for a in avg_io for k in range(repeats)]
    if workers <= 1:
        acc = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            acc = list(pool.map(_run_job, jobs, chunksize=8))
    rows = []
    it = iter(acc)
    for n in components:
        for a in avg_io:
            vals = [next(it) for _ in range(repeats)]
            vals = [v for v in vals if v is not None]
            if not vals:
                continue
            rows.append({
                "components": n,
                "avg_io": a,
                "repeats": len(vals),
                "accuracy_mean": statistics.fmean(vals),
                "accuracy_std": statistics.pstdev(vals) if len(vals) > 1 else 0.0,
            })
    return rows


def marginal(rows: Sequence[dict], axis: str) -> list[dict]:
    """Repeat-weighted mean accuracy along one axis ("components" or "avg_io")."""
    out = []
    for key in sorted({r[axis] for r in rows}):
        group = [r for r in rows if r[axis] == key]
        w = sum(r["repeats"] for r in group)
        out.append({axis: key, "repeats": w,
                    "accuracy_mean": math.fsum(r["accuracy_mean"] * r["repeats"] for r in group) / w})
    return out


def accuracy_csv(rows: Sequence[dict], header: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ACCURACY_COLUMNS)
    for r in rows:
        w.writerow([r["components"], r["avg_io"], r["repeats"], repr(r["accuracy_mean"]), repr(r["accuracy_std"])])
    return buf.getvalue()


__all__ = [
    "Component", "ComponentSystem", "SimulatedDataset", "generate_system", "simulate",
    "diagnose_system", "evaluate_accuracy", "run_one", "marginal", "accuracy_csv", "passes",
    "DiagnosisVerdict",
]
