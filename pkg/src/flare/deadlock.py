"""Random process/resource systems with injected forget-to-release faults.

A system S(P, R, M) has ``p`` cyclic processes and ``r`` one-token resources;
``M[i][j]`` says whether process ``i`` uses resource ``j``. Process ``i`` is a
ring of task transitions, one per resource it uses, visited in a random
order. A task takes its resource token on firing (acquire) and puts it back
(release); a faulty task omits the release arc, so the token is lost.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from flare.errors import InfeasibleSpec, StateSpaceOverflow
from flare.ranking import exam_score, extract_error_traces, rank_transitions
from flare.tpn import TimePetriNet, Transition, build_reachability_graph, find_violation_states

log = logging.getLogger(__name__)

CASE_COLUMNS = ["case_id", "states", "edges", "faults", "exam", "rank_first", "seconds",
                "p", "r", "seed", "status", "total_ranked", "exam_best", "exam_worst",
                "regenerated"]


@dataclass(frozen=True)
class SystemSpec:
    p: int
    r: int
    fault_count: int
    seed: int
    access: tuple[tuple[bool, ...], ...] | None = None
    intervals: tuple[tuple[tuple[int, int], ...], ...] | None = None
    order: tuple[tuple[int, ...], ...] | None = None
    density: float = 0.5
    interval_range: tuple[int, int] = (1, 10)
    max_width: int = 0

    def __post_init__(self):
        if self.p < 2 or self.r < 1:
            raise InfeasibleSpec("need p >= 2 and r >= 1")
        if self.fault_count < 0:
            raise InfeasibleSpec("fault_count must be >= 0")
        lo, hi = self.interval_range
        if not 0 <= lo <= hi:
            raise InfeasibleSpec(f"bad interval range {self.interval_range}")
        if self.access is not None:
            if len(self.access) != self.p or any(len(row) != self.r for row in self.access):
                raise InfeasibleSpec("access matrix must be p x r")
            if not all(any(row) for row in self.access):
                raise InfeasibleSpec("every process must access at least one resource")


@dataclass(frozen=True)
class GeneratedCase:
    spec: SystemSpec
    net: TimePetriNet
    faulty_transitions: frozenset[str]
    # resources whose release arc was removed
    leaked: frozenset[int] = field(default=frozenset())

    def to_dict(self) -> dict:
        s = self.spec
        return {
            "schema": 1,
            "seed": s.seed,
            "spec": {
                "p": s.p,
                "r": s.r,
                "fault_count": s.fault_count,
                "density": s.density,
                "interval_range": list(s.interval_range),
                "max_width": s.max_width,
                "access": [[int(x) for x in row] for row in s.access],
                "order": [list(o) for o in s.order],
                "intervals": [[list(iv) for iv in row] for row in s.intervals],
            },
            "faulty_transitions": sorted(self.faulty_transitions),
            "net": self.net.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratedCase":
        sd = doc["spec"]
        spec = SystemSpec(
            p=sd["p"], r=sd["r"], fault_count=sd["fault_count"], seed=doc["seed"],
            access=tuple(tuple(bool(x) for x in row) for row in sd["access"]),
            intervals=tuple(tuple(tuple(iv) for iv in row) for row in sd["intervals"]),
            order=tuple(tuple(o) for o in sd["order"]),
            density=sd.get("density", 0.5),
            interval_range=tuple(sd.get("interval_range", (1, 10))),
            max_width=sd.get("max_width", 0),
        )
        net = TimePetriNet.from_dict(doc["net"])
        faulty = frozenset(doc["faulty_transitions"])
        leaked = frozenset(
            int(t.id.rsplit("_r", 1)[1]) for t in net.transitions if t.id in faulty
        )
        return cls(spec, net, faulty, leaked)


def task_id(i: int, s: int, j: int) -> str:
    return f"p{i}_t{s}_r{j}"


def _resolve(spec: SystemSpec, rng: np.random.Generator) -> SystemSpec:
    access = spec.access
    if access is None:
        rows = []
        for _ in range(spec.p):
            row = rng.random(spec.r) < spec.density
            if not row.any():
                row[rng.integers(spec.r)] = True
            rows.append(tuple(bool(x) for x in row))
        access = tuple(rows)
    order = spec.order
    if order is None:
        order = tuple(
            tuple(int(j) for j in rng.permutation([j for j in range(spec.r) if access[i][j]]))
            for i in range(spec.p)
        )
    intervals = spec.intervals
    if intervals is None:
        lo, hi = spec.interval_range
        rows = []
        for i in range(spec.p):
            row = []
            for _ in order[i]:
                eft = int(rng.integers(lo, hi + 1))
                lft = min(hi, eft + int(rng.integers(0, spec.max_width + 1)))
                row.append((eft, lft))
            rows.append(tuple(row))
        intervals = tuple(rows)
    return replace(spec, access=access, order=order, intervals=intervals)


def generate_case(spec: SystemSpec) -> GeneratedCase:
    """Build the TPN for ``spec``. Unset fields (access matrix, visiting order,
    intervals) are drawn from ``spec.seed``; the same spec always yields the
    same net."""
    rng = np.random.default_rng(spec.seed)
    spec = _resolve(spec, rng)
    tasks = [(i, s) for i in range(spec.p) for s in range(len(spec.order[i]))]
    if spec.fault_count > len(tasks):
        raise InfeasibleSpec(f"{spec.fault_count} faults but only {len(tasks)} tasks")
    picked = rng.choice(len(tasks), size=spec.fault_count, replace=False) if spec.fault_count else []
    faults = {tasks[int(k)] for k in picked}

    places = [f"r{j}" for j in range(spec.r)]
    marking = {f"r{j}": 1 for j in range(spec.r)}
    transitions = []
    faulty = set()
    leaked = set()
    for i in range(spec.p):
        ring = spec.order[i]
        places.extend(f"p{i}_w{s}" for s in range(len(ring)))
        marking[f"p{i}_w0"] = 1
        for s, j in enumerate(ring):
            eft, lft = spec.intervals[i][s]
            tid = task_id(i, s, j)
            outputs = {f"p{i}_w{(s + 1) % len(ring)}": 1}
            if (i, s) in faults:
                faulty.add(tid)
                leaked.add(j)
            else:
                outputs[f"r{j}"] = 1
            transitions.append(Transition(tid, eft, lft, {f"p{i}_w{s}": 1, f"r{j}": 1}, outputs))
    net = TimePetriNet(tuple(places), tuple(transitions), marking)
    return GeneratedCase(spec, net, frozenset(faulty), frozenset(leaked))


def may_deadlock(case: GeneratedCase) -> bool:
    """Cheap necessary condition for a global deadlock: every process uses a
    leaked resource. A process that never needs one can always progress,
    since every healthy task returns its token within a bounded time."""
    if not case.leaked:
        return False
    return all(any(j in case.leaked for j in ring) for ring in case.spec.order)


# ---------------------------------------------------------------- analysis

@dataclass
class CaseResult:
    case_id: str
    faults: int
    p: int
    r: int
    seed: int
    status: str
    states: int | None = None
    edges: int | None = None
    exam: float | None = None
    rank_first: int | None = None
    total_ranked: int | None = None
    exam_best: float | None = None
    exam_worst: float | None = None
    rank_best: int | None = None
    rank_worst: int | None = None
    seconds: float | None = None
    regenerated: int = 0

    def row(self) -> list:
        def fmt(x):
            if x is None:
                return ""
            return repr(x) if isinstance(x, float) else x
        return [fmt(getattr(self, c)) for c in CASE_COLUMNS]


def tie_bounds(ranking, faulty) -> tuple[int, int] | None:
    """0-based best/worst examination positions of the first fault when all
    transitions sharing its score are examined first / last."""
    scores = [e.cf for e in ranking.entries if e.transition in faulty]
    if not scores:
        return None
    top = max(scores)
    best = sum(1 for e in ranking.entries if e.cf > top)
    worst = sum(1 for e in ranking.entries if e.cf >= top) - 1
    return best, worst


def analyze_case(case: GeneratedCase, max_states: int) -> dict:
    """Build, detect deadlocks, rank and score one case. Timing covers graph
    construction and ranking, not generation."""
    t0 = time.perf_counter()
    graph = build_reachability_graph(case.net, max_states)
    violations = find_violation_states(graph, "deadlock")
    out = {"states": graph.n_states, "edges": graph.n_edges, "violations": len(violations)}
    if not violations:
        out["seconds"] = time.perf_counter() - t0
        return out
    traces = [t for t in extract_error_traces(graph, violations) if len(t)]
    ranking = rank_transitions(traces, model_transitions=len(case.net.transitions))
    res = exam_score(ranking, case.faulty_transitions)
    out["seconds"] = time.perf_counter() - t0
    out["ranking"] = ranking
    out["exam"] = res
    return out


@dataclass(frozen=True)
class CampaignParams:
    p_range: tuple[int, int] = (5, 20)
    r_range: tuple[int, int] = (5, 20)
    fault_range: tuple[int, int] = (1, 9)
    cases: int = 100
    seed: int = 0
    max_states: int = 100_000
    max_regenerations: int = 200
    density: float = 0.5
    interval_range: tuple[int, int] = (1, 10)
    max_width: int = 0


def _case_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, dtype=np.uint64)[0])


def run_case(params: CampaignParams, f: int, c: int) -> CaseResult:
    """Draw (p, r), generate, and analyze one case; regenerate with the next
    seed while the net cannot or does not deadlock."""
    case_id = f"f{f}-c{c}"
    regenerated = 0
    for attempt in range(params.max_regenerations + 1):
        seed = _case_seed(params.seed, f, c, attempt)
        rng = np.random.default_rng(seed)
        p = int(rng.integers(params.p_range[0], params.p_range[1] + 1))
        r = int(rng.integers(params.r_range[0], params.r_range[1] + 1))
        spec = SystemSpec(p, r, f, seed, density=params.density,
                          interval_range=params.interval_range, max_width=params.max_width)
        try:
            case = generate_case(spec)
        except InfeasibleSpec:
            regenerated += 1
            continue
        if not may_deadlock(case):
            regenerated += 1
            continue
        try:
            out = analyze_case(case, params.max_states)
        except StateSpaceOverflow:
            return CaseResult(case_id, f, p, r, seed, "overflow", regenerated=regenerated)
        if "exam" not in out:
            regenerated += 1
            continue
        res = out["exam"]
        best, worst = tie_bounds(out["ranking"], case.faulty_transitions)
        n = res.total_ranked
        return CaseResult(
            case_id, f, p, r, seed, "ok",
            states=out["states"], edges=out["edges"],
            exam=res.exam_score, rank_first=res.rank_of_first_fault, total_ranked=n,
            exam_best=(best + 1) / n, exam_worst=(worst + 1) / n,
            rank_best=best, rank_worst=worst,
            seconds=out["seconds"], regenerated=regenerated,
        )
    return CaseResult(case_id, f, 0, 0, 0, "no_deadlock", regenerated=regenerated)


def _run_case_args(args):
    return run_case(*args)


def run_campaign(params: CampaignParams, workers: int = 1) -> list[CaseResult]:
    """Run every (fault count, case index) pair; results come back in a fixed
    order regardless of ``workers``. Overflowing cases are recorded, not fatal."""
    jobs = [(params, f, c) for f in range(params.fault_range[0], params.fault_range[1] + 1)
            for c in range(params.cases)]
    if workers <= 1:
        results = [_run_case_args(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_case_args, jobs, chunksize=4))
    for r in results:
        if r.status != "ok":
            log.info("case %s: %s", r.case_id, r.status)
    return results


def _var(xs):
    return statistics.pvariance(xs) if len(xs) > 1 else 0.0


def summarize(results: Sequence[CaseResult]) -> list[dict]:
    """Per-fault-count aggregates: Table-1 efficiency columns and Table-2
    effectiveness columns (best / worst / average EXAM and rank)."""
    rows = []
    for f in sorted({r.faults for r in results}):
        group = [r for r in results if r.faults == f]
        ok = [r for r in group if r.status == "ok"]
        row = {
            "faults": f,
            "tests": len(ok),
            "overflow": sum(r.status == "overflow" for r in group),
            "no_deadlock": sum(r.status == "no_deadlock" for r in group),
            "regenerated": sum(r.regenerated for r in group),
        }
        if ok:
            row.update({
                "avg_states": statistics.fmean(r.states for r in ok),
                "avg_edges": statistics.fmean(r.edges for r in ok),
                "avg_seconds": statistics.fmean(r.seconds for r in ok),
                "exam_best": statistics.fmean(r.exam_best for r in ok),
                "exam_best_var": _var([r.exam_best for r in ok]),
                "rank_best": statistics.fmean(r.rank_best for r in ok),
                "rank_best_var": _var([r.rank_best for r in ok]),
                "exam_worst": statistics.fmean(r.exam_worst for r in ok),
                "exam_worst_var": _var([r.exam_worst for r in ok]),
                "rank_worst": statistics.fmean(r.rank_worst for r in ok),
                "rank_worst_var": _var([r.rank_worst for r in ok]),
                "exam_avg": statistics.fmean((r.exam_best + r.exam_worst) / 2 for r in ok),
                "rank_avg": statistics.fmean((r.rank_best + r.rank_worst) / 2 for r in ok),
                "exam": statistics.fmean(r.exam for r in ok),
                "exam_var": _var([r.exam for r in ok]),
                "rank": statistics.fmean(r.rank_first for r in ok),
            })
        rows.append(row)
    return rows


def loglog_slope(results: Sequence[CaseResult]) -> float:
    """Least-squares slope of log(seconds) against log(edges) over ok cases."""
    pts = [(math.log(r.edges), math.log(r.seconds)) for r in results
           if r.status == "ok" and r.edges and r.seconds and r.seconds > 0]
    if len(pts) < 2:
        return float("nan")
    x = np.array([a for a, _ in pts])
    y = np.array([b for _, b in pts])
    return float(np.polyfit(x, y, 1)[0])


def iter_rows(results: Sequence[CaseResult]) -> Iterator[list]:
    yield CASE_COLUMNS
    for r in results:
        yield r.row()


__all__ = [
    "SystemSpec", "GeneratedCase", "generate_case", "may_deadlock", "analyze_case",
    "CampaignParams", "CaseResult", "run_case", "run_campaign", "summarize",
    "tie_bounds", "loglog_slope", "iter_rows",
]
