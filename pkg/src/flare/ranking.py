"""Error traces and TC-ITC suspiciousness ranking of transitions.

An error trace is the multiset of firing labels leaving every state that lies
on some path from the initial state to a violation state. Transitions are
then scored like terms in TF-IDF: relative frequency inside a trace (TC)
times a smoothed rarity weight across traces (ITC).
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from flare.errors import DimensionMismatch, EmptyTrace, NotADistribution, UnknownTransition
from flare.tpn import ReachabilityGraph


@dataclass(frozen=True)
class ErrorTrace:
    violation_state: int
    transitions: Counter

    def __post_init__(self):
        object.__setattr__(self, "transitions", Counter(self.transitions))
        if any(n < 1 for n in self.transitions.values()):
            raise ValueError("occurrence counts must be >= 1")

    def __len__(self):
        return sum(self.transitions.values())


@dataclass(frozen=True)
class RankEntry:
    transition: str
    cf: float
    tc_mean: float
    itc: float


@dataclass(frozen=True)
class SuspicionRanking:
    entries: tuple[RankEntry, ...]
    n_traces: int
    model_transitions: int | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def order(self) -> list[str]:
        return [e.transition for e in self.entries]

    def score(self, tid: str) -> float:
        for e in self.entries:
            if e.transition == tid:
                return e.cf
        raise UnknownTransition(tid)

    def to_csv(self, header: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "transition", "cf", "tc_mean", "itc"])
        for i, e in enumerate(self.entries):
            w.writerow([i, e.transition, repr(e.cf), repr(e.tc_mean), repr(e.itc)])
        return buf.getvalue()

    def to_json(self, **meta) -> str:
        doc = {
            "schema": 1,
            **meta,
            "n_traces": self.n_traces,
            "ranking": [
                {"rank": i, "transition": e.transition, "cf": e.cf, "tc_mean": e.tc_mean, "itc": e.itc}
                for i, e in enumerate(self.entries)
            ],
        }
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


@dataclass(frozen=True)
class ExamResult:
    exam_score: float
    rank_of_first_fault: int
    total_ranked: int
    not_found: bool = False
    model_transitions: int | None = None
    fault_ranks: tuple[int, ...] = field(default=())


# ---------------------------------------------------------------- traces

def _time_abstract_nodes(graph: ReachabilityGraph) -> np.ndarray:
    """Merge states connected by tick edges. Ticks never change the marking,
    so every merged group shares one marking and one violation status."""
    parent = list(range(graph.n_states))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s, l, d in zip(graph.edge_src, graph.edge_label, graph.edge_dst):
        if l < 0:
            a, b = find(s), find(d)
            if a != b:
                parent[max(a, b)] = min(a, b)
    return np.fromiter((find(i) for i in range(graph.n_states)), dtype=np.int64, count=graph.n_states)


def extract_error_traces(
    graph: ReachabilityGraph,
    violations: Iterable[int],
    time_abstract: bool = True,
) -> list[ErrorTrace]:
    """One ErrorTrace per violation (or per time-abstract violation group).

    With ``time_abstract`` (the default), states that differ only by elapsed
    time are collapsed first, and an outgoing label is counted once per
    distinct (group, label, target group) edge. With ``time_abstract=False``
    the raw graph is used and every distinct firing edge counts.
    Traces are returned ordered by violation state index.
    """
    violations = sorted(set(violations))
    n = graph.n_states
    for v in violations:
        if not 0 <= v < n:
            raise IndexError(f"violation state {v} not in graph")
    if not violations:
        return []

    src = np.asarray(graph.edge_src, dtype=np.int64)
    lab = np.asarray(graph.edge_label, dtype=np.int64)
    dst = np.asarray(graph.edge_dst, dtype=np.int64)
    if time_abstract:
        node = _time_abstract_nodes(graph)
    else:
        node = np.arange(n, dtype=np.int64)
    src, dst = node[src], node[dst]
    firing = lab >= 0
    fsrc, flab, fdst = src[firing], lab[firing], dst[firing]
    if time_abstract and len(fsrc):
        # distinct quotient edges only
        key = np.stack([fsrc, flab, fdst], axis=1)
        key = np.unique(key, axis=0)
        fsrc, flab, fdst = key[:, 0], key[:, 1], key[:, 2]

    n_labels = len(graph.transition_ids)
    # per-node label counts of outgoing firing edges
    counts = csr_matrix(
        (np.ones(len(fsrc), dtype=np.int64), (fsrc, flab)), shape=(n, max(n_labels, 1))
    )
    # reversed adjacency over all edges (ticks included: they are paths too)
    keep = src != dst
    rev = coo_matrix(
        (np.ones(int(keep.sum()), dtype=np.int8), (dst[keep], src[keep])), shape=(n, n)
    ).tocsr()

    fwd = coo_matrix(
        (np.ones(int(keep.sum()), dtype=np.int8), (src[keep], dst[keep])), shape=(n, n)
    ).tocsr()
    reachable = np.zeros(n, dtype=bool)
    reachable[breadth_first_order(fwd, int(node[graph.initial]), directed=True, return_predecessors=False)] = True

    traces = []
    seen_nodes = set()
    for v in violations:
        root = int(node[v])
        if root in seen_nodes:
            continue
        seen_nodes.add(root)
        order = breadth_first_order(rev, root, directed=True, return_predecessors=False)
        ancestors = order[(order != root) & reachable[order]]
        if len(ancestors) == 0 or not reachable[root]:
            traces.append(ErrorTrace(v, Counter()))
            continue
        totals = np.asarray(counts[ancestors].sum(axis=0)).ravel()
        ms = Counter({graph.transition_ids[k]: int(c) for k, c in enumerate(totals) if c})
        traces.append(ErrorTrace(v, ms))
    return traces


# ---------------------------------------------------------------- scores

def transition_contribution(trace: ErrorTrace, t: str) -> float:
    """Relative frequency of ``t`` in the trace multiset."""
    return float(_tc_exact(trace, t))


def _tc_exact(trace: ErrorTrace, t: str) -> Fraction:
    size = len(trace)
    if size == 0:
        raise EmptyTrace(f"trace of violation state {trace.violation_state} is empty")
    return Fraction(trace.transitions.get(t, 0), size)


def _itc(n_traces: int, n_t: int) -> float:
    return math.log(n_traces / n_t) + 1.0


def inverse_trace_contribution(traces: Sequence[ErrorTrace], t: str) -> float:
    """``ln(|traces| / n_t) + 1`` where ``n_t`` counts traces containing ``t``."""
    if not traces:
        raise ValueError("no traces")
    n_t = sum(1 for tr in traces if tr.transitions.get(t, 0) > 0)
    if n_t == 0:
        raise UnknownTransition(t)
    return _itc(len(traces), n_t)


def rank_transitions(traces: Sequence[ErrorTrace], model_transitions: int | None = None) -> SuspicionRanking:
    """C_F(t) = mean_i TC(t, trace_i) * ITC(t), sorted descending, ties by id."""
    if not traces:
        raise ValueError("no traces")
    for tr in traces:
        if len(tr) == 0:
            raise EmptyTrace(f"trace of violation state {tr.violation_state} is empty")
    sizes = [len(tr) for tr in traces]
    labels = sorted({t for tr in traces for t in tr.transitions})
    k = len(traces)
    entries = []
    for t in labels:
        tc_sum = Fraction(0)
        n_t = 0
        for tr, size in zip(traces, sizes):
            c = tr.transitions.get(t, 0)
            if c:
                n_t += 1
                tc_sum += Fraction(c, size)
        tc_mean = float(tc_sum / k)
        itc = _itc(k, n_t)
        entries.append(RankEntry(t, tc_mean * itc, tc_mean, itc))
    entries.sort(key=lambda e: (-e.cf, e.transition))
    return SuspicionRanking(tuple(entries), k, model_transitions)


def exam_score(ranking: SuspicionRanking, faulty: Iterable[str]) -> ExamResult:
    """Fraction of the ranking examined, in order, up to and including the
    first faulty transition. A missed fault scores 1 and sets ``not_found``."""
    faulty = set(faulty)
    if not faulty:
        raise ValueError("faulty set is empty")
    total = len(ranking)
    if total == 0:
        raise ValueError("ranking is empty")
    ranks = tuple(i for i, e in enumerate(ranking.entries) if e.transition in faulty)
    if not ranks:
        return ExamResult(1.0, total - 1, total, True, ranking.model_transitions)
    first = ranks[0]
    return ExamResult((first + 1) / total, first, total, False, ranking.model_transitions, ranks)


# ---------------------------------------------------------------- KL

def kl_divergence(p: Sequence[float], q: Sequence[float], tol: float = 1e-9) -> float:
    """Relative entropy D(P || Q) in nats.

    Terms with P(i) = 0 contribute 0; P(i) > 0 with Q(i) = 0 makes the result
    ``math.inf``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionMismatch(f"support sizes differ: {p.shape} vs {q.shape}")
    for name, d in (("P", p), ("Q", q)):
        if np.any(d < 0) or not np.all(np.isfinite(d)) or abs(d.sum() - 1.0) > tol:
            raise NotADistribution(f"{name} is not a probability distribution")
    total = 0.0
    terms = []
    for pi, qi in zip(p, q):
        if pi == 0:
            continue
        if qi == 0:
            return math.inf
        terms.append(pi * math.log(pi / qi))
    total = math.fsum(terms)
    return max(total, 0.0)
