"""Time Petri nets and their discrete-time reachability graphs.

Semantics are strong, single-server and discrete: a transition ``t`` enabled
for ``c`` time units may fire when ``eft(t) <= c <= lft(t)``; a unit *tick*
advances every enabled clock and is only allowed while no enabled transition
has reached its ``lft``. Newly enabled transitions (including the one that
just fired) start at clock 0; transitions that stay enabled through the
intermediate marking keep their clock.
"""

from __future__ import annotations

import ast
import json
import numbers
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from flare.errors import InvalidNet, NonIntegerInterval, StateSpaceOverflow

TICK = "τ"
DEFAULT_MAX_STATES = 1_000_000


@dataclass(frozen=True)
class Transition:
    id: str
    eft: int
    lft: int | None = None
    inputs: Mapping[str, int] = field(default_factory=dict)
    outputs: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.id == TICK:
            raise InvalidNet(f"{TICK!r} is reserved for tick edges")
        if self.eft < 0:
            raise InvalidNet(f"{self.id}: negative eft")
        if self.lft is not None and self.lft < self.eft:
            raise InvalidNet(f"{self.id}: eft > lft")
        for arcs in (self.inputs, self.outputs):
            for place, weight in arcs.items():
                if not isinstance(weight, numbers.Integral) or weight < 1:
                    raise InvalidNet(f"{self.id}: arc weight to {place} must be a positive int")
        object.__setattr__(self, "inputs", dict(self.inputs))
        object.__setattr__(self, "outputs", dict(self.outputs))


@dataclass(frozen=True)
class TimePetriNet:
    places: tuple[str, ...]
    transitions: tuple[Transition, ...]
    initial_marking: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "places", tuple(self.places))
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "initial_marking", dict(self.initial_marking))
        known = set(self.places)
        if len(known) != len(self.places):
            raise InvalidNet("duplicate place identifiers")
        ids = [t.id for t in self.transitions]
        if len(set(ids)) != len(ids):
            raise InvalidNet("duplicate transition identifiers")
        for t in self.transitions:
            for place in (*t.inputs, *t.outputs):
                if place not in known:
                    raise InvalidNet(f"{t.id}: arc references unknown place {place!r}")
        for place, tokens in self.initial_marking.items():
            if place not in known:
                raise InvalidNet(f"initial marking references unknown place {place!r}")
            if not isinstance(tokens, numbers.Integral) or tokens < 0:
                raise InvalidNet(f"initial marking of {place!r} must be a non-negative int")

    def transition(self, tid: str) -> Transition:
        for t in self.transitions:
            if t.id == tid:
                return t
        raise KeyError(tid)

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "places": list(self.places),
            "transitions": [
                {
                    "id": t.id,
                    "eft": t.eft,
                    "lft": t.lft,
                    "input_arcs": dict(sorted(t.inputs.items())),
                    "output_arcs": dict(sorted(t.outputs.items())),
                }
                for t in self.transitions
            ],
            "initial_marking": {p: self.initial_marking[p] for p in self.places
                                if self.initial_marking.get(p)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TimePetriNet":
        try:
            transitions = [
                Transition(
                    id=t["id"],
                    eft=t["eft"],
                    lft=t.get("lft"),
                    inputs=t.get("input_arcs", {}),
                    outputs=t.get("output_arcs", {}),
                )
                for t in doc["transitions"]
            ]
            return cls(tuple(doc["places"]), tuple(transitions), doc.get("initial_marking", {}))
        except (KeyError, TypeError) as exc:
            raise InvalidNet(f"malformed net document: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "TimePetriNet":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GraphState:
    marking: dict[str, int]
    clocks: dict[str, int]


class ReachabilityGraph:
    """Explicit state graph. States are stored as ``(marking, clocks)`` tuples
    indexed like ``net.places``; clocks are ``(transition index, elapsed)``
    pairs for enabled transitions only. Edge labels are transition indices,
    or -1 for a tick.
    """

    def __init__(self, net: TimePetriNet, raw_states, edge_src, edge_label, edge_dst):
        self.net = net
        self._raw = raw_states
        self.edge_src = edge_src
        self.edge_label = edge_label
        self.edge_dst = edge_dst
        self.initial = 0
        self.transition_ids = tuple(t.id for t in net.transitions)
        self._out = None

    @classmethod
    def from_edges(cls, n_states: int, edges: Iterable[tuple[int, str, int]]) -> "ReachabilityGraph":
        """Graph given directly as ``(src, label, dst)`` triples, state 0
        initial; ``TICK`` labels are time steps. States carry no marking."""
        edges = list(edges)
        labels = sorted({l for _, l, _ in edges if l != TICK})
        code = {l: k for k, l in enumerate(labels)}
        net = TimePetriNet((), tuple(Transition(l, 0, None) for l in labels), {})
        for s, _, d in edges:
            if not (0 <= s < n_states and 0 <= d < n_states):
                raise IndexError(f"edge endpoint outside [0, {n_states})")
        raw = [((), ())] * n_states
        return cls(
            net, raw,
            [s for s, _, _ in edges],
            [-1 if l == TICK else code[l] for _, l, _ in edges],
            [d for _, _, d in edges],
        )

    def __len__(self):
        return len(self._raw)

    @property
    def n_states(self) -> int:
        return len(self._raw)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    @property
    def n_firing_edges(self) -> int:
        return sum(1 for lab in self.edge_label if lab >= 0)

    def raw_state(self, i: int):
        return self._raw[i]

    def state(self, i: int) -> GraphState:
        marking, clocks = self._raw[i]
        places = self.net.places
        return GraphState(
            {places[k]: v for k, v in enumerate(marking) if v},
            {self.transition_ids[k]: c for k, c in clocks},
        )

    def label(self, code: int) -> str:
        return TICK if code < 0 else self.transition_ids[code]

    @property
    def edges(self) -> list[tuple[int, str, int]]:
        return [(s, self.label(l), d) for s, l, d in zip(self.edge_src, self.edge_label, self.edge_dst)]

    def successors(self, i: int) -> list[tuple[str, int]]:
        if self._out is None:
            out = [[] for _ in range(self.n_states)]
            for s, l, d in zip(self.edge_src, self.edge_label, self.edge_dst):
                out[s].append((l, d))
            self._out = out
        return [(self.label(l), d) for l, d in self._out[i]]

    def to_dot(self) -> str:
        lines = ["digraph reachability {", "  rankdir=LR;", "  s0 [shape=doublecircle];"]
        for s, l, d in zip(self.edge_src, self.edge_label, self.edge_dst):
            lines.append(f'  s{s} -> s{d} [label="{self.label(l)}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _check_integer_intervals(net: TimePetriNet):
    for t in net.transitions:
        bounds = (t.eft,) if t.lft is None else (t.eft, t.lft)
        for b in bounds:
            if isinstance(b, bool) or not isinstance(b, numbers.Integral):
                raise NonIntegerInterval(f"{t.id}: interval bound {b!r} is not an integer")


def build_reachability_graph(net: TimePetriNet, max_states: int = DEFAULT_MAX_STATES) -> ReachabilityGraph:
    """Breadth-first construction of the discrete-time reachability graph.

    Raises StateSpaceOverflow as soon as a new state would exceed
    ``max_states``; the graph is never silently truncated.
    """
    if max_states < 1:
        raise ValueError("max_states must be positive")
    _check_integer_intervals(net)

    pidx = {p: i for i, p in enumerate(net.places)}
    n_t = len(net.transitions)
    pre = [tuple((pidx[p], w) for p, w in sorted(t.inputs.items())) for t in net.transitions]
    delta = []
    for t in net.transitions:
        d = {}
        for p, w in t.inputs.items():
            d[pidx[p]] = d.get(pidx[p], 0) - w
        for p, w in t.outputs.items():
            d[pidx[p]] = d.get(pidx[p], 0) + w
        delta.append(tuple((p, v) for p, v in sorted(d.items()) if v))
    eft = [int(t.eft) for t in net.transitions]
    # unbounded lft: the clock saturates at eft, its exact value no longer matters
    lft = [int(t.lft) if t.lft is not None else -1 for t in net.transitions]
    bounded = [t.lft is not None for t in net.transitions]

    readers = [[] for _ in net.places]
    for k, arcs in enumerate(pre):
        for p, _ in arcs:
            readers[p].append(k)
    # transitions whose enabling can change when k fires
    touched = []
    for k, t in enumerate(net.transitions):
        ps = {pidx[p] for p in t.inputs} | {pidx[p] for p in t.outputs}
        rs = {r for p in ps for r in readers[p]}
        rs.add(k)
        touched.append(tuple(sorted(rs)))
    # transitions that may be disabled by the intermediate marking of k
    consumed = [tuple(sorted({r for p, _ in pre[k] for r in readers[p]} - {k})) for k in range(n_t)]

    def enabled(m, k):
        for p, w in pre[k]:
            if m[p] < w:
                return False
        return True

    m0 = tuple(int(net.initial_marking.get(p, 0)) for p in net.places)
    c0 = tuple((k, 0) for k in range(n_t) if enabled(m0, k))

    raw = [(m0, c0)]
    index = {(m0, c0): 0}
    src, lab, dst = [], [], []
    queue = deque([0])

    def intern(key):
        j = index.get(key)
        if j is None:
            if len(raw) >= max_states:
                raise StateSpaceOverflow(max_states)
            j = len(raw)
            index[key] = j
            raw.append(key)
            queue.append(j)
        return j

    while queue:
        i = queue.popleft()
        m, c = raw[i]
        if not c:
            continue
        clocks = dict(c)
        can_tick = True
        for k, ck in c:
            if bounded[k] and ck >= lft[k]:
                can_tick = False
            if ck < eft[k]:
                continue
            mi = list(m)
            for p, w in pre[k]:
                mi[p] -= w
            nc = dict(clocks)
            del nc[k]
            for r in consumed[k]:
                if r in nc and not enabled(mi, r):
                    del nc[r]
            ml = list(m)
            for p, v in delta[k]:
                ml[p] += v
            for r in touched[k]:
                if enabled(ml, r):
                    if r not in nc:
                        nc[r] = 0
                elif r in nc:
                    del nc[r]
            j = intern((tuple(ml), tuple(sorted(nc.items()))))
            src.append(i)
            lab.append(k)
            dst.append(j)
        if can_tick:
            ct = tuple((k, ck + 1 if bounded[k] or ck < eft[k] else ck) for k, ck in c)
            j = intern((m, ct))
            src.append(i)
            lab.append(-1)
            dst.append(j)

    return ReachabilityGraph(net, raw, src, lab, dst)


class MarkingPredicate:
    """Boolean expression over place token counts, e.g. ``"qA >= 1 and pB == 1"``.

    Place ids that are not Python identifiers can be written ``m["id"]``.
    Only comparisons, boolean and arithmetic operators are accepted.
    """

    _allowed = (
        ast.Expression, ast.BoolOp, ast.And, ast.Or, ast.UnaryOp, ast.Not, ast.USub,
        ast.Compare, ast.Eq, ast.NotEq, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
        ast.BinOp, ast.Add, ast.Sub, ast.Mult, ast.Name, ast.Load, ast.Constant,
        ast.Subscript,
    )

    def __init__(self, expr: str):
        self.expr = expr
        tree = ast.parse(expr, mode="eval")
        for node in ast.walk(tree):
            if not isinstance(node, self._allowed):
                raise ValueError(f"unsupported syntax in predicate: {type(node).__name__}")
            if isinstance(node, ast.Subscript) and not (
                isinstance(node.value, ast.Name) and node.value.id == "m"
            ):
                raise ValueError("only m[...] subscripts are allowed")
        self._code = compile(tree, "<predicate>", "eval")

    def __call__(self, marking: Mapping[str, int]) -> bool:
        env = _MarkingEnv(marking)
        return bool(eval(self._code, {"__builtins__": {}}, env))


class _MarkingEnv(dict):
    def __init__(self, marking):
        super().__init__()
        self.marking = marking

    def __missing__(self, key):
        if key == "m":
            return _Counts(self.marking)
        return self.marking.get(key, 0)


class _Counts:
    def __init__(self, marking):
        self.marking = marking

    def __getitem__(self, key):
        return self.marking.get(key, 0)


Predicate = str | MarkingPredicate | Callable[[GraphState], bool]


def find_violation_states(graph: ReachabilityGraph, predicate: Predicate) -> set[int]:
    """States satisfying ``predicate``.

    ``"deadlock"`` selects states without any outgoing edge. Any other string is
    compiled as a MarkingPredicate; callables receive a GraphState.
    """
    if predicate == "deadlock":
        has_out = bytearray(graph.n_states)
        for s in graph.edge_src:
            has_out[s] = 1
        return {i for i in range(graph.n_states) if not has_out[i]}
    if isinstance(predicate, str):
        predicate = MarkingPredicate(predicate)
    if isinstance(predicate, MarkingPredicate):
        places = graph.net.places
        cache = {}
        found = set()
        for i in range(graph.n_states):
            m = graph.raw_state(i)[0]
            hit = cache.get(m)
            if hit is None:
                hit = cache[m] = predicate({p: v for p, v in zip(places, m)})
            if hit:
                found.add(i)
        return found
    return {i for i in range(graph.n_states) if predicate(graph.state(i))}


def net_from_arcs(places: Iterable[str], transitions: Iterable[tuple], marking: Mapping[str, int]) -> TimePetriNet:
    """Shorthand: transitions given as ``(id, eft, lft, inputs, outputs)``."""
    return TimePetriNet(
        tuple(places),
        tuple(Transition(tid, e, l, dict(i), dict(o)) for tid, e, l, i, o in transitions),
        dict(marking),
    )
