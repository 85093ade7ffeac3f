"""Independent reference implementations used only by the tests.

They are deliberately naive: dictionaries instead of tuples, full rescans
instead of incremental updates, explicit enumeration instead of dynamic
programming.
"""

import itertools
import math
from collections import Counter, deque

import numpy as np


# ---------------------------------------------------------------- TPN

def tpn_bfs(net, max_states=200_000):
    """Discrete-time strong semantics written from the definition. Returns
    (states as frozensets, firing edge count, tick edge count, deadlocks)."""
    places = list(net.places)
    trans = {t.id: t for t in net.transitions}

    def enabled(m, t):
        return all(m[p] >= w for p, w in t.inputs.items())

    def key(m, clk):
        return (tuple(sorted(m.items())), tuple(sorted(clk.items())))

    m0 = {p: net.initial_marking.get(p, 0) for p in places}
    c0 = {tid: 0 for tid, t in trans.items() if enabled(m0, t)}
    start = key(m0, c0)
    seen = {start: (m0, c0)}
    queue = deque([start])
    n_fire = n_tick = 0
    deadlocks = []
    while queue:
        k = queue.popleft()
        m, clk = seen[k]
        succ = []
        for tid, c in clk.items():
            t = trans[tid]
            if c < t.eft:
                continue
            mid = dict(m)
            for p, w in t.inputs.items():
                mid[p] -= w
            new = dict(mid)
            for p, w in t.outputs.items():
                new[p] += w
            nclk = {}
            for uid, u in trans.items():
                if not enabled(new, u):
                    continue
                persistent = uid != tid and uid in clk and enabled(mid, u)
                nclk[uid] = clk[uid] if persistent else 0
            succ.append((new, nclk))
            n_fire += 1
        if clk and all(t_lft is None or c < t_lft for t_lft, c in ((trans[u].lft, c) for u, c in clk.items())):
            nclk = {}
            for u, c in clk.items():
                t = trans[u]
                nclk[u] = min(c + 1, t.eft) if t.lft is None else c + 1
            succ.append((dict(m), nclk))
            n_tick += 1
        if not succ:
            deadlocks.append(m)
        for m2, c2 in succ:
            k2 = key(m2, c2)
            if k2 not in seen:
                if len(seen) >= max_states:
                    raise RuntimeError("oracle overflow")
                seen[k2] = (m2, c2)
                queue.append(k2)
    return set(seen), n_fire, n_tick, deadlocks


def graph_state_key(graph, i):
    s = graph.state(i)
    m = {p: s.marking.get(p, 0) for p in graph.net.places}
    return (tuple(sorted(m.items())), tuple(sorted(s.clocks.items())))


# ---------------------------------------------------------------- traces

def simple_path_trace(n, edges, v):
    """States on some simple path 0 -> v (v excluded), then the multiset of
    their outgoing firing labels. Exponential; small DAGs only."""
    out = [[] for _ in range(n)]
    for s, l, d in edges:
        out[s].append((l, d))
    on_path = set()

    def dfs(u, visited):
        if u == v:
            on_path.update(visited - {v})
            return
        for _, d in out[u]:
            if d not in visited:
                dfs(d, visited | {d})

    dfs(0, frozenset([0]))
    return Counter(l for u in on_path for l, _ in out[u] if l != "τ")


def closure_trace(n, edges, v):
    """Ancestor-and-descendant set from a boolean transitive closure."""
    reach = np.eye(n, dtype=bool)
    for s, _, d in edges:
        reach[s, d] = True
    for k in range(n):
        reach |= reach[:, k:k + 1] & reach[k:k + 1, :]
    if not reach[0, v]:
        return Counter()
    members = [u for u in range(n) if u != v and reach[0, u] and reach[u, v]]
    ms = Counter()
    for s, l, d in edges:
        if s in members and l != "τ":
            ms[l] += 1
    return ms


# ---------------------------------------------------------------- HMM

def brute_force_probability(mi, mt, me, obs):
    n = len(mi)
    total = 0.0
    for path in itertools.product(range(n), repeat=len(obs)):
        total += path_prob(mi, mt, me, path, obs)
    return total


def path_prob(mi, mt, me, path, obs):
    p = mi[path[0]] * me[path[0]][obs[0]]
    for a, b, o in zip(path, path[1:], obs[1:]):
        p *= mt[a][b] * me[b][o]
    return p


def brute_force_argmax(mi, mt, me, obs):
    """All maximizing paths (exact ties) and the maximum probability."""
    n = len(mi)
    best, arg = -1.0, []
    for path in itertools.product(range(n), repeat=len(obs)):
        p = path_prob(mi, mt, me, path, obs)
        if p > best * (1 + 1e-12) or best < 0:
            best, arg = p, [path]
        elif math.isclose(p, best, rel_tol=1e-12):
            arg.append(path)
    return best, arg


def enumerate_paths(mi, mt, me, obs):
    """Every state path of length len(obs) with its joint probability,
    as (paths array, probabilities). Vectorized enumeration, still N^T rows."""
    mi, mt, me = (np.asarray(a, dtype=float) for a in (mi, mt, me))
    n, t = len(mi), len(obs)
    paths = np.array(list(itertools.product(range(n), repeat=t)), dtype=np.int64).reshape(-1, t)
    obs = np.asarray(obs)
    p = mi[paths[:, 0]] * me[paths[:, 0], obs[0]]
    for k in range(1, t):
        p = p * mt[paths[:, k - 1], paths[:, k]] * me[paths[:, k], obs[k]]
    return paths, p
