"""Per-component HMM diagnosis from pass/fail test results.

Hidden states are ordered (PI_p, PI_f, FI_p, FI_f): the first letter is the
component's own health (P healthy, F faulty), the suffix the status of its
inputs. Observations are ordered (O_p, O_f).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from flare.errors import DegenerateRates, LengthMismatch, MissingDiagnosis, OutOfRange, TooShort
from flare.hmm import Hmm, log_sequence_probability, most_likely_states, random_row_stochastic

STATES = ("PI_p", "PI_f", "FI_p", "FI_f")
OBSERVATIONS = ("O_p", "O_f")
PI_P, PI_F, FI_P, FI_F = range(4)
O_P, O_F = 0, 1
INPUT_PASSED = np.array([True, False, True, False])
FAULTY = np.array([False, False, True, True])

DEFAULT_OMEGA = 0.5
MU_MIN = 0.9
RHO_MIN = 0.5
MAX_ITER = 2000
BATCH = 512


def _check_prob(name, x):
    if not (0.0 <= x <= 1.0) or math.isnan(x):
        raise OutOfRange(f"{name}={x} outside [0, 1]")


def build_initial_matrix(omega: float = DEFAULT_OMEGA) -> np.ndarray:
    _check_prob("omega", omega)
    return np.array([(1 - omega) / 2, (1 - omega) / 2, omega / 2, omega / 2])


def build_transition_matrix(alpha, beta, gamma, delta, omega: float = DEFAULT_OMEGA) -> np.ndarray:
    """4x4 M_T. Rows from input-passed states share the alpha/beta pattern,
    rows from input-failed states the gamma/delta pattern."""
    for name, x in (("alpha", alpha), ("beta", beta), ("gamma", gamma), ("delta", delta)):
        _check_prob(name, x)
    _check_prob("omega", omega)
    if abs(alpha + beta + gamma + delta - 1.0) > 1e-9:
        raise OutOfRange("rates must sum to 1")
    if alpha + beta <= 0 or gamma + delta <= 0:
        raise DegenerateRates("alpha + beta and gamma + delta must both be positive")
    ab, gd = alpha + beta, gamma + delta
    from_pass = [alpha * (1 - omega) / ab, beta * (1 - omega) / ab, alpha * omega / ab, beta * omega / ab]
    from_fail = [gamma * (1 - omega) / gd, delta * (1 - omega) / gd, gamma * omega / gd, delta * omega / gd]
    return np.array([from_pass, from_fail, from_pass, from_fail])


def estimate_rates(inputs: Sequence[Sequence[bool]]) -> tuple[float, float, float, float]:
    """(alpha, beta, gamma, delta) = frequencies of pass->pass, pass->fail,
    fail->pass, fail->fail over adjacent pairs of every sequence. All four
    counts get +1 when either the pass row or the fail row is empty."""
    counts = np.zeros((2, 2), dtype=np.int64)
    for seq in inputs:
        s = np.asarray(seq, dtype=bool)
        if len(s) < 2:
            continue
        a, b = ~s[:-1], ~s[1:]  # 0 = pass, 1 = fail
        np.add.at(counts, (a.astype(int), b.astype(int)), 1)
    total = counts.sum()
    if total == 0:
        raise TooShort("need at least one sequence of length >= 2")
    if counts[0].sum() == 0 or counts[1].sum() == 0:
        counts = counts + 1
        total = counts.sum()
    a, b, g, d = (counts.ravel() / total).tolist()
    return a, b, g, d


def aggregate(streams: Sequence[Sequence[bool]]) -> np.ndarray:
    """Per step: passed iff every stream passed."""
    arr = np.asarray(streams, dtype=bool)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr.all(axis=0)


def to_observations(passed: Sequence[bool]) -> np.ndarray:
    return np.where(np.asarray(passed, dtype=bool), O_P, O_F)


@dataclass(frozen=True)
class TestResults:
    """m output streams of n pass/fail results (True = passed)."""

    streams: tuple[tuple[bool, ...], ...]

    __test__ = False  # not a pytest class

    def __post_init__(self):
        streams = tuple(tuple(bool(x) for x in s) for s in self.streams)
        if not streams:
            raise TooShort("no output streams")
        n = len(streams[0])
        if any(len(s) != n for s in streams):
            raise LengthMismatch("all streams must have the same length")
        if n < 2:
            raise TooShort("need at least 2 test cases")
        object.__setattr__(self, "streams", streams)

    @property
    def n(self) -> int:
        return len(self.streams[0])

    def observations(self) -> np.ndarray:
        return to_observations(aggregate(self.streams))


@dataclass(frozen=True)
class ComponentModel:
    component: str
    omega: float
    rates: tuple[float, float, float, float]
    hmm: Hmm
    matching: float | None = None
    confidence: float | None = None

    @classmethod
    def from_inputs(cls, component, inputs, omega=DEFAULT_OMEGA, omega_t=None, emission=None):
        """Model with M_I and M_T fixed from ``omega`` and the input rates.
        ``omega_t`` overrides the omega used in M_T. Until an emission matrix
        is searched, M_E is uninformative (all 1/2)."""
        rates = estimate_rates(inputs)
        mi = build_initial_matrix(omega)
        mt = build_transition_matrix(*rates, omega if omega_t is None else omega_t)
        me = np.full((4, 2), 0.5) if emission is None else emission
        return cls(component, omega, rates, Hmm(mi, mt, me))

    def with_emission(self, emission, matching=None, confidence=None) -> "ComponentModel":
        h = Hmm(self.hmm.initial, self.hmm.transition, emission)
        return replace(self, hmm=h, matching=matching, confidence=confidence)

    def to_dict(self) -> dict:
        a, b, g, d = self.rates
        return {
            "schema": 1,
            "component": self.component,
            "omega": self.omega,
            "alpha": a, "beta": b, "gamma": g, "delta": d,
            "states": list(STATES),
            "observations": list(OBSERVATIONS),
            **self.hmm.to_dict(),
            "mu": self.matching,
            "rho": self.confidence,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def matching_level(derived: Sequence[bool], actual: Sequence[bool]) -> float:
    d = np.asarray(derived, dtype=bool)
    a = np.asarray(actual, dtype=bool)
    if d.shape != a.shape or d.ndim != 1:
        raise LengthMismatch(f"lengths differ: {d.shape} vs {a.shape}")
    if len(d) == 0:
        raise LengthMismatch("empty sequences")
    return float(np.mean(d == a))


def confidence_level(cm: ComponentModel | Hmm, obs: Sequence[int]) -> float:
    """Per-step geometric mean of the sequence likelihood."""
    h = cm.hmm if isinstance(cm, ComponentModel) else cm
    o = np.asarray(obs)
    if len(o) == 0:
        raise TooShort("empty observation sequence")
    # log space: the raw product underflows for long sequences
    return math.exp(log_sequence_probability(h, o) / len(o))


def canonical_emission(me: np.ndarray) -> np.ndarray:
    """Fix which half of the model means "faulty". With omega = 1/2 the model
    is symmetric under swapping health labels, so emission candidates are
    ordered: with passed inputs the faulty state fails at least as often as
    the healthy one; with failed inputs the failure is already explained by
    propagation and the healthy state fails at least as often."""
    me = np.array(me, dtype=float, copy=True)
    shape = me.shape
    me = me.reshape(-1, 4, 2)
    for hi, lo in ((FI_P, PI_P), (PI_F, FI_F)):
        swap = me[:, lo, O_F] > me[:, hi, O_F]
        me[swap, lo], me[swap, hi] = me[swap, hi].copy(), me[swap, lo].copy()
    return me.reshape(shape)


# ---------------------------------------------------------------- batched HMM

def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _batch_log_likelihood(mi, mt, me, obs):
    """log P(obs) for K emission candidates (me has shape (K, N, M)), by the
    forward recursion with per-step normalization."""
    alpha = mi[None, :] * me[:, :, obs[0]]
    logp = np.zeros(me.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        for t in range(len(obs)):
            if t:
                alpha = (alpha @ mt) * me[:, :, obs[t]]
            c = alpha.sum(axis=1)
            logp += np.log(c)
            alpha = alpha / np.where(c > 0, c, 1.0)[:, None]
    return logp


def _batch_viterbi(mi, mt, me, obs):
    """Viterbi paths for K emission candidates, lowest-index tie-break."""
    k, n = me.shape[0], mt.shape[0]
    le = _log(me)
    lt = _log(mt)
    delta = _log(mi)[None, :] + le[:, :, obs[0]]
    back = np.empty((len(obs) - 1, k, n), dtype=np.int64)
    for t, x in enumerate(obs[1:]):
        s = delta[:, :, None] + lt[None, :, :]
        back[t] = s.argmax(axis=1)
        delta = s.max(axis=1) + le[:, :, x]
    ok = np.isfinite(delta.max(axis=1))
    paths = np.empty((k, len(obs)), dtype=np.int64)
    paths[:, -1] = delta.argmax(axis=1)
    rows = np.arange(k)
    for t in range(len(obs) - 2, -1, -1):
        paths[:, t] = back[t][rows, paths[:, t + 1]]
    return paths, ok


def search_emission_matrix(
    cm: ComponentModel,
    tests: TestResults,
    pred_outputs: Sequence[Sequence[bool]] | None,
    mu_min: float = MU_MIN,
    rho_min: float = RHO_MIN,
    max_iter: int = MAX_ITER,
    rng: np.random.Generator | int | None = 0,
    canonical: bool = True,
) -> tuple[np.ndarray, float, float]:
    """Monte-Carlo search over emission matrices.

    Candidates are drawn one at a time from ``rng``. For each: rho is the
    confidence of the output observations, the decoded states give the input
    pass/fail sequence the model believes in, and mu compares it with what the
    predecessors actually produced (``None`` means boundary inputs, which
    always pass). The first candidate reaching both thresholds is returned;
    otherwise the best by (mu, rho), earliest on ties.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    _check_prob("mu_min", mu_min)
    _check_prob("rho_min", rho_min)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    obs = tests.observations()
    T = len(obs)
    if pred_outputs is None or len(pred_outputs) == 0:
        actual = np.ones(T, dtype=bool)
    else:
        actual = aggregate(pred_outputs)
        if len(actual) != T:
            raise LengthMismatch("predecessor outputs and test results differ in length")
    mi, mt = cm.hmm.initial, cm.hmm.transition

    def mu_of(sel):
        paths, ok = _batch_viterbi(mi, mt, me[sel], obs)
        m = (INPUT_PASSED[paths] == actual[None, :]).mean(axis=1)
        return np.where(ok, m, 0.0)

    best = None  # (mu, rho, me)
    done = 0
    k = 32
    while done < max_iter:
        k = min(k, max_iter - done)
        me = random_row_stochastic(k * 4, 2, rng).reshape(k, 4, 2)
        if canonical:
            me = canonical_emission(me)
        rho = np.exp(_batch_log_likelihood(mi, mt, me, obs) / T)
        mu = np.zeros(k)
        # decode the rho-feasible candidates first; they alone can stop the search
        good = rho >= rho_min
        mu[good] = mu_of(good)
        hit = np.flatnonzero(good & (mu >= mu_min))
        if len(hit):
            i = int(hit[0])
            return me[i], float(mu[i]), float(rho[i])
        mu[~good] = mu_of(~good)
        order = np.lexsort((np.arange(k), -rho, -mu))
        i = int(order[0])
        if best is None or (mu[i], rho[i]) > (best[0], best[1]):
            best = (float(mu[i]), float(rho[i]), me[i])
        done += k
        k = min(2 * k, BATCH)
    return best[2], best[0], best[1]


# ---------------------------------------------------------------- verdicts

@dataclass(frozen=True)
class DiagnosisVerdict:
    component: str
    status: str  # "Passed" | "Faulty"
    matching: float
    confidence: float
    states: tuple[int, ...] = field(default=())

    @property
    def faulty(self) -> bool:
        return self.status == "Faulty"


def status_from_states(states: Sequence[int]) -> str:
    """Majority of the health projection; a tie counts as Faulty."""
    f = int(FAULTY[np.asarray(states, dtype=int)].sum())
    return "Faulty" if 2 * f >= len(states) else "Passed"


def diagnose_component(cm: ComponentModel, tests: TestResults) -> DiagnosisVerdict:
    obs = tests.observations()
    states = most_likely_states(cm.hmm, obs)
    mu = cm.matching if cm.matching is not None else float("nan")
    rho = cm.confidence if cm.confidence is not None else confidence_level(cm, obs)
    return DiagnosisVerdict(cm.component, status_from_states(states), mu, rho, tuple(states))


def fit_component(
    component: str,
    inputs: Sequence[Sequence[bool]] | None,
    tests: TestResults,
    omega: float = DEFAULT_OMEGA,
    omega_t: float | None = None,
    mu_min: float = MU_MIN,
    rho_min: float = RHO_MIN,
    max_iter: int = MAX_ITER,
    rng=0,
) -> ComponentModel:
    """Rates from the input streams, then emission search. ``inputs=None``
    means the component only reads boundary inputs, taken as always passing."""
    streams = inputs if inputs else [[True] * tests.n]
    cm = ComponentModel.from_inputs(component, streams, omega, omega_t)
    me, mu, rho = search_emission_matrix(cm, tests, inputs or None, mu_min, rho_min, max_iter, rng)
    return cm.with_emission(me, mu, rho)


@dataclass(frozen=True)
class RankedComponent:
    component: str
    status: str
    matching: float
    confidence: float
    rank: int
    suspect: bool


def rank_components(components: Sequence[str], verdicts: Mapping[str, DiagnosisVerdict]) -> list[RankedComponent]:
    """Faulty components by (rho desc, mu desc, id asc), then the passed ones
    flagged ``suspect=False``. The passed tail is ordered by mu ascending:
    a healthy model that cannot reproduce the component's input/output
    relation is the next thing to look at."""
    missing = [c for c in components if c not in verdicts]
    if missing:
        raise MissingDiagnosis(f"no verdict for {missing}")

    def key(c):
        v = verdicts[c]
        return (-v.confidence, -v.matching, c)

    def tail_key(c):
        v = verdicts[c]
        mu = 1.0 if math.isnan(v.matching) else v.matching  # never searched
        return (mu, -v.confidence, c)

    faulty = sorted((c for c in components if verdicts[c].faulty), key=key)
    passed = sorted((c for c in components if not verdicts[c].faulty), key=tail_key)
    out = []
    for i, c in enumerate(faulty + passed):
        v = verdicts[c]
        out.append(RankedComponent(c, v.status, v.matching, v.confidence, i, v.faulty))
    return out


def verdicts_csv(ranked: Sequence[RankedComponent], header: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["component", "status", "matching", "confidence", "rank"])
    for r in ranked:
        w.writerow([r.component, r.status, repr(r.matching), repr(r.confidence), r.rank])
    return buf.getvalue()
