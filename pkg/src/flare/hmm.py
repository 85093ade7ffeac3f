"""Discrete hidden Markov models: forward probability and Viterbi decoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from flare.errors import BadObservationIndex, InvalidHmm, ZeroProbabilitySequence

TOL = 1e-9
# sequences longer than this are evaluated in log space
LOG_SPACE_THRESHOLD = 64


def _check_stochastic(name, a, ndim):
    if a.ndim != ndim:
        raise InvalidHmm(f"{name} must have {ndim} dimension(s)")
    if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
        raise InvalidHmm(f"{name} entries must lie in [0, 1]")
    sums = a.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > TOL):
        raise InvalidHmm(f"{name} rows must sum to 1")


@dataclass(frozen=True, eq=False)
class Hmm:
    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        mi = np.array(self.initial, dtype=float)
        mt = np.array(self.transition, dtype=float)
        me = np.array(self.emission, dtype=float)
        _check_stochastic("M_I", mi, 1)
        _check_stochastic("M_T", mt, 2)
        _check_stochastic("M_E", me, 2)
        n = mi.shape[0]
        if mt.shape != (n, n) or me.shape[0] != n or me.shape[1] < 1:
            raise InvalidHmm(f"inconsistent shapes {mi.shape}, {mt.shape}, {me.shape}")
        for a in (mi, mt, me):
            a.setflags(write=False)
        object.__setattr__(self, "initial", mi)
        object.__setattr__(self, "transition", mt)
        object.__setattr__(self, "emission", me)

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    @property
    def n_obs(self) -> int:
        return self.emission.shape[1]

    def to_dict(self) -> dict:
        return {
            "M_I": self.initial.tolist(),
            "M_T": self.transition.tolist(),
            "M_E": self.emission.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps({"schema": 1, **self.to_dict()}, indent=2) + "\n"


def _obs_array(h: Hmm, obs) -> np.ndarray:
    o = np.asarray(obs)
    if o.ndim != 1 or len(o) == 0:
        raise BadObservationIndex("observation sequence must be non-empty")
    if not np.issubdtype(o.dtype, np.integer):
        if not np.all(np.equal(np.mod(o, 1), 0)):
            raise BadObservationIndex("observation indices must be integers")
        o = o.astype(np.int64)
    if np.any(o < 0) or np.any(o >= h.n_obs):
        raise BadObservationIndex(f"observation index outside [0, {h.n_obs})")
    return o


def _forward_linear(h: Hmm, o: np.ndarray) -> float:
    alpha = h.initial * h.emission[:, o[0]]
    for x in o[1:]:
        alpha = (alpha @ h.transition) * h.emission[:, x]
    return float(alpha.sum())


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def log_sequence_probability(h: Hmm, obs: Sequence[int]) -> float:
    """Natural log of P(obs | h); ``-inf`` when the sequence is impossible."""
    o = _obs_array(h, obs)
    lt, le = _log(h.transition), _log(h.emission)
    la = _log(h.initial) + le[:, o[0]]
    for x in o[1:]:
        la = logsumexp(la[:, None] + lt, axis=0) + le[:, x]
    return float(logsumexp(la))


def sequence_probability(h: Hmm, obs: Sequence[int]) -> float:
    """Marginal probability of ``obs`` (forward recursion)."""
    o = _obs_array(h, obs)
    if len(o) <= LOG_SPACE_THRESHOLD:
        p = _forward_linear(h, o)
    else:
        p = math.exp(log_sequence_probability(h, o))
    return min(max(p, 0.0), 1.0)


def most_likely_states(h: Hmm, obs: Sequence[int]) -> list[int]:
    """Viterbi path. Among equally likely predecessors (and final states) the
    lowest state index wins."""
    o = _obs_array(h, obs)
    lt, le = _log(h.transition), _log(h.emission)
    delta = _log(h.initial) + le[:, o[0]]
    back = []
    for x in o[1:]:
        scores = delta[:, None] + lt  # [from, to]
        arg = np.argmax(scores, axis=0)  # first max = lowest index
        back.append(arg)
        delta = scores[arg, np.arange(h.n_states)] + le[:, x]
    if not np.isfinite(delta.max()):
        raise ZeroProbabilitySequence("no state path has positive probability")
    state = int(np.argmax(delta))
    path = [state]
    for arg in reversed(back):
        state = int(arg[state])
        path.append(state)
    return path[::-1]


def path_probability(h: Hmm, states: Sequence[int], obs: Sequence[int]) -> float:
    """Joint probability of a state path and an observation sequence."""
    o = _obs_array(h, obs)
    if len(states) != len(o):
        raise ValueError("path and observations differ in length")
    p = h.initial[states[0]] * h.emission[states[0], o[0]]
    for a, b, x in zip(states, states[1:], o[1:]):
        p *= h.transition[a, b] * h.emission[b, x]
    return float(p)


def random_row_stochastic(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Rows drawn uniformly from the probability simplex (normalized
    exponentials)."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if cols == 1:
        return np.ones((rows, 1))
    e = rng.standard_exponential((rows, cols))
    return e / e.sum(axis=1, keepdims=True)
