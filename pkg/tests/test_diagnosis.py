import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare.diagnosis import (
    BATCH, INPUT_PASSED, ComponentModel, DiagnosisVerdict, TestResults, aggregate,
    build_initial_matrix, build_transition_matrix, canonical_emission, confidence_level,
    diagnose_component, estimate_rates, fit_component, matching_level, rank_components,
    search_emission_matrix, status_from_states, to_observations, verdicts_csv,
)
from flare.errors import DegenerateRates, LengthMismatch, MissingDiagnosis, OutOfRange, TooShort
from flare.hmm import Hmm, most_likely_states, random_row_stochastic
from flare.simbed import run_one

P, F = True, False
PI_P, PI_F, FI_P, FI_F = range(4)


def test_initial_matrix():
    assert build_initial_matrix(0.5).tolist() == [0.25] * 4
    assert build_initial_matrix(0).tolist() == [0.5, 0.5, 0, 0]
    assert np.allclose(build_initial_matrix(0.4), [0.3, 0.3, 0.2, 0.2], atol=1e-15)
    with pytest.raises(OutOfRange):
        build_initial_matrix(1.5)


def test_transition_matrix():
    assert np.allclose(build_transition_matrix(0.25, 0.25, 0.25, 0.25, 0.5), 0.25, atol=1e-15)
    mt = build_transition_matrix(0.4, 0.1, 0.2, 0.3, 1.0)
    assert np.all(mt[:, :2] == 0)
    mt = build_transition_matrix(0.4, 0.1, 0.2, 0.3, 0.3)
    assert np.array_equal(mt[PI_P], mt[FI_P]) and np.array_equal(mt[PI_F], mt[FI_F])
    # PI_p row: (a(1-w), b(1-w), a w, b w) / (a + b)
    assert np.allclose(mt[PI_P], [0.4 * 0.7 / 0.5, 0.1 * 0.7 / 0.5, 0.4 * 0.3 / 0.5, 0.1 * 0.3 / 0.5])
    with pytest.raises(DegenerateRates):
        build_transition_matrix(0, 0, 0.5, 0.5)
    with pytest.raises(OutOfRange):
        build_transition_matrix(0.5, 0.5, 0.5, 0.5)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.001, 1), min_size=4, max_size=4), st.floats(0, 1))
def test_transition_rows_sum_to_one(raw, omega):
    rates = np.asarray(raw) / sum(raw)
    rates[3] = 1 - rates[:3].sum()
    mt = build_transition_matrix(*rates, omega)
    assert np.all(np.abs(mt.sum(axis=1) - 1) <= 1e-12)


def test_rates():
    # both pass and fail rows are populated, so no smoothing
    assert estimate_rates([[P, F, P, F, P]]) == (0, 0.5, 0.5, 0)
    assert estimate_rates([[P, F, P, F]]) == pytest.approx((0, 2 / 3, 1 / 3, 0))
    # all-pass: raw alpha = 1; the empty fail row triggers +1 on every cell
    a, b, g, d = estimate_rates([[P] * 5])
    assert (a, b, g, d) == pytest.approx((5 / 8, 1 / 8, 1 / 8, 1 / 8))
    with pytest.raises(TooShort):
        estimate_rates([[P]])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=2, max_size=30), min_size=1, max_size=4))
def test_rates_partition(seqs):
    assert sum(estimate_rates(seqs)) == pytest.approx(1, abs=1e-12)


def test_matching_level():
    assert matching_level([P, F, P], [P, F, P]) == 1
    assert matching_level([P, F, P], [F, P, F]) == 0
    assert matching_level([P, P, P, F], [P, P, P, P]) == 0.75
    with pytest.raises(LengthMismatch):
        matching_level([P], [P, P])


def test_confidence_level():
    det = Hmm([1, 0], [[1, 0], [0, 1]], [[1, 0], [0, 1]])
    assert confidence_level(det, [0, 0, 0]) == 1
    h = Hmm([0.6, 0.4], [[0.7, 0.3], [0.4, 0.6]], [[0.9, 0.1], [0.2, 0.8]])
    assert confidence_level(h, [0]) == pytest.approx(0.62, abs=1e-15)
    with pytest.raises(TooShort):
        confidence_level(h, [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=1, max_size=4))
def test_aggregation_is_and(streams):
    obs = TestResults(streams).observations()
    assert len(obs) == 3
    assert set(obs.tolist()) <= {0, 1}
    for k in range(3):
        assert (obs[k] == 0) == all(s[k] for s in streams)


def test_test_results_validation():
    with pytest.raises(TooShort):
        TestResults(([P],))
    with pytest.raises(LengthMismatch):
        TestResults(([P, P], [P]))
    assert aggregate([[P, P], [P, F]]).tolist() == [P, F]
    assert to_observations([P, F]).tolist() == [0, 1]


def test_status_examples():
    f, p = FI_P, PI_P
    assert status_from_states([f, f, p, f, f]) == "Faulty"
    assert status_from_states([PI_P, PI_F, PI_P]) == "Passed"
    assert status_from_states([PI_P, FI_F, PI_F, FI_P]) == "Faulty"


def test_canonical_emission():
    rng = np.random.default_rng(0)
    me = random_row_stochastic(400, 2, rng).reshape(100, 4, 2)
    c = canonical_emission(me)
    assert np.all(c[:, FI_P, 1] >= c[:, PI_P, 1])
    assert np.all(c[:, PI_F, 1] >= c[:, FI_F, 1])
    assert np.allclose(c.sum(axis=2), 1)
    # the multiset of rows is unchanged
    assert np.allclose(np.sort(c[:, :, 1], axis=1), np.sort(me[:, :, 1], axis=1))


def easy_tests(n=40):
    return TestResults(([P] * n,))


def test_easy_instance_reaches_full_matching():
    tests = easy_tests()
    cm = ComponentModel.from_inputs("c", [[P] * 40])
    me, mu, rho = search_emission_matrix(cm, tests, [[P] * 40], rng=1)
    assert mu == 1
    assert rho >= 0.5
    v = diagnose_component(cm.with_emission(me, mu, rho), tests)
    assert v.status == "Passed"


def test_search_budget_and_determinism():
    tests = TestResults(([P, F, P, P, F, F, P, P],))
    pred = [[P, F, P, P, P, F, P, P]]
    cm = ComponentModel.from_inputs("c", pred)
    me1, mu1, rho1 = search_emission_matrix(cm, tests, pred, 1.0, 1.0, max_iter=1, rng=5)
    me0 = canonical_emission(random_row_stochastic(4, 2, np.random.default_rng(5)).reshape(1, 4, 2))[0]
    assert np.array_equal(me1, me0)
    a = search_emission_matrix(cm, tests, pred, rng=9)
    b = search_emission_matrix(cm, tests, pred, rng=9)
    assert np.array_equal(a[0], b[0]) and a[1:] == b[1:]


def scalar_scores(cm, me, tests, actual):
    h = Hmm(cm.hmm.initial, cm.hmm.transition, me)
    obs = tests.observations()
    rho = confidence_level(h, obs)
    states = most_likely_states(h, obs)
    mu = matching_level(INPUT_PASSED[states], actual)
    return mu, rho


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_search_never_worse_than_sampled(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 20))
    pred = [rng.random(n) < 0.7]
    out = [pred[0] & (rng.random(n) < 0.8)]
    tests = TestResults(tuple(out))
    cm = ComponentModel.from_inputs("c", pred)
    budget = 100
    me, mu, rho = search_emission_matrix(cm, tests, pred, 1.0, 1.0, max_iter=budget, rng=seed)
    # returned scores agree with the scalar implementation
    mu_s, rho_s = scalar_scores(cm, me, tests, pred[0])
    assert mu == pytest.approx(mu_s) and rho == pytest.approx(rho_s, rel=1e-9)
    # replay every candidate with the same stream
    replay = np.random.default_rng(seed)
    done, k = 0, 32
    while done < budget:
        k = min(k, budget - done)
        cands = canonical_emission(random_row_stochastic(4 * k, 2, replay).reshape(k, 4, 2))
        for c in cands:
            m, r = scalar_scores(cm, c, tests, pred[0])
            assert (mu, rho + 1e-12) >= (m, r)
        done += k
        k = min(2 * k, BATCH)


def test_component_model_json():
    cm = fit_component("c7", [[P, F, P, P]], TestResults(([P, F, P, P],)), max_iter=50)
    doc = json.loads(cm.to_json())
    assert doc["component"] == "c7" and doc["omega"] == 0.5
    assert len(doc["M_E"]) == 4 and doc["states"] == ["PI_p", "PI_f", "FI_p", "FI_f"]
    assert doc["alpha"] + doc["beta"] + doc["gamma"] + doc["delta"] == pytest.approx(1)


def verdict(c, status, mu, rho):
    return DiagnosisVerdict(c, status, mu, rho)


def test_rank_components():
    r = rank_components(["a", "b"], {"a": verdict("a", "Faulty", 1, 0.6), "b": verdict("b", "Passed", 1, 0.9)})
    assert [(x.component, x.suspect) for x in r] == [("a", True), ("b", False)]
    vs = {"x": verdict("x", "Faulty", 0.9, 0.7), "y": verdict("y", "Faulty", 1.0, 0.8),
          "z": verdict("z", "Passed", 1.0, 0.9), "w": verdict("w", "Passed", 0.7, 0.5)}
    r = rank_components(list(vs), vs)
    assert [x.component for x in r] == ["y", "x", "w", "z"]
    assert [x.rank for x in r] == [0, 1, 2, 3]
    with pytest.raises(MissingDiagnosis):
        rank_components(["a", "q"], {"a": vs["x"]})
    text = verdicts_csv(r, ["seed=3"])
    assert text.splitlines()[:2] == ["# seed=3", "component,status,matching,confidence,rank"]


def test_injected_faults_ranked_near_top():
    hits = 0
    for seed in range(200):
        res = run_one(10, 2, 2, 100, seed)
        hits += set(res["faulty"]) <= set(res["ranked"][:3])
    assert hits >= 180
