import json
import logging

import pytest

from prehoc.experiment import SUITES, SuiteContext, dumps, run_suite

SMALL_TRIALS = {
    "tv-identity": 200,
    "mi-channel": 40,
    "kl-identity": 200,
    "softmax-lipschitz": 500,
    "oracle-optimal": 24,
    "mass-loss": 200,
    "centroid-drift": 500,
    "cis-guarantee": 1,
    "psaw-bound": 1,
    "etf-bound": 1,
    "dominance-chain": 200,
    "oracle-continuity": 200,
    "reuse-bound": 200,
    "tuning": 50,
    "retrieval-ratio": 1,
}


def test_every_suite_has_a_small_run():
    assert set(SMALL_TRIALS) == set(SUITES)


def test_streams_are_distinct():
    streams = [s.stream for s in SUITES.values()]
    assert len(streams) == len(set(streams))


@pytest.mark.parametrize("name", sorted(SMALL_TRIALS))
def test_suite_passes(name):
    result = run_suite(name, seed=7, trials=SMALL_TRIALS[name])
    assert result.records
    assert result.passed, result.counterexample
    # records must serialize without numpy leftovers
    json.loads(dumps(result.summary()))
    json.loads(json.dumps(result.records))


def test_suites_are_reproducible():
    first = run_suite("reuse-bound", seed=3, trials=20).records
    second = run_suite("reuse-bound", seed=3, trials=20).records
    assert first == second
    assert run_suite("reuse-bound", seed=4, trials=20).records != first


def test_oracle_optimal_covers_small_lengths():
    result = run_suite("oracle-optimal", seed=1, trials=12, max_len=12, max_budget=6)
    assert result.passed
    # budgets 1..min(L, 6) for L = 1..12
    assert len(result.records) == 1 + 2 + 3 + 4 + 5 + 6 * 7


def test_mi_channel_records():
    result = run_suite("mi-channel", seed=0, channels=10)
    assert len(result.records) == 10
    for record in result.records:
        assert {"I_full", "I_S", "delta_sup", "g", "gap"} <= set(record)
        assert 0.0 <= record["delta_sup"] <= 1.0


def test_context_streams_differ_per_trial():
    ctx = SuiteContext(seed=5, trials=2, stream=1)
    assert ctx.rng(0).random() != ctx.rng(1).random()
    assert ctx.run_seed(0) == ctx.run_seed(0)


FAST_SUITES = ["tv-identity", "mi-channel", "kl-identity", "softmax-lipschitz", "oracle-optimal", "centroid-drift",
               "dominance-chain", "oracle-continuity", "reuse-bound", "tuning"]


@pytest.mark.parametrize("name", FAST_SUITES)
def test_suite_passes_at_default_trials(name):
    result = run_suite(name)
    assert result.seed == 0
    assert result.trials == SUITES[name].trials
    assert result.passed, result.counterexample


def test_tuning_keeps_infeasible_targets_out_of_warnings(caplog):
    with caplog.at_level(logging.DEBUG):
        result = run_suite("tuning")
    assert any(not (r["psaw_feasible"] and r["etf_feasible"]) for r in result.records[1:])
    assert "target" in caplog.text
    assert not [r for r in caplog.records if r.levelno >= logging.WARNING]
