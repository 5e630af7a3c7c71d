import itertools
import math
import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from numpy.testing import assert_array_equal

from prehoc.attncore import AttentionDist
from prehoc.selection import (BudgetSpec, EtfConfig, PsawConfig, SelectionError, SelectionResult, compose_cpe,
                              cosine_similarity, default_start_layer, etf_boundary, etf_frozen_set, psaw_boundary,
                              psaw_masked_set, psaw_visible_set, topk_oracle)


def dist_of(probs):
    probs = np.asarray(probs, dtype=np.float64)
    return AttentionDist(probs=probs, logits=probs.copy())


def test_oracle_by_hand():
    result = topk_oracle(dist_of([0.1, 0.4, 0.2, 0.3]), BudgetSpec(k_mid=2), 4)
    assert_array_equal(result.selected, [1, 3])
    assert result.retrievals_performed == 1


def test_oracle_full_budget_keeps_everything():
    result = topk_oracle(dist_of([0.25] * 4), BudgetSpec(k_mid=4), 4)
    assert_array_equal(result.selected, np.arange(4))


def test_oracle_ties_prefer_lower_index():
    assert_array_equal(topk_oracle(dist_of([0.2, 0.4, 0.4]), BudgetSpec(k_mid=1), 3).selected, [1])


def test_oracle_keeps_sinks_and_local_window():
    probs = np.full(20, 0.05)
    probs[10] = 0.5
    probs /= probs.sum()
    result = topk_oracle(dist_of(probs), BudgetSpec(c_sink=2, c_local=3, k_mid=1), 20)
    assert_array_equal(result.selected, [0, 1, 10, 17, 18, 19])


def test_oracle_budget_exceeds_length():
    with pytest.raises(SelectionError) as info:
        topk_oracle(dist_of([0.5, 0.5]), BudgetSpec(k_mid=3), 2)
    assert info.value.selector == "oracle"


@given(st.integers(1, 9), st.data())
@settings(max_examples=100)
def test_oracle_beats_every_subset(length, data):
    weights = data.draw(st.lists(st.floats(0.01, 1.0), min_size=length, max_size=length))
    probs = np.asarray(weights) / sum(weights)
    n = data.draw(st.integers(1, length))
    chosen = topk_oracle(dist_of(probs), BudgetSpec(k_mid=n), length).selected
    best = max(math.fsum(probs[list(c)]) for c in itertools.combinations(range(length), n))
    assert math.fsum(probs[chosen]) == best


@pytest.mark.parametrize("a, b, expected", [
    ([1.0, 2.0], [1.0, 2.0], 1.0),
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([1.0, 0.0], [1 / math.sqrt(2), 1 / math.sqrt(2)], 1 / math.sqrt(2)),
    ([0.0, 0.0], [1.0, 0.0], 0.0),
])
def test_cosine_similarity(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected)


def test_psaw_boundary():
    cfg = PsawConfig(start_layer=24)
    assert psaw_boundary(32, 1000, 32, cfg) == 300
    assert psaw_boundary(23, 1000, 32, cfg) == 0
    assert all(psaw_boundary(layer, 1000, 32, PsawConfig(alpha=0.0)) == 0 for layer in range(33))


def test_psaw_boundary_start_at_top_layer():
    assert psaw_boundary(8, 100, 8, PsawConfig(start_layer=8)) == 30


def test_psaw_boundary_rejects_depth():
    with pytest.raises(SelectionError):
        psaw_boundary(33, 1000, 32, PsawConfig())


def test_psaw_sets():
    assert psaw_visible_set(300, 1000, 4).size == 704
    assert_array_equal(psaw_visible_set(0, 10, 2), np.arange(10))
    assert_array_equal(psaw_visible_set(2, 10, 4), np.arange(10))
    assert_array_equal(psaw_masked_set(6, 10, 2), [2, 3, 4, 5])


def test_etf_boundary():
    assert etf_boundary(32, 1000, 32, EtfConfig(start_layer=24)) == 500
    assert etf_boundary(10, 1000, 32, EtfConfig()) == 0
    assert etf_boundary(32, 1000, 32, EtfConfig(psi=0.999999)) == 0
    assert_array_equal(etf_frozen_set(6, 10, 4), [4, 5])


def test_default_start_layer():
    assert default_start_layer(32) == 24
    assert PsawConfig().start(32) == 24
    assert PsawConfig().top_fraction == pytest.approx(0.7)


def test_compose_cpe_by_hand():
    seed = SelectionResult(selected=[0, 1, 2, 3, 300, 500, 996, 997, 998, 999])
    budget = BudgetSpec(c_sink=4, c_local=4, k_mid=2)
    result = compose_cpe(seed, psaw_visible_set(400, 1000, 4), None, budget, 1000)
    assert_array_equal(result.selected, [0, 1, 2, 3, 500, 996, 997, 998, 999])
    assert not result.fallback


def test_compose_cpe_boundary_zero_keeps_cis_set():
    seed = SelectionResult(selected=[0, 5, 7, 9])
    result = compose_cpe(seed, psaw_visible_set(0, 10, 1), None, BudgetSpec(c_sink=1, c_local=1, k_mid=2), 10)
    assert_array_equal(result.selected, seed.selected)


def test_compose_cpe_falls_back_to_local_window():
    seed = SelectionResult(selected=[0, 1, 2, 3])
    budget = BudgetSpec(c_sink=1, c_local=2, k_mid=1)
    result = compose_cpe(seed, psaw_visible_set(8, 10, 1), None, budget, 10)
    assert result.fallback
    assert_array_equal(result.selected, [0, 8, 9])


def test_shared_selection_cannot_count_retrievals():
    with pytest.raises(SelectionError):
        SelectionResult(selected=[0], was_shared=True, retrievals_performed=1)


@pytest.mark.parametrize("kwargs", [{"phi": 1.0}, {"phi": 0.0}, {"alpha": -1.0}])
def test_invalid_psaw_config(kwargs):
    with pytest.raises(SelectionError):
        PsawConfig(**kwargs)
