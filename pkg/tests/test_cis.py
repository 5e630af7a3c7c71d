import numpy as np
import pytest
from numpy.testing import assert_array_equal

from prehoc.attncore import AttentionDist, softmax
from prehoc.selection import (BudgetSpec, CisConfig, CisState, SelectionError, cis_select, neighborhood,
                              retrieve_dilated, topk_oracle)


def dist_of(probs):
    probs = np.asarray(probs, dtype=np.float64)
    return AttentionDist(probs=probs, logits=probs.copy())


def peaked(t, peaks):
    weights = np.full(t, 1.0)
    for position, weight in peaks.items():
        weights[position] = weight
    return dist_of(weights / weights.sum())


def test_neighborhood_clips_to_range():
    assert_array_equal(neighborhood(np.array([0, 5, 9]), 1, 10), [0, 1, 4, 5, 6, 8, 9])
    assert neighborhood(np.array([], dtype=np.int64), 2, 10).size == 0


def test_dilation_by_hand():
    dist = peaked(100, {50: 9.0, 10: 5.0})
    stored = retrieve_dilated(dist, BudgetSpec(k_mid=2), m=1, r=1, t=100)
    assert_array_equal(stored, [10, 49, 50, 51])


@pytest.mark.parametrize("m, r", [(0, 3), (2, 0)])
def test_no_dilation_is_the_oracle(m, r):
    dist = peaked(100, {50: 9.0, 10: 5.0})
    budget = BudgetSpec(k_mid=2)
    assert_array_equal(retrieve_dilated(dist, budget, m=m, r=r, t=100), topk_oracle(dist, budget, 100).selected)


def test_config_defaults():
    cfg = CisConfig(budget=BudgetSpec(c_sink=4, c_local=8, k_mid=24), dilate_radius=2)
    assert cfg.m == 8
    assert cfg.workload == 36 + 2 * 8 * 2


@pytest.mark.parametrize("kwargs", [{"block_size": 0}, {"sim_threshold": -1.5}, {"dilate_radius": -1},
                                    {"dilate_count": 5, "budget": BudgetSpec(k_mid=2)}])
def test_invalid_config(kwargs):
    with pytest.raises(SelectionError):
        CisConfig(**kwargs)


def test_shares_within_a_block():
    budget = BudgetSpec(c_sink=1, c_local=2, k_mid=3)
    cfg = CisConfig(block_size=4, sim_threshold=0.8, budget=budget)
    state = CisState()
    probe = np.array([1.0, 0.0])
    first = cis_select(state, peaked(40, {20: 9.0}), probe, 40, cfg)
    assert first.retrievals_performed == 1 and not first.was_shared
    second = cis_select(state, peaked(41, {30: 9.0}), probe, 41, cfg)
    assert second.was_shared and second.retrievals_performed == 0
    assert second.anchor_step == 40
    # the anchor's stored set with its local window moved forward one step
    expected = np.union1d(np.setdiff1d(first.selected, [38, 39]), [39, 40])
    assert_array_equal(second.selected, expected)
    assert 20 in second.selected and 30 not in second.selected


def test_shared_sets_stay_within_workload():
    budget = BudgetSpec(c_sink=2, c_local=2, k_mid=3)
    cfg = CisConfig(block_size=8, sim_threshold=-1.0, dilate_count=3, dilate_radius=1, budget=budget)
    assert cfg.workload == 13
    state = CisState()
    query = np.ones(4)
    results = [cis_select(state, peaked(t, {20: 9.0, 40: 8.0, 60: 7.0}), query, t, cfg) for t in range(96, 108)]
    assert sum(r.was_shared for r in results) == 10
    for t, result in zip(range(96, 108), results):
        assert min(budget.total, t) <= result.selected.size <= cfg.workload
        assert_array_equal(result.selected[-2:], [t - 2, t - 1])
        assert {20, 40, 60} <= set(result.selected.tolist())


def test_new_block_retrieves():
    cfg = CisConfig(block_size=2, sim_threshold=-1.0, budget=BudgetSpec(k_mid=2))
    state = CisState()
    probe = np.ones(3)
    retrieved = [cis_select(state, peaked(t, {}), probe, t, cfg).retrievals_performed for t in range(10, 16)]
    assert retrieved == [1, 0, 1, 0, 1, 0]


def test_threshold_above_one_never_shares():
    cfg = CisConfig(block_size=8, sim_threshold=1.01, budget=BudgetSpec(k_mid=2))
    state = CisState()
    results = [cis_select(state, peaked(t, {}), np.ones(2), t, cfg) for t in range(10, 18)]
    assert all(r.retrievals_performed == 1 for r in results)


def test_zero_probe_never_shares():
    cfg = CisConfig(block_size=8, sim_threshold=-1.0, budget=BudgetSpec(k_mid=2))
    state = CisState()
    results = [cis_select(state, peaked(t, {}), np.zeros(2), t, cfg) for t in range(10, 14)]
    assert not any(r.was_shared for r in results)


def test_dissimilar_probe_retrieves():
    cfg = CisConfig(block_size=8, sim_threshold=0.8, budget=BudgetSpec(k_mid=2))
    state = CisState()
    cis_select(state, peaked(10, {}), np.array([1.0, 0.0]), 10, cfg)
    result = cis_select(state, peaked(11, {}), np.array([0.0, 1.0]), 11, cfg)
    assert result.retrievals_performed == 1
    assert len(state.sources) == 2


def test_stored_set_contains_the_oracle():
    rng = np.random.default_rng(0)
    budget = BudgetSpec(c_sink=2, c_local=4, k_mid=6)
    for _ in range(20):
        dist = dist_of(softmax(rng.standard_normal(64) * 2))
        stored = retrieve_dilated(dist, budget, m=2, r=2, t=64)
        assert np.isin(topk_oracle(dist, budget, 64).selected, stored).all()
