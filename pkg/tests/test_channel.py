import math
import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from prehoc.infobounds import (BoundError, ChannelModel, MAX_CONTEXTS, exact_mi_channel, mi_loss_bound,
                               mutual_information, oracle_sets, random_channel)


def two_context_channel():
    return ChannelModel(prior=[0.5, 0.5], keys=[[[2.0], [0.0], [-1.0]], [[-1.0], [0.0], [2.0]]],
                        symbols=[[0, 1, 2], [0, 1, 2]], alphabet=3, query=[1.0])


def test_mutual_information_tables():
    assert mutual_information(np.full((2, 2), 0.25)) == pytest.approx(0.0, abs=1e-15)
    assert mutual_information(np.diag([0.5, 0.5])) == pytest.approx(math.log(2))


def test_constant_symbols_carry_no_information():
    ch = ChannelModel(prior=[0.3, 0.7], keys=np.random.default_rng(0).standard_normal((2, 4, 2)),
                      symbols=np.ones((2, 4), dtype=int), alphabet=2, query=[1.0, 0.5])
    assert exact_mi_channel(ch).mutual_info == pytest.approx(0.0, abs=1e-15)
    assert exact_mi_channel(ch, [0, 1]).mutual_info == pytest.approx(0.0, abs=1e-15)


def test_full_set_changes_nothing():
    ch = two_context_channel()
    full = exact_mi_channel(ch)
    same = exact_mi_channel(ch, np.arange(3))
    assert same.mutual_info == pytest.approx(full.mutual_info)
    assert same.delta_sup == pytest.approx(0.0, abs=1e-15)


def test_two_context_gap_is_bounded():
    ch = two_context_channel()
    full = exact_mi_channel(ch)
    part = exact_mi_channel(ch, [0, 1])
    assert part.delta_sup == pytest.approx(max(part.deltas))
    assert part.deltas[1] > part.deltas[0]
    assert abs(full.mutual_info - part.mutual_info) <= mi_loss_bound(part.delta_sup, 3) + 1e-9


def test_per_context_sets():
    ch = two_context_channel()
    sets = oracle_sets(ch, 1)
    assert [list(s) for s in sets] == [[0], [2]]
    result = exact_mi_channel(ch, sets)
    # each context keeps its own argmax, so the two outputs are told apart exactly
    assert result.mutual_info == pytest.approx(math.log(2))


def test_guard_rejects_large_channels():
    with pytest.raises(BoundError) as info:
        ChannelModel(prior=np.full(MAX_CONTEXTS + 1, 1 / (MAX_CONTEXTS + 1)), keys=np.zeros((MAX_CONTEXTS + 1, 2, 1)),
                     symbols=np.zeros((MAX_CONTEXTS + 1, 2), dtype=int), alphabet=2, query=[1.0])
    assert info.value.quantity == "ChannelModel"


def test_symbols_outside_alphabet():
    with pytest.raises(BoundError):
        ChannelModel(prior=[1.0], keys=np.zeros((1, 2, 1)), symbols=[[0, 3]], alphabet=2, query=[1.0])


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 8), st.integers(2, 8), st.integers(2, 4), st.data())
@settings(max_examples=100, deadline=None)
def test_truncation_gap_within_continuity_bound(seed, contexts, length, alphabet, data):
    ch = random_channel(np.random.default_rng(seed), contexts, length, alphabet)
    n = data.draw(st.integers(1, length))
    part = exact_mi_channel(ch, oracle_sets(ch, n))
    gap = exact_mi_channel(ch).mutual_info - part.mutual_info
    assert abs(gap) <= mi_loss_bound(part.delta_sup, length) + 1e-9


def test_kl_form_can_fail_where_continuity_holds():
    # every context attends (0.9, 0.05, 0.05); position 0 holds a shared symbol, the rest one symbol per context
    keys = [[[math.log(0.9)], [math.log(0.05)], [math.log(0.05)]]] * 3
    ch = ChannelModel(prior=[1 / 3] * 3, keys=keys, symbols=[[0, 1, 1], [0, 2, 2], [0, 3, 3]], alphabet=4, query=[1.0])
    sets = oracle_sets(ch, 1)
    assert [list(s) for s in sets] == [[0], [0], [0]]
    full = exact_mi_channel(ch)
    part = exact_mi_channel(ch, sets)
    assert full.mutual_info == pytest.approx(0.1 * math.log(3))
    assert part.mutual_info == pytest.approx(0.0, abs=1e-15)
    assert part.delta_sup == pytest.approx(0.1)
    gap = full.mutual_info - part.mutual_info
    assert gap > -math.log(0.9)
    assert gap <= mi_loss_bound(part.delta_sup, ch.length)
