import math
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from prehoc.attncore import (AttentionError, DecodeStream, GeneratorKind, HeadConfig, SynthGenConfig, attention_weights,
                             counter_rng, exp_decay_log_weights, gen_decode_stream, softmax)
from prehoc.selection import cosine_similarity


def test_counter_rng_is_order_independent():
    first = counter_rng(7, 0, 3).standard_normal(4)
    counter_rng(7, 0, 4).standard_normal(4)
    assert_array_equal(counter_rng(7, 0, 3).standard_normal(4), first)
    assert not np.array_equal(counter_rng(7, 0, 4).standard_normal(4), first)


def test_same_seed_gives_identical_streams():
    cfg = SynthGenConfig(seed=11)
    a = list(gen_decode_stream(cfg, layers=2, heads=2, steps=5, d=8))
    b = list(gen_decode_stream(cfg, layers=2, heads=2, steps=5, d=8))
    assert len(a) == 2 * 2 * 5
    for x, y in zip(a, b):
        assert (x.step, x.layer, x.head) == (y.step, y.layer, y.head)
        assert_array_equal(x.instance.query, y.instance.query)
        assert_array_equal(x.instance.keys, y.instance.keys)


def test_zero_walk_rate_repeats_the_query():
    items = [item for item in gen_decode_stream(SynthGenConfig(walk_rate=0.0), layers=1, heads=1, steps=6, d=8)]
    for item in items[1:]:
        assert cosine_similarity(item.instance.query, items[0].instance.query) == pytest.approx(1.0)


def test_queries_are_unit_norm_and_keys_grow():
    stream = DecodeStream(SynthGenConfig(seed=2), HeadConfig(d=8, H=1, n_layers=2), capacity=10)
    for t in (1, 5, 10):
        inst = stream.instance(t, 1, 0)
        assert inst.length == t
        assert np.linalg.norm(inst.query) == pytest.approx(1.0)


def test_key_updates_are_bounded():
    cfg = SynthGenConfig(seed=5, key_update_bound=0.3, key_update_rate=0.7)
    head = HeadConfig(d=8, H=1, n_layers=4)
    stream = DecodeStream(cfg, head, capacity=20)
    assert cfg.update_start(4) == 3
    for layer in (2, 3):
        keys = stream.instance(20, layer, 0).keys
        previous = stream.previous_layer_keys(20, layer, 0)
        drift = np.linalg.norm(keys - previous, axis=1).max()
        assert drift <= stream.key_update_size(layer) + 1e-12
    assert stream.previous_layer_keys(20, 0, 0) is None


def test_exp_decay_reproduces_the_profile():
    cfg = SynthGenConfig(generator_kind=GeneratorKind.EXP_DECAY, decay_rate=0.2, sink_mass=0.1, decay_factor=0.8,
                         sink_tokens=2)
    stream = DecodeStream(cfg, HeadConfig(d=4, H=1, n_layers=1), capacity=30)
    probs = attention_weights(stream.instance(30, 0, 0)).probs
    rho = math.exp(-0.2)
    expected = 0.8 * (1 - rho) * rho ** (30 - 1 - np.arange(2, 30))
    assert_allclose(probs[2:], expected, rtol=1e-10)
    assert probs.sum() == pytest.approx(1.0)
    assert probs[:2].sum() >= 0.1


def test_exp_decay_without_sinks_is_geometric():
    logw = exp_decay_log_weights(5, 0.5, 1.0, 0)
    p = softmax(logw)
    assert_allclose(p[1:] / p[:-1], math.exp(0.5))


@pytest.mark.parametrize("kwargs", [
    {"walk_rate": 1.5},
    {"decay_rate": -0.1},
    {"sink_tokens": 2, "sink_mass": 0.5, "decay_factor": 0.9},
    {"decay_factor": 0.5},
    {"decay_rate": (0.1, 0.2), "sink_mass": (0.0, 0.0, 0.0)},
])
def test_invalid_generator_config(kwargs):
    with pytest.raises(AttentionError):
        SynthGenConfig(**kwargs)


def test_stream_bounds_are_checked():
    stream = DecodeStream(SynthGenConfig(), HeadConfig(d=4, H=1, n_layers=1), capacity=3)
    with pytest.raises(AttentionError):
        stream.instance(4, 0, 0)
    with pytest.raises(AttentionError):
        stream.instance(1, 1, 0)
    with pytest.raises(AttentionError):
        stream.probe(1, 0, 0, "value")
