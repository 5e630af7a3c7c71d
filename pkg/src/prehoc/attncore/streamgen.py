import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence, Tuple
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from .attncore import AttentionError, AttentionInstance, HeadConfig

# counter coordinates; the first coordinate names the random stream
STREAM_WALK = 0
STREAM_PROJECTION = 1
STREAM_KEY_UPDATE = 2
STREAM_VALUES = 3
STREAM_SKETCH = 4
SEED_MASK = (1 << 64) - 1


class GeneratorKind(str, Enum):
    RANDOM_WALK = "random-walk"
    EXP_DECAY = "exp-decay"


def counter_rng(seed: int, *coords: int) -> np.random.Generator:
    """
    Counter-based generator: the stream for (seed, coords) is independent of the order in which streams are requested
    """
    ss = np.random.SeedSequence(seed & SEED_MASK, spawn_key=tuple(int(c) for c in coords))
    return np.random.Generator(np.random.Philox(ss))


def per_layer(value: float | Sequence[float], layer: int) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    if not 0 <= layer < len(value):
        raise AttentionError("SynthGenConfig", f"no per-layer setting for layer {layer}")
    return float(value[layer])


@dataclass
class SynthGenConfig:
    seed: int = 0
    walk_rate: float = 0.1
    weight_scale: float = 1.0
    generator_kind: GeneratorKind = GeneratorKind.RANDOM_WALK
    decay_rate: float | Tuple[float, ...] = 0.1
    sink_mass: float | Tuple[float, ...] = 0.0
    decay_factor: float | Tuple[float, ...] = 1.0
    key_update_bound: float = 0.2
    key_update_rate: float = 0.5
    # layer depth (1-based) from which keys drift by bounded updates; None picks floor(3N/4)
    key_update_start: Optional[int] = None
    sink_tokens: int = 0

    def __post_init__(self):
        self.generator_kind = GeneratorKind(self.generator_kind)
        for name in ("decay_rate", "sink_mass", "decay_factor"):
            value = getattr(self, name)
            if isinstance(value, list):
                setattr(self, name, tuple(float(v) for v in value))
        if not 0.0 <= self.walk_rate <= 1.0:
            raise AttentionError("SynthGenConfig", f"walk_rate must lie in [0, 1] (got {self.walk_rate})")
        if self.key_update_bound <= 0 or self.key_update_rate <= 0:
            raise AttentionError("SynthGenConfig", "key_update_bound and key_update_rate must be positive")
        if self.sink_tokens < 0:
            raise AttentionError("SynthGenConfig", "sink_tokens must be >= 0")
        lengths = {len(v) for v in (self.decay_rate, self.sink_mass, self.decay_factor) if isinstance(v, tuple)}
        if len(lengths) > 1:
            raise AttentionError("SynthGenConfig", f"per-layer settings disagree on the layer count: {sorted(lengths)}")
        for layer in range(lengths.pop() if lengths else 1):
            lam = per_layer(self.decay_rate, layer)
            kappa = per_layer(self.decay_factor, layer)
            tau = per_layer(self.sink_mass, layer)
            if lam <= 0:
                raise AttentionError("SynthGenConfig", f"decay_rate must be positive (got {lam})")
            if not 0.0 < kappa <= 1.0:
                raise AttentionError("SynthGenConfig", f"decay_factor must lie in (0, 1] (got {kappa})")
            if not 0.0 <= tau < 1.0:
                raise AttentionError("SynthGenConfig", f"sink_mass must lie in [0, 1) (got {tau})")
            if kappa > 1.0 - tau + 1e-15:
                raise AttentionError("SynthGenConfig", f"decay_factor {kappa} leaves less than sink_mass {tau} on the sinks")
            if self.sink_tokens == 0 and (kappa != 1.0 or tau != 0.0):
                raise AttentionError("SynthGenConfig", "without sink tokens the decay channel needs decay_factor 1 and sink_mass 0")

    def update_start(self, n_layers: int) -> int:
        return self.key_update_start if self.key_update_start is not None else (3 * n_layers) // 4

    def decay_ratio(self, layer: int) -> float:
        return math.exp(-per_layer(self.decay_rate, layer))


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def exp_decay_log_weights(t: int, lam: float, kappa: float, sink_tokens: int) -> np.ndarray:
    """
    Log-probabilities of the recency channel at step t over positions [0, t).
    Non-sink position i carries kappa*(1-rho)*rho^(t-1-i); the sinks share what is left uniformly.
    Without sinks the geometric profile is renormalized over the t positions.
    """
    distance = np.arange(t - 1, -1, -1, dtype=np.float64)
    n_sink = min(sink_tokens, t)
    if n_sink == 0:
        return -lam * distance
    rho = math.exp(-lam)
    n = t - n_sink
    logw = np.empty(t)
    logw[n_sink:] = math.log(kappa) + math.log1p(-rho) - lam * distance[n_sink:]
    # 1 - kappa*(1 - rho^n) in log space
    leftover = np.logaddexp(math.log(1.0 - kappa) if kappa < 1.0 else -math.inf, math.log(kappa) - lam * n)
    logw[:n_sink] = leftover - math.log(n_sink)
    return logw


@dataclass(eq=False)
class StreamItem:
    step: int
    layer: int
    head: int
    instance: AttentionInstance


class DecodeStream:
    """
    Seeded synthetic decode stream covering positions [0, capacity].
    Step t (1 <= t <= capacity) yields, for every layer and head, the query of position t attending to keys [0, t).
    """

    def __init__(self, cfg: SynthGenConfig, head: HeadConfig, capacity: int):
        if capacity < 1:
            raise AttentionError("DecodeStream", "capacity must be >= 1")
        self.cfg = cfg
        self.head = head
        self.capacity = capacity
        self._projections = {}
        self._values = {}
        self._rows = {}
        self.embeddings = self._walk() if cfg.generator_kind == GeneratorKind.RANDOM_WALK else None
        log.debug(f"Stream ready: {cfg.generator_kind.value}, d={head.d}, capacity={capacity}")

    def _walk(self) -> np.ndarray:
        d, eps = self.head.d, self.cfg.walk_rate
        emb = np.empty((self.capacity + 1, d))
        emb[0] = normalize(counter_rng(self.cfg.seed, STREAM_WALK, 0).standard_normal(d))
        for t in range(1, self.capacity + 1):
            noise = normalize(counter_rng(self.cfg.seed, STREAM_WALK, t).standard_normal(d))
            step = normalize((1.0 - eps) * emb[t - 1] + eps * noise)
            emb[t] = step if np.any(step) else emb[t - 1]
        return emb

    def projections(self, layer: int, head: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        (W_Q, W_K, W_V) of one head. From depth update_start on, W_K is the previous layer's W_K plus an update
        whose spectral norm is key_update_bound*exp(-key_update_rate*(depth - update_start)) / weight_scale.
        """
        if (layer, head) in self._projections:
            return self._projections[(layer, head)]
        d = self.head.d
        rng = counter_rng(self.cfg.seed, STREAM_PROJECTION, layer, head)
        wq, wk, wv = (rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(3))
        if layer > 0 and layer + 1 >= self.cfg.update_start(self.head.n_layers):
            update = counter_rng(self.cfg.seed, STREAM_KEY_UPDATE, layer, head).standard_normal((d, d))
            size = self.key_update_size(layer)
            wk = self.projections(layer - 1, head)[1] + update * (size / (self.cfg.weight_scale * np.linalg.norm(update, 2)))
        self._projections[(layer, head)] = (wq, wk, wv)
        return wq, wk, wv

    def key_update_size(self, layer: int) -> float:
        depth, start = layer + 1, self.cfg.update_start(self.head.n_layers)
        return self.cfg.key_update_bound * math.exp(-self.cfg.key_update_rate * (depth - start))

    def _projected(self, layer: int, head: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Queries, keys and values of every position [0, capacity] for one head"""
        if (layer, head) not in self._rows:
            ws = self.cfg.weight_scale
            self._rows[(layer, head)] = tuple(ws * self.embeddings @ w.T for w in self.projections(layer, head))
        return self._rows[(layer, head)]

    def _decay_values(self, layer: int, head: int) -> np.ndarray:
        if (layer, head) not in self._values:
            rng = counter_rng(self.cfg.seed, STREAM_VALUES, layer, head)
            self._values[(layer, head)] = rng.standard_normal((self.capacity, self.head.d))
        return self._values[(layer, head)]

    def _check(self, step: int, layer: int, head: int):
        if not 1 <= step <= self.capacity:
            raise AttentionError("DecodeStream", f"step {step} outside [1, {self.capacity}]")
        if not (0 <= layer < self.head.n_layers and 0 <= head < self.head.H):
            raise AttentionError("DecodeStream", f"no layer {layer} / head {head}")

    def instance(self, step: int, layer: int, head: int) -> AttentionInstance:
        self._check(step, layer, head)
        if self.cfg.generator_kind == GeneratorKind.EXP_DECAY:
            logw = exp_decay_log_weights(step, per_layer(self.cfg.decay_rate, layer),
                                         per_layer(self.cfg.decay_factor, layer), self.cfg.sink_tokens)
            return AttentionInstance(query=[1.0], keys=logw[:, None], values=self._decay_values(layer, head)[:step], step=step)
        queries, keys, values = self._projected(layer, head)
        return AttentionInstance(query=normalize(queries[step]), keys=keys[:step], values=values[:step], step=step)

    def previous_layer_keys(self, step: int, layer: int, head: int) -> Optional[np.ndarray]:
        """
        Keys the layer would reuse if frozen: the layer below's keys over [0, step). None at layer 0 or for the decay channel.
        """
        self._check(step, layer, head)
        if layer == 0 or self.embeddings is None:
            return None
        return self._projected(layer - 1, head)[1][:step]

    def probe(self, step: int, layer: int, head: int, source: str) -> np.ndarray:
        """
        Vector compared by the sharing gate: the head's query, its current key, or the hidden embedding
        """
        self._check(step, layer, head)
        if self.embeddings is None:
            return np.ones(1)
        if source == "query":
            return normalize(self._projected(layer, head)[0][step])
        if source == "key":
            return self._projected(layer, head)[1][step]
        if source == "hidden":
            return self.embeddings[step]
        raise AttentionError("DecodeStream", f"unknown similarity source `{source}`")


def gen_decode_stream(cfg: SynthGenConfig, layers: int, heads: int, steps: int, d: int = 16, start: int = 1) -> Iterator[StreamItem]:
    if steps < 1:
        raise AttentionError("gen_decode_stream", "steps must be >= 1")
    if start < 1:
        raise AttentionError("gen_decode_stream", "start must be >= 1")
    stream = DecodeStream(cfg, HeadConfig(d=d, H=heads, n_layers=layers), capacity=start + steps - 1)
    for t in range(start, start + steps):
        for layer in range(layers):
            for head in range(heads):
                yield StreamItem(step=t, layer=layer, head=head, instance=stream.instance(t, layer, head))
