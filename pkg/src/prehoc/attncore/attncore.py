from dataclasses import dataclass, field
from typing import Sequence, Tuple
from logging import getLogger
log = getLogger(__name__)
import numpy as np

TOLERANCE = 1e-12


class AttentionError(Exception):
    def __init__(self, operation: str, *args: object) -> None:
        super().__init__(*args)
        self.operation = operation


@dataclass
class HeadConfig:
    d: int
    H: int = 1
    n_layers: int = 1

    def __post_init__(self):
        if self.d < 1 or self.H < 1 or self.n_layers < 1:
            raise AttentionError("HeadConfig", f"d, H and n_layers must be >= 1 (got {self.d}, {self.H}, {self.n_layers})")

    @property
    def scale(self) -> float:
        return self.d ** -0.5


@dataclass(eq=False)
class AttentionInstance:
    """
    One head's snapshot at decode step `step`: the query attends to the `length` cached keys [0, step).
    """
    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64).reshape(-1)
        self.keys = np.atleast_2d(np.asarray(self.keys, dtype=np.float64))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.keys.shape[0] < 1:
            raise AttentionError("AttentionInstance", "at least one key is required")
        if self.keys.shape[0] != self.values.shape[0]:
            raise AttentionError("AttentionInstance", f"{self.keys.shape[0]} keys but {self.values.shape[0]} values")
        if self.keys.shape[1] != self.query.shape[0]:
            raise AttentionError("AttentionInstance", f"query has dimension {self.query.shape[0]}, keys {self.keys.shape[1]}")
        for name, arr in (("query", self.query), ("keys", self.keys), ("values", self.values)):
            if not np.all(np.isfinite(arr)):
                raise AttentionError("AttentionInstance", f"non-finite entries in {name}")

    @property
    def length(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.query.shape[0]


@dataclass(eq=False)
class AttentionDist:
    probs: np.ndarray
    logits: np.ndarray

    @property
    def length(self) -> int:
        return self.probs.shape[0]


@dataclass(eq=False)
class TruncatedDist:
    base: AttentionDist
    selected: np.ndarray
    retained: float
    renorm_probs: np.ndarray = field(repr=False)

    @property
    def dropped(self) -> float:
        return 1.0 - self.retained


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = np.exp(logits - np.max(logits))
    return z / z.sum()


def attention_weights(inst: AttentionInstance) -> AttentionDist:
    logits = inst.keys @ inst.query / np.sqrt(inst.d)
    return AttentionDist(probs=softmax(logits), logits=logits)


def attention_output(inst: AttentionInstance, dist: AttentionDist) -> np.ndarray:
    if dist.length != inst.length:
        raise AttentionError("attention_output", f"distribution has {dist.length} entries, instance {inst.length}")
    return dist.probs @ inst.values


def as_index_set(selected: Sequence[int] | np.ndarray, length: int, operation: str) -> np.ndarray:
    """
    Sorted, de-duplicated int64 index array; raises if anything falls outside [0, length)
    """
    idx = np.unique(np.asarray(selected, dtype=np.int64).reshape(-1))
    if idx.size and (idx[0] < 0 or idx[-1] >= length):
        raise AttentionError(operation, f"indices must lie in [0, {length})")
    return idx


def truncate(dist: AttentionDist, selected: Sequence[int] | np.ndarray) -> TruncatedDist:
    idx = as_index_set(selected, dist.length, "truncate")
    if idx.size == 0:
        raise AttentionError("truncate", "empty selection")
    # float sums of a full selection can land a hair above 1
    retained = min(float(dist.probs[idx].sum()), 1.0)
    renorm = np.zeros_like(dist.probs)
    renorm[idx] = dist.probs[idx] / retained
    return TruncatedDist(base=dist, selected=idx, retained=retained, renorm_probs=renorm)


def sparse_attention(inst: AttentionInstance, selected: Sequence[int] | np.ndarray,
                     dist: AttentionDist | None = None) -> Tuple[TruncatedDist, np.ndarray]:
    if dist is None:
        dist = attention_weights(inst)
    try:
        trunc = truncate(dist, selected)
    except AttentionError as ex:
        raise AttentionError("sparse_attention", *ex.args) from ex
    output = trunc.renorm_probs[trunc.selected] @ inst.values[trunc.selected]
    return trunc, output


def centroid(dist: AttentionDist, positions: Sequence[float] | np.ndarray) -> float:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != dist.probs.shape:
        raise AttentionError("centroid", f"{positions.shape[0]} positions for {dist.length} probabilities")
    if not np.all(np.isfinite(positions)):
        raise AttentionError("centroid", "non-finite positions")
    return float(dist.probs @ positions)


def l1_distance(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * l1_distance(p, q)
