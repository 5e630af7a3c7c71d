from dataclasses import dataclass, field
from typing import Sequence, Tuple
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from ..attncore import AttentionInstance, STREAM_SKETCH, counter_rng, softmax
from .selection import BudgetSpec, SelectionError, SelectionResult, structured_topk


@dataclass
class TdoState:
    """
    Heavy-hitter eviction state: accumulated attention per position and the positions evicted so far
    """
    cumulative_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    evicted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    kept_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    observed: int = 0

    def _grow(self, length: int):
        if length > self.cumulative_scores.size:
            extra = length - self.cumulative_scores.size
            self.cumulative_scores = np.concatenate([self.cumulative_scores, np.zeros(extra)])
            self.evicted = np.concatenate([self.evicted, np.zeros(extra, dtype=bool)])

    def observe(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs < 0):
            raise SelectionError("tdo", "observed attention must be non-negative")
        self._grow(probs.size)
        self.cumulative_scores[:probs.size] += probs
        self.observed += 1

    def surrogate(self, t: int) -> np.ndarray:
        """Cumulative scores over [0, t) normalized over the non-evicted positions; evicted positions get 0"""
        self._grow(t)
        alive = ~self.evicted[:t]
        scores = np.where(alive, self.cumulative_scores[:t], 0.0)
        total = scores.sum()
        if total > 0:
            return scores / total
        return alive / alive.sum() if alive.any() else np.full(t, 1.0 / t)


def tdo_select(state: TdoState, dist_history: Sequence[np.ndarray], budget: BudgetSpec, t: int) -> SelectionResult:
    """
    `dist_history` is every dense distribution observed so far; entries past `state.observed` are folded in first
    """
    if state.observed > len(dist_history):
        raise SelectionError("tdo", f"state has seen {state.observed} steps, history holds {len(dist_history)}")
    for probs in dist_history[state.observed:]:
        state.observe(probs)
    budget.check(t, "tdo")
    surrogate = state.surrogate(t)
    sinks, middle, local = structured_topk(surrogate, budget, t, eligible=~state.evicted[:t])
    dropped = np.setdiff1d(np.arange(budget.c_sink, max(t - budget.c_local, budget.c_sink)), middle)
    state.evicted[dropped] = True
    state.kept_set = np.concatenate([sinks, np.sort(middle), local])
    return SelectionResult(selected=state.kept_set, retrievals_performed=0, surrogate=surrogate)


@dataclass
class QaaConfig:
    sketch_dim: int = 4
    seed: int = 0
    # d' = d with P = I reproduces the exact logits
    identity: bool = False

    def __post_init__(self):
        if self.sketch_dim < 1:
            raise SelectionError("qaa", f"sketch_dim must be >= 1 (got {self.sketch_dim})")


def sketch_matrix(cfg: QaaConfig, d: int, layer: int = 0, head: int = 0) -> np.ndarray:
    if cfg.sketch_dim > d:
        raise SelectionError("qaa", f"sketch_dim {cfg.sketch_dim} exceeds head dimension {d}")
    if cfg.identity:
        if cfg.sketch_dim != d:
            raise SelectionError("qaa", "the identity sketch needs sketch_dim == d")
        return np.eye(d)
    return counter_rng(cfg.seed, STREAM_SKETCH, layer, head).standard_normal((cfg.sketch_dim, d)) / np.sqrt(cfg.sketch_dim)


def qaa_select(inst: AttentionInstance, cfg: QaaConfig, budget: BudgetSpec, t: int,
               layer: int = 0, head: int = 0) -> Tuple[SelectionResult, float]:
    """
    Scores keys in a d'-dimensional sketch and keeps the structured top-k of the surrogate softmax.
    returns: (selection, eta) where eta is the observed sup-norm logit error
    """
    budget.check(t, "qaa")
    if inst.length != t:
        raise SelectionError("qaa", f"instance holds {inst.length} keys, step is {t}")
    sketch = sketch_matrix(cfg, inst.d, layer, head)
    scale = np.sqrt(inst.d)
    logits = inst.keys @ inst.query / scale
    approx = (inst.keys @ sketch.T) @ (sketch @ inst.query) / scale
    surrogate = softmax(approx)
    sinks, middle, local = structured_topk(surrogate, budget, t)
    eta = float(np.max(np.abs(logits - approx)))
    return SelectionResult(selected=np.concatenate([sinks, middle, local]), surrogate=surrogate), eta
