from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from ..attncore import AttentionDist
from .selection import (BudgetSpec, SelectionError, SelectionResult, SIM_THRESHOLD, cosine_similarity, local_indices,
                        structured_topk)


class SimilaritySource(str, Enum):
    QUERY = "query"
    KEY = "key"
    HIDDEN = "hidden"


@dataclass
class CisConfig:
    block_size: int = 8
    # values above 1 disable sharing
    sim_threshold: float = SIM_THRESHOLD
    # None picks k_mid // 3
    dilate_count: Optional[int] = None
    dilate_radius: int = 1
    budget: BudgetSpec = field(default_factory=BudgetSpec)
    similarity_source: SimilaritySource = SimilaritySource.QUERY

    def __post_init__(self):
        self.similarity_source = SimilaritySource(self.similarity_source)
        if self.block_size < 1:
            raise SelectionError("cis", f"block_size must be >= 1 (got {self.block_size})")
        if self.sim_threshold < -1.0:
            raise SelectionError("cis", f"sim_threshold below -1 (got {self.sim_threshold})")
        if self.dilate_radius < 0:
            raise SelectionError("cis", "dilate_radius must be >= 0")
        if not 0 <= self.m <= self.budget.k_mid:
            raise SelectionError("cis", f"dilate_count {self.m} outside [0, k_mid={self.budget.k_mid}]")

    @property
    def m(self) -> int:
        return self.dilate_count if self.dilate_count is not None else self.budget.k_mid // 3

    @property
    def workload(self) -> int:
        """Upper bound on tokens per head for a retrieving step: C + 2mr"""
        return self.budget.total + 2 * self.m * self.dilate_radius


def neighborhood(positions: np.ndarray, radius: int, t: int) -> np.ndarray:
    """Union of [p - radius, p + radius] over `positions`, clipped to [0, t)"""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return positions
    offsets = np.arange(-radius, radius + 1, dtype=np.int64)
    spread = (positions[:, None] + offsets[None, :]).reshape(-1)
    return np.unique(spread[(spread >= 0) & (spread < t)])


@dataclass
class CisSource:
    step: int
    vector: np.ndarray
    stored: np.ndarray


@dataclass
class CisState:
    """Per-(layer, head) sharing state; blocks are counted from the first decode step seen"""
    origin: Optional[int] = None
    block: Optional[int] = None
    sources: List[CisSource] = field(default_factory=list)

    def enter(self, t: int, block_size: int) -> bool:
        """Moves the state to t's block; returns True if t opens a new block"""
        if self.origin is None:
            self.origin = t
        block = (t - self.origin) // block_size
        if block != self.block:
            self.block = block
            self.sources.clear()
            return True
        return False


def retrieve_dilated(dist: AttentionDist, budget: BudgetSpec, m: int, r: int, t: int) -> np.ndarray:
    budget.check(t, "cis")
    sinks, middle, local = structured_topk(dist.probs, budget, t)
    oracle = np.concatenate([sinks, middle, local])
    return np.union1d(oracle, neighborhood(middle[:m], r, t))


def cis_select(state: CisState, dist: AttentionDist, probe: np.ndarray, t: int, cfg: CisConfig) -> SelectionResult:
    """
    One CIS decision for one head. `probe` is the vector the gate compares (query, key or hidden state);
    `dist` is only read when the step retrieves.
    """
    if t < 1:
        raise SelectionError("cis", f"step must be >= 1 (got {t})")
    opens_block = state.enter(t, cfg.block_size)
    if not opens_block and np.any(probe):
        for source in reversed(state.sources):
            if cosine_similarity(probe, source.vector) > cfg.sim_threshold:
                # stored set with the local window slid from the anchor step to t
                kept = np.setdiff1d(source.stored, local_indices(cfg.budget, source.step))
                selected = np.union1d(kept, local_indices(cfg.budget, t))
                log.debug(f"Step {t}: sharing the set of step {source.step} ({selected.size} positions)")
                return SelectionResult(selected=selected, was_shared=True, anchor_step=source.step, retrievals_performed=0)
    stored = retrieve_dilated(dist, cfg.budget, cfg.m, cfg.dilate_radius, t)
    state.sources.append(CisSource(step=t, vector=np.array(probe, dtype=np.float64), stored=stored))
    return SelectionResult(selected=stored, retrievals_performed=1)
