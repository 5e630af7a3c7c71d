import math
from dataclasses import dataclass
from typing import Optional, Tuple
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from ..attncore import AttentionDist

# defaults of the pre-hoc schedules
SIM_THRESHOLD = 0.8
PHI = 0.7
ALPHA = 1.0
PSI = 0.5
GAMMA = 1.0


class SelectionError(Exception):
    def __init__(self, selector: str, *args: object) -> None:
        super().__init__(*args)
        self.selector = selector


@dataclass
class BudgetSpec:
    c_sink: int = 0
    c_local: int = 0
    k_mid: int = 1

    def __post_init__(self):
        if min(self.c_sink, self.c_local, self.k_mid) < 0:
            raise SelectionError("BudgetSpec", "budget parts must be >= 0")
        if self.total < 1:
            raise SelectionError("BudgetSpec", "total budget must be >= 1")

    @property
    def total(self) -> int:
        return self.c_sink + self.k_mid + self.c_local

    def check(self, t: int, selector: str):
        if self.total > t:
            raise SelectionError(selector, f"budget {self.total} exceeds the {t} cached positions")


@dataclass(eq=False)
class SelectionResult:
    selected: np.ndarray
    was_shared: bool = False
    anchor_step: Optional[int] = None
    retrievals_performed: int = 1
    # set when a composition came back empty and the sink/local window was used instead
    fallback: bool = False
    frozen: Optional[np.ndarray] = None
    surrogate: Optional[np.ndarray] = None

    def __post_init__(self):
        self.selected = np.unique(np.asarray(self.selected, dtype=np.int64))
        if self.was_shared and self.retrievals_performed != 0:
            raise SelectionError("SelectionResult", "a shared selection cannot count retrievals")

    @property
    def budget_used(self) -> int:
        return int(self.selected.size)


def sink_indices(budget: BudgetSpec, t: int) -> np.ndarray:
    return np.arange(min(budget.c_sink, t), dtype=np.int64)


def local_indices(budget: BudgetSpec, t: int) -> np.ndarray:
    return np.arange(max(t - budget.c_local, 0), t, dtype=np.int64)


def rank_middle(scores: np.ndarray, budget: BudgetSpec, t: int, eligible: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Middle candidates [c_sink, t - c_local) ordered by descending score, lower index first on ties.
    `eligible` is an optional boolean mask over [0, t).
    """
    candidates = np.arange(budget.c_sink, max(t - budget.c_local, budget.c_sink), dtype=np.int64)
    if eligible is not None:
        candidates = candidates[eligible[candidates]]
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


def structured_topk(scores: np.ndarray, budget: BudgetSpec, t: int,
                    eligible: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    returns: (sinks, chosen middle in rank order, local window)
    """
    middle = rank_middle(scores, budget, t, eligible)[:budget.k_mid]
    return sink_indices(budget, t), middle, local_indices(budget, t)


def topk_oracle(dist: AttentionDist, budget: BudgetSpec, t: int) -> SelectionResult:
    budget.check(t, "oracle")
    if dist.length != t:
        raise SelectionError("oracle", f"distribution covers {dist.length} positions, step is {t}")
    sinks, middle, local = structured_topk(dist.probs, budget, t)
    return SelectionResult(selected=np.concatenate([sinks, middle, local]))


def cosine_similarity(q1: np.ndarray, q2: np.ndarray) -> float:
    q1, q2 = np.asarray(q1, dtype=np.float64), np.asarray(q2, dtype=np.float64)
    if q1.shape != q2.shape:
        raise SelectionError("cosine_similarity", f"dimension mismatch {q1.shape} vs {q2.shape}")
    n1, n2 = np.linalg.norm(q1), np.linalg.norm(q2)
    if n1 == 0 or n2 == 0:
        return 0.0
    return float(q1 @ q2 / (n1 * n2))


def default_start_layer(n_layers: int) -> int:
    return (3 * n_layers) // 4


@dataclass
class PsawConfig:
    start_layer: Optional[int] = None
    phi: float = PHI
    alpha: float = ALPHA

    def __post_init__(self):
        if not 0.0 < self.phi < 1.0:
            raise SelectionError("PsawConfig", f"phi must lie in (0, 1) (got {self.phi})")
        if self.alpha < 0:
            raise SelectionError("PsawConfig", f"alpha must be >= 0 (got {self.alpha})")

    def start(self, n_layers: int) -> int:
        return self.start_layer if self.start_layer is not None else default_start_layer(n_layers)

    @property
    def top_fraction(self) -> float:
        """phi^alpha, the visible fraction at the top layer"""
        return self.phi ** self.alpha


@dataclass
class EtfConfig:
    start_layer: Optional[int] = None
    psi: float = PSI
    gamma: float = GAMMA

    def __post_init__(self):
        if not 0.0 < self.psi < 1.0:
            raise SelectionError("EtfConfig", f"psi must lie in (0, 1) (got {self.psi})")
        if self.gamma <= 0:
            raise SelectionError("EtfConfig", f"gamma must be positive (got {self.gamma})")

    def start(self, n_layers: int) -> int:
        return self.start_layer if self.start_layer is not None else default_start_layer(n_layers)


def progressive_boundary(layer: int, t: int, n_layers: int, start: int, base: float, power: float, selector: str) -> int:
    """
    floor((1 - base^(power*(layer-start)/(n_layers-start))) * t) for layer >= start, else 0.
    `layer` is the 1-based depth in [0, n_layers]; the top layer is n_layers.
    """
    if not 0 <= layer <= n_layers:
        raise SelectionError(selector, f"layer depth {layer} outside [0, {n_layers}]")
    if not 0 <= start <= n_layers:
        raise SelectionError(selector, f"start layer {start} outside [0, {n_layers}]")
    if layer < start:
        return 0
    frac = 1.0 if n_layers == start else (layer - start) / (n_layers - start)
    cut = (1.0 - base ** (power * frac)) * t
    return min(t, max(0, math.floor(cut + 1e-9)))


def psaw_boundary(layer: int, t: int, n_layers: int, cfg: PsawConfig) -> int:
    return progressive_boundary(layer, t, n_layers, cfg.start(n_layers), cfg.phi, cfg.alpha, "psaw")


def etf_boundary(layer: int, t: int, n_layers: int, cfg: EtfConfig) -> int:
    return progressive_boundary(layer, t, n_layers, cfg.start(n_layers), cfg.psi, cfg.gamma, "etf")


def psaw_visible_set(boundary: int, t: int, c_sink: int) -> np.ndarray:
    if boundary > t:
        raise SelectionError("psaw", f"boundary {boundary} beyond step {t}")
    sinks = np.arange(min(c_sink, t), dtype=np.int64)
    return np.union1d(sinks, np.arange(max(boundary, 0), t, dtype=np.int64))


def psaw_masked_set(boundary: int, t: int, c_sink: int) -> np.ndarray:
    return np.arange(min(c_sink, t), max(min(boundary, t), min(c_sink, t)), dtype=np.int64)


def etf_frozen_set(boundary: int, t: int, c_sink: int) -> np.ndarray:
    """Positions whose keys/values are reused from the layer below instead of being recomputed"""
    return psaw_masked_set(boundary, t, c_sink)


def compose_cpe(cis_result: SelectionResult, psaw_visible: np.ndarray, etf_frozen: Optional[np.ndarray],
                budget: BudgetSpec, t: int) -> SelectionResult:
    """
    Intersects the CIS seed with the PSAW window. `etf_frozen` is only passed during prefill; decode omits it.
    """
    sinks = sink_indices(budget, t)
    kept = np.union1d(np.intersect1d(cis_result.selected, psaw_visible), sinks)
    fallback = np.setdiff1d(kept, sinks).size == 0
    if fallback:
        log.debug(f"Step {t}: CIS set lies inside the masked range, falling back to sinks + local window")
        kept = np.union1d(sinks, local_indices(budget, t))
    return SelectionResult(
        selected=kept,
        was_shared=cis_result.was_shared,
        anchor_step=cis_result.anchor_step,
        retrievals_performed=cis_result.retrievals_performed,
        fallback=fallback,
        frozen=None if etf_frozen is None else np.asarray(etf_frozen, dtype=np.int64),
    )
