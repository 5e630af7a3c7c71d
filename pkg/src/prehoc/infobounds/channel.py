from dataclasses import dataclass
from typing import Optional, Sequence
from logging import getLogger
log = getLogger(__name__)
import numpy as np
from scipy.special import rel_entr

from ..attncore import AttentionDist, AttentionInstance, attention_weights, truncate
from .infobounds import BoundError

# enumeration guard
MAX_CONTEXTS = 16
MAX_LENGTH = 12
MAX_ALPHABET = 8


@dataclass(eq=False)
class ChannelModel:
    """
    Context X picks a key set; the index T is drawn from attention of the fixed query over those keys,
    and the output is the value symbol stored at T
    """
    prior: np.ndarray
    keys: np.ndarray
    symbols: np.ndarray
    alphabet: int
    query: np.ndarray

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.query = np.asarray(self.query, dtype=np.float64)
        if self.keys.ndim != 3 or self.symbols.shape != self.keys.shape[:2] or self.prior.shape != self.keys.shape[:1]:
            raise BoundError("ChannelModel", "prior (X,), keys (X, L, d) and symbols (X, L) disagree in shape")
        if self.n_contexts > MAX_CONTEXTS or self.length > MAX_LENGTH or self.alphabet > MAX_ALPHABET:
            raise BoundError("ChannelModel", f"channel too large to enumerate; use at most {MAX_CONTEXTS} contexts, "
                                             f"{MAX_LENGTH} keys and {MAX_ALPHABET} symbols")
        if np.any(self.prior < 0) or abs(self.prior.sum() - 1.0) > 1e-12:
            raise BoundError("ChannelModel", "context prior must be a distribution")
        if np.any(self.symbols < 0) or np.any(self.symbols >= self.alphabet):
            raise BoundError("ChannelModel", f"value symbols must lie in [0, {self.alphabet})")

    @property
    def n_contexts(self) -> int:
        return self.keys.shape[0]

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    def attention(self, x: int) -> AttentionDist:
        return attention_weights(AttentionInstance(query=self.query, keys=self.keys[x], values=self.keys[x]))


def random_channel(rng: np.random.Generator, n_contexts: int, length: int, alphabet: int, d: int = 4,
                   logit_scale: float = 2.0) -> ChannelModel:
    """
    Random channel with alphabet capped at length + 1 so the continuity bound with ln L applies
    """
    alphabet = min(alphabet, length + 1)
    return ChannelModel(
        prior=rng.dirichlet(np.ones(n_contexts)),
        keys=rng.standard_normal((n_contexts, length, d)) * logit_scale,
        symbols=rng.integers(0, alphabet, size=(n_contexts, length)),
        alphabet=alphabet,
        query=rng.standard_normal(d),
    )


@dataclass
class ChannelResult:
    mutual_info: float
    delta_sup: float
    deltas: np.ndarray


def mutual_information(joint: np.ndarray) -> float:
    """I(X;Y) in nats from a joint table p(x, y)"""
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    return float(rel_entr(joint, px * py).sum())


def _context_sets(ch: ChannelModel, selected) -> Optional[list]:
    if selected is None:
        return None
    if len(selected) == ch.n_contexts and all(isinstance(s, (list, tuple, np.ndarray)) for s in selected):
        return [np.asarray(s, dtype=np.int64) for s in selected]
    shared = np.asarray(selected, dtype=np.int64)
    return [shared] * ch.n_contexts


def exact_mi_channel(ch: ChannelModel, selected: Optional[Sequence] = None) -> ChannelResult:
    """
    I(X;Y) by enumeration. `selected` is None (full attention), one index set for every context,
    or one index set per context.
    """
    sets = _context_sets(ch, selected)
    joint = np.zeros((ch.n_contexts, ch.alphabet))
    deltas = np.zeros(ch.n_contexts)
    for x in range(ch.n_contexts):
        dist = ch.attention(x)
        weights = dist.probs
        if sets is not None:
            trunc = truncate(dist, sets[x])
            weights = trunc.renorm_probs
            deltas[x] = trunc.dropped
        np.add.at(joint[x], ch.symbols[x], weights)
        joint[x] *= ch.prior[x]
    return ChannelResult(mutual_info=mutual_information(joint), delta_sup=float(deltas.max()), deltas=deltas)


def oracle_sets(ch: ChannelModel, n: int) -> list:
    """Per-context top-n index sets, lower index first on ties"""
    return [np.sort(np.argsort(-ch.attention(x).probs, kind="stable")[:n]) for x in range(ch.n_contexts)]
