import math
from dataclasses import dataclass
from typing import Optional, Sequence
from logging import getLogger
log = getLogger(__name__)
import numpy as np
from scipy.special import entr, rel_entr

from ..attncore import AttentionDist, TOLERANCE, total_variation, truncate


class BoundError(Exception):
    def __init__(self, quantity: str, *args: object) -> None:
        super().__init__(*args)
        self.quantity = quantity


@dataclass
class MassAccount:
    retained: float
    dropped: float
    oracle_retained: float
    oracle_dropped: float

    @property
    def beta_gap(self) -> float:
        return self.oracle_retained - self.retained

    @classmethod
    def of(cls, dist: AttentionDist, selected: Sequence[int], oracle: Sequence[int]) -> "MassAccount":
        tau = truncate(dist, selected).retained
        tau_star = truncate(dist, oracle).retained
        return cls(retained=tau, dropped=1.0 - tau, oracle_retained=tau_star, oracle_dropped=1.0 - tau_star)


@dataclass
class BoundReport:
    g_value: float
    kl_value: Optional[float]
    post_hoc_arg: Optional[float] = None
    pre_hoc_arg: Optional[float] = None
    domain_clamped: bool = False
    # argument >= 1: the KL variant is undefined and g carries no information
    vacuous: bool = False


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise BoundError("binary_entropy", f"probability {p} outside [0, 1]")
    return float(entr(p) + entr(1.0 - p))


def domain_limit(L: int) -> float:
    """g is increasing on (0, L/(1+L)]"""
    return L / (1.0 + L)


def clamp_argument(delta: float, L: int) -> tuple[float, bool]:
    limit = domain_limit(L)
    if delta >= limit:
        return limit, True
    return max(delta, 0.0), False


def mi_loss_bound(delta: float, L: int, clamp: bool = True) -> float:
    """g(delta) = 2[h_b(delta) + delta ln L], in nats"""
    if L < 1:
        raise BoundError("mi_loss_bound", f"length must be >= 1 (got {L})")
    if clamp:
        delta, _ = clamp_argument(delta, L)
    delta = min(max(delta, 0.0), 1.0)
    return 2.0 * (binary_entropy(delta) + delta * math.log(L))


def bound_slope(delta: float, L: int) -> float:
    """dg/d(delta) = 2 ln(L(1 - delta)/delta); positive exactly below L/(1+L)"""
    if not 0.0 < delta < 1.0:
        raise BoundError("bound_slope", f"delta {delta} outside (0, 1)")
    return 2.0 * math.log(L * (1.0 - delta) / delta)


def kl_variant(tau: float) -> float:
    if not 0.0 < tau <= 1.0:
        raise BoundError("kl_variant", f"retained mass {tau} outside (0, 1]")
    return -math.log(tau)


def kl_truncation(dist: AttentionDist, selected: Sequence[int]) -> float:
    """D_KL(renormalized truncation || dist), computed term by term"""
    trunc = truncate(dist, selected)
    idx = trunc.selected
    return float(rel_entr(trunc.renorm_probs[idx], dist.probs[idx]).sum())


def _check_distribution(p: np.ndarray, name: str):
    if np.any(p < -TOLERANCE) or abs(p.sum() - 1.0) > 1e-9:
        raise BoundError("posterior_bias", f"{name} is not a normalized distribution")


def posterior_bias(a: AttentionDist | np.ndarray, a_hat: np.ndarray) -> float:
    probs = a.probs if isinstance(a, AttentionDist) else np.asarray(a, dtype=np.float64)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    if probs.shape != a_hat.shape:
        raise BoundError("posterior_bias", f"length mismatch {probs.shape} vs {a_hat.shape}")
    _check_distribution(probs, "attention")
    _check_distribution(a_hat, "surrogate")
    return total_variation(probs, a_hat)


def _report(arg: float, L: int, field_name: str) -> BoundReport:
    clamped_arg, clamped = clamp_argument(arg, L)
    vacuous = arg >= 1.0
    if clamped:
        log.warning(f"Bound argument {arg:.6g} beyond the monotone domain (limit {domain_limit(L):.6g}); clamped")
    return BoundReport(
        g_value=mi_loss_bound(clamped_arg, L, clamp=False),
        kl_value=None if vacuous else kl_variant(1.0 - arg),
        domain_clamped=clamped,
        vacuous=vacuous,
        **{field_name: arg},
    )


def posthoc_bound(delta_star: float, eps_d: float, L: int) -> BoundReport:
    return _report(delta_star + 2.0 * eps_d, L, "post_hoc_arg")


def prehoc_bound(delta_star: float, beta_th: float, L: int) -> BoundReport:
    return _report(delta_star + beta_th, L, "pre_hoc_arg")


def expected_prehoc_bound(delta_star_mean: float, beta_mean: float, L: int) -> BoundReport:
    """
    Average-case form: g is concave, so E[g(delta* + beta)] <= g(E[delta*] + E[beta]) on the monotone domain
    """
    return _report(delta_star_mean + beta_mean, L, "pre_hoc_arg")


def oracle_mass(probs: np.ndarray, n: int) -> float:
    """Largest mass any n positions can retain"""
    return float(np.sort(np.asarray(probs))[::-1][:n].sum())


def top_n(probs: np.ndarray, n: int) -> np.ndarray:
    return np.sort(np.argsort(-np.asarray(probs), kind="stable")[:n])


@dataclass
class MassLossCheck:
    tau_star: float
    tau_sd: float
    eps_d: float
    holds: bool


def mass_loss_check(a: AttentionDist | np.ndarray, a_hat: np.ndarray, n: int) -> MassLossCheck:
    probs = a.probs if isinstance(a, AttentionDist) else np.asarray(a, dtype=np.float64)
    if not 1 <= n <= probs.size:
        raise BoundError("mass_loss_check", f"budget {n} outside [1, {probs.size}]")
    eps = posterior_bias(probs, a_hat)
    tau_star = oracle_mass(probs, n)
    tau_sd = float(probs[top_n(a_hat, n)].sum())
    return MassLossCheck(tau_star=tau_star, tau_sd=tau_sd, eps_d=eps, holds=tau_sd >= tau_star - 2.0 * eps - TOLERANCE)


def logit_perturb_bound(delta_q_norm: float, k_max: float, d: int) -> float:
    return k_max * delta_q_norm / math.sqrt(d)


def key_perturb_bound(q_norm: float, delta_k_max: float, d: int) -> float:
    return q_norm * delta_k_max / math.sqrt(d)


def centroid_drift_bound(delta_q_norm: float, diam_p: float, k_max: float, d: int) -> float:
    return 2.0 * diam_p * logit_perturb_bound(delta_q_norm, k_max, d)
