import math
from dataclasses import dataclass
from typing import Optional
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from ..selection import neighborhood, progressive_boundary
from .infobounds import BoundError, BoundReport, prehoc_bound, top_n


@dataclass
class CertificateInput:
    theta_sim: float = 0.8
    k_max: float = 1.0
    q_max: float = 1.0
    # average query norm; None falls back to q_max
    q_mean: Optional[float] = None
    diam_p: float = 1.0
    lam: float = 0.1
    kappa: float = 1.0
    tau_sink: float = 0.0
    window_dist: int = 0
    # visible fraction phi^alpha at the top layer
    u_frac: Optional[float] = None
    b_const: float = 0.2
    mu: float = 0.5
    depth_gap: int = 0
    beta_psaw_target: float = 0.01
    beta_etf_target: float = 0.01
    dilate_radius: int = 1
    t: int = 1000
    delta_star: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.theta_sim <= 1.0:
            raise BoundError("CertificateInput", f"theta_sim must lie in [-1, 1] (got {self.theta_sim})")
        if min(self.k_max, self.q_max, self.diam_p, self.b_const) < 0:
            raise BoundError("CertificateInput", "norms, diameter and key update bound must be >= 0")
        if self.lam <= 0 or self.mu <= 0:
            raise BoundError("CertificateInput", "decay rates lam and mu must be positive")
        if not 0.0 < self.kappa <= 1.0:
            raise BoundError("CertificateInput", f"kappa must lie in (0, 1] (got {self.kappa})")
        if not 0.0 <= self.tau_sink < 1.0:
            raise BoundError("CertificateInput", f"tau_sink must lie in [0, 1) (got {self.tau_sink})")
        if self.u_frac is not None and not 0.0 < self.u_frac <= 1.0:
            raise BoundError("CertificateInput", f"u_frac must lie in (0, 1] (got {self.u_frac})")
        if min(self.window_dist, self.depth_gap, self.dilate_radius) < 0 or self.t < 1:
            raise BoundError("CertificateInput", "distances and radius must be >= 0, t >= 1")

    @property
    def q_average(self) -> float:
        return self.q_mean if self.q_mean is not None else self.q_max


@dataclass
class CisCertificate:
    delta_att: float
    delta_centroid: float
    s_radius: int
    beta_th: float
    eps_drift: float
    # dilation radius reaches the centroid drift radius
    covered: bool
    # delta_att above 2, the largest possible L1 distance
    vacuous: bool


def drift_mass(reference: np.ndarray, m: int, s_radius: int, r: int) -> float:
    """Mass of `reference` in N_s(top-m) minus N_r(top-m)"""
    reference = np.asarray(reference, dtype=np.float64)
    t = reference.size
    top = top_n(reference, min(m, t))
    outer = neighborhood(top, s_radius, t)
    inner = neighborhood(top, r, t)
    return float(reference[np.setdiff1d(outer, inner)].sum())


def cis_certificate(inp: CertificateInput, d: int, reference: Optional[np.ndarray] = None, m: int = 1) -> CisCertificate:
    gap = math.sqrt(max(0.0, 2.0 - 2.0 * inp.theta_sim))
    delta_att = 2.0 * inp.k_max / math.sqrt(d) * gap
    delta_centroid = 2.0 * inp.diam_p * inp.k_max / math.sqrt(d) * gap
    s_radius = math.ceil(delta_centroid)
    covered = inp.dilate_radius >= s_radius
    if covered:
        eps_drift = 0.0
    elif reference is not None:
        eps_drift = drift_mass(reference, m, s_radius, inp.dilate_radius)
    else:
        log.warning(f"Dilation radius {inp.dilate_radius} below drift radius {s_radius} and no reference distribution; "
                    f"charging the full mass as drift loss")
        eps_drift = 1.0
    vacuous = delta_att > 2.0
    if vacuous:
        log.warning(f"CIS attention-variation bound {delta_att:.6g} exceeds 2 and is vacuous")
    return CisCertificate(delta_att=delta_att, delta_centroid=delta_centroid, s_radius=s_radius,
                          beta_th=2.0 * delta_att + eps_drift, eps_drift=eps_drift, covered=covered, vacuous=vacuous)


@dataclass
class PsawCertificate:
    bound: float
    window_dist: int
    top_layer_dist: Optional[int] = None
    top_layer_bound: Optional[float] = None
    # floor(phi^alpha t), the looser top-layer distance
    floor_dist: Optional[int] = None
    floor_bound: Optional[float] = None


def psaw_mass_bound(inp: CertificateInput, dist: int) -> float:
    return min(inp.kappa, 1.0 - inp.tau_sink) * math.exp(-inp.lam * dist)


def psaw_certificate(inp: CertificateInput, t: Optional[int] = None, top_fraction: Optional[float] = None) -> PsawCertificate:
    cert = PsawCertificate(bound=psaw_mass_bound(inp, inp.window_dist), window_dist=inp.window_dist)
    u = top_fraction if top_fraction is not None else inp.u_frac
    if u is not None:
        t = t if t is not None else inp.t
        # realized top-layer window t - P_N(t) >= phi^alpha t
        cert.top_layer_dist = t - progressive_boundary(1, t, 1, 0, u, 1.0, "psaw")
        cert.top_layer_bound = psaw_mass_bound(inp, cert.top_layer_dist)
        cert.floor_dist = math.floor(u * t)
        cert.floor_bound = psaw_mass_bound(inp, cert.floor_dist)
    return cert


@dataclass
class EtfCertificate:
    bound: float
    q_used: float
    worst_case: bool


def etf_certificate(inp: CertificateInput, d: int, worst_case: bool = True, depth_gap: Optional[float] = None) -> EtfCertificate:
    worst_case = worst_case or inp.q_mean is None
    q = inp.q_max if worst_case else inp.q_mean
    gap = inp.depth_gap if depth_gap is None else depth_gap
    return EtfCertificate(bound=q / math.sqrt(d) * inp.b_const * math.exp(-inp.mu * gap), q_used=q, worst_case=worst_case)


@dataclass
class ScheduleTuning:
    min_phi_alpha: float
    min_depth_gap: float
    # smallest whole number of layers above the start layer
    min_depth_layers: int
    psaw_feasible: bool
    etf_feasible: bool


def tune_schedules(inp: CertificateInput, t: int, n_layers: int, d: int) -> ScheduleTuning:
    for name in ("beta_psaw_target", "beta_etf_target"):
        beta = getattr(inp, name)
        if not 0.0 < beta < 1.0:
            raise BoundError("tune_schedules", f"{name} must lie in (0, 1) (got {beta})")
    phi_alpha = max(0.0, math.log((1.0 - inp.tau_sink) / inp.beta_psaw_target) / (inp.lam * t))
    scale = inp.q_average * inp.b_const / (inp.beta_etf_target * math.sqrt(d))
    depth_gap = max(0.0, math.log(scale) / inp.mu) if scale > 0 else 0.0
    layers = math.ceil(depth_gap)
    tuning = ScheduleTuning(min_phi_alpha=phi_alpha, min_depth_gap=depth_gap, min_depth_layers=layers,
                            psaw_feasible=phi_alpha <= 1.0, etf_feasible=layers <= n_layers)
    if not tuning.psaw_feasible:
        log.debug(f"PSAW target {inp.beta_psaw_target} needs phi^alpha >= {phi_alpha:.6g} > 1; infeasible")
    if not tuning.etf_feasible:
        log.debug(f"ETF target {inp.beta_etf_target} needs {layers} layers above the start layer, model has {n_layers}")
    return tuning


@dataclass
class JointCertificate:
    beta_psaw: float
    beta_etf: float
    beta_joint: float
    mi_bound: BoundReport


def joint_certificate(psaw: PsawCertificate, etf: EtfCertificate, delta_star: float, L: int) -> JointCertificate:
    """Top-layer pre-hoc mass error of PSAW and ETF together, and the implied MI bound"""
    beta_psaw = psaw.top_layer_bound if psaw.top_layer_bound is not None else psaw.bound
    beta_joint = beta_psaw + etf.bound
    return JointCertificate(beta_psaw=beta_psaw, beta_etf=etf.bound, beta_joint=beta_joint,
                            mi_bound=prehoc_bound(delta_star, beta_joint, L))
