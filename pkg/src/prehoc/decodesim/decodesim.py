from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from ..attncore import (DecodeStream, GeneratorKind, HeadConfig, SynthGenConfig, TOLERANCE, attention_output,
                        attention_weights, l1_distance, per_layer, softmax, sparse_attention, total_variation)
from ..selection import (BudgetSpec, CisConfig, CisState, EtfConfig, PsawConfig, QaaConfig, SelectionResult,
                         SimilaritySource, TdoState, cis_select, compose_cpe, cosine_similarity, etf_boundary,
                         etf_frozen_set, psaw_boundary, psaw_masked_set, psaw_visible_set, qaa_select, tdo_select,
                         topk_oracle)
from ..infobounds import MassAccount


class SimulationError(Exception):
    def __init__(self, stage: str, *args: object) -> None:
        super().__init__(*args)
        self.stage = stage


class SelectorKind(str, Enum):
    ORACLE = "oracle"
    FULL = "full"
    CIS = "cis"
    CPE = "cpe"
    PSAW = "psaw"
    TDO = "tdo"
    QAA = "qaa"


@dataclass
class SimConfig:
    gen: SynthGenConfig = field(default_factory=SynthGenConfig)
    head_cfg: HeadConfig = field(default_factory=lambda: HeadConfig(d=16, H=2, n_layers=4))
    selector: SelectorKind = SelectorKind.CIS
    budget: BudgetSpec = field(default_factory=lambda: BudgetSpec(c_sink=4, c_local=8, k_mid=16))
    cis: CisConfig = field(default_factory=CisConfig)
    psaw: PsawConfig = field(default_factory=PsawConfig)
    etf: EtfConfig = field(default_factory=EtfConfig)
    qaa: QaaConfig = field(default_factory=QaaConfig)
    steps: int = 64
    prefill_len: int = 64
    simulate_prefill: bool = True

    def __post_init__(self):
        self.selector = SelectorKind(self.selector)
        # CIS always works with the run's budget
        self.cis = replace(self.cis, budget=self.budget)
        if self.steps < 1:
            raise SimulationError("SimConfig", f"steps must be >= 1 (got {self.steps})")
        if self.prefill_len < max(1, self.budget.total):
            raise SimulationError("SimConfig", f"prefill_len {self.prefill_len} below the budget {self.budget.total}")
        if self.gen.generator_kind == GeneratorKind.EXP_DECAY and self.gen.sink_tokens > self.budget.c_sink:
            raise SimulationError("SimConfig", "the budget must keep every sink token of the decay channel")

    @property
    def uses_psaw(self) -> bool:
        return self.selector in (SelectorKind.CPE, SelectorKind.PSAW)


@dataclass
class StepMetrics:
    step: int
    layer: int
    head: int
    selector: str
    rho_t: float = 0.0
    retrieved: int = 0
    was_shared: bool = False
    anchor_step: Optional[int] = None
    fallback: bool = False
    budget_used: int = 0
    tau_pre: float = 1.0
    tau_star: float = 1.0
    beta_gap: float = 0.0
    overlap: float = 1.0
    attn_l1: float = 0.0
    renorm_tv: float = 0.0
    out_dev: float = 0.0
    flops_sparse: float = 0.0
    flops_dense: float = 0.0
    similarity: Optional[float] = None
    delta_att_bound: Optional[float] = None
    cis_holds: Optional[bool] = None
    eps_d: Optional[float] = None
    eta: Optional[float] = None
    mass_loss_holds: Optional[bool] = None
    psaw_boundary: Optional[int] = None
    psaw_masked: Optional[float] = None
    psaw_bound: Optional[float] = None
    psaw_holds: Optional[bool] = None


@dataclass
class PrefillMetrics:
    step: int
    layer: int
    head: int
    psaw_boundary: int = 0
    psaw_masked: float = 0.0
    psaw_bound: Optional[float] = None
    psaw_holds: Optional[bool] = None
    etf_boundary: int = 0
    etf_tv: float = 0.0
    etf_bound: Optional[float] = None
    etf_holds: Optional[bool] = None


@dataclass
class FlopCounts:
    dense: float
    sparse: float

    @property
    def ratio(self) -> float:
        return self.sparse / self.dense if self.dense > 0 else 1.0


def flops_proxy(sizes: Sequence[int], L: Sequence[int] | int, d: int, retrieved: Optional[Sequence[bool]] = None,
                sketch_dim: int = 0) -> FlopCounts:
    """
    Multiply-accumulates of score + aggregation per head-step. A retrieving head-step scores every key (2Ld);
    a shared or query-independent head-step only touches its selection (2|S|d); a sketch adds L*d' scoring.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    lengths = np.broadcast_to(np.asarray(L, dtype=np.float64), sizes.shape)
    retrieved = np.zeros(sizes.shape, dtype=bool) if retrieved is None else np.asarray(retrieved, dtype=bool)
    dense = 2.0 * lengths * d
    sparse = np.where(retrieved, dense, 2.0 * sizes * d) + lengths * sketch_dim
    return FlopCounts(dense=float(dense.sum()), sparse=float(sparse.sum()))


@dataclass(eq=False)
class DecodeTrace:
    config: SimConfig
    steps: List[StepMetrics] = field(default_factory=list)
    prefill: List[PrefillMetrics] = field(default_factory=list)
    rho: List[float] = field(default_factory=list)
    k_max: float = 0.0
    q_max: float = 0.0
    q_mean: float = 0.0

    @property
    def rho_hat(self) -> float:
        return float(np.mean(self.rho)) if self.rho else 0.0

    @property
    def avg_tokens(self) -> float:
        """Processed KV per head-step in decode, sinks and local window included"""
        return float(np.mean([row.budget_used for row in self.steps])) if self.steps else 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(row, name) for row in self.steps], dtype=np.float64)

    def summary(self) -> Dict[str, object]:
        flops = FlopCounts(dense=float(self.column("flops_dense").sum()), sparse=float(self.column("flops_sparse").sum()))
        checks = {}
        for name in ("cis_holds", "mass_loss_holds", "psaw_holds"):
            values = [getattr(row, name) for row in self.steps if getattr(row, name) is not None]
            checks[name] = {"checked": len(values), "violations": sum(1 for v in values if not v)}
        etf = [row.etf_holds for row in self.prefill if row.etf_holds is not None]
        checks["etf_holds"] = {"checked": len(etf), "violations": sum(1 for v in etf if not v)}
        prefill_psaw = [row.psaw_holds for row in self.prefill if row.psaw_holds is not None]
        checks["prefill_psaw_holds"] = {"checked": len(prefill_psaw), "violations": sum(1 for v in prefill_psaw if not v)}
        return {
            "selector": self.config.selector.value,
            "steps": self.config.steps,
            "rows": len(self.steps),
            "rho_hat": self.rho_hat,
            "avg_tokens": self.avg_tokens,
            "mean_overlap": float(self.column("overlap").mean()),
            "mean_tau_pre": float(self.column("tau_pre").mean()),
            "mean_tau_star": float(self.column("tau_star").mean()),
            "mean_attn_l1": float(self.column("attn_l1").mean()),
            "mean_out_dev": float(self.column("out_dev").mean()),
            "flops_ratio": flops.ratio,
            "k_max": self.k_max,
            "q_max": self.q_max,
            "q_mean": self.q_mean,
            "checks": checks,
        }

    def violations(self) -> int:
        return sum(check["violations"] for check in self.summary()["checks"].values())


class DecodeSimulator:
    """
    Runs one selector over a synthetic stream: an optional prefill batch with PSAW/ETF checks,
    then decode steps prefill_len .. prefill_len + steps - 1, layer by layer, head by head.
    """

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.stream = DecodeStream(cfg.gen, cfg.head_cfg, capacity=cfg.prefill_len + cfg.steps - 1)
        self.trace = DecodeTrace(config=cfg)
        self.cis_states: Dict[tuple, CisState] = {}
        self.tdo_states: Dict[tuple, TdoState] = {}
        self.histories: Dict[tuple, List[np.ndarray]] = {}
        self._q_norms: List[float] = []

    @property
    def heads(self):
        for layer in range(self.cfg.head_cfg.n_layers):
            for head in range(self.cfg.head_cfg.H):
                yield layer, head

    def _psaw_check(self, probs: np.ndarray, layer: int, t: int) -> tuple:
        """(boundary, masked mass, bound or None)"""
        n_layers = self.cfg.head_cfg.n_layers
        boundary = psaw_boundary(layer + 1, t, n_layers, self.cfg.psaw)
        masked = float(probs[psaw_masked_set(boundary, t, self.cfg.budget.c_sink)].sum())
        bound = None
        gen = self.cfg.gen
        if gen.generator_kind == GeneratorKind.EXP_DECAY:
            kappa = per_layer(gen.decay_factor, layer)
            tau_sink = per_layer(gen.sink_mass, layer)
            bound = min(kappa, 1.0 - tau_sink) * gen.decay_ratio(layer) ** (t - boundary)
        return boundary, masked, bound

    def _prefill(self):
        n_layers = self.cfg.head_cfg.n_layers
        start = self.cfg.gen.update_start(n_layers)
        for t in range(1, self.cfg.prefill_len):
            for layer, head in self.heads:
                inst = self.stream.instance(t, layer, head)
                dist = attention_weights(inst)
                if self.cfg.selector == SelectorKind.TDO:
                    self.histories.setdefault((layer, head), []).append(dist.probs)
                row = PrefillMetrics(step=t, layer=layer, head=head)
                row.psaw_boundary, row.psaw_masked, row.psaw_bound = self._psaw_check(dist.probs, layer, t)
                if row.psaw_bound is not None:
                    row.psaw_holds = row.psaw_masked <= row.psaw_bound + 1e-9
                row.etf_boundary = etf_boundary(layer + 1, t, n_layers, self.cfg.etf)
                frozen = etf_frozen_set(row.etf_boundary, t, self.cfg.budget.c_sink)
                previous = self.stream.previous_layer_keys(t, layer, head)
                if previous is not None and frozen.size:
                    keys = inst.keys.copy()
                    keys[frozen] = previous[frozen]
                    reused = softmax(keys @ inst.query / np.sqrt(inst.d))
                    row.etf_tv = total_variation(dist.probs, reused)
                    if layer + 1 >= start:
                        q_norm = float(np.linalg.norm(inst.query))
                        row.etf_bound = q_norm / np.sqrt(inst.d) * self.stream.key_update_size(layer)
                        row.etf_holds = row.etf_tv <= row.etf_bound + 1e-9
                self.trace.prefill.append(row)
        log.info(f"Prefill simulated over {self.cfg.prefill_len} positions")

    def _select(self, inst, dist, layer: int, head: int, t: int) -> tuple:
        """returns: (selection, eta or None)"""
        cfg = self.cfg
        kind = cfg.selector
        if kind == SelectorKind.ORACLE:
            return topk_oracle(dist, cfg.budget, t), None
        if kind == SelectorKind.FULL:
            return SelectionResult(selected=np.arange(t), retrievals_performed=0), None
        if kind == SelectorKind.PSAW:
            boundary = psaw_boundary(layer + 1, t, cfg.head_cfg.n_layers, cfg.psaw)
            return SelectionResult(selected=psaw_visible_set(boundary, t, cfg.budget.c_sink), retrievals_performed=0), None
        if kind in (SelectorKind.CIS, SelectorKind.CPE):
            state = self.cis_states.setdefault((layer, head), CisState())
            probe = self.stream.probe(t, layer, head, cfg.cis.similarity_source)
            result = cis_select(state, dist, probe, t, cfg.cis)
            if kind == SelectorKind.CPE:
                boundary = psaw_boundary(layer + 1, t, cfg.head_cfg.n_layers, cfg.psaw)
                result = compose_cpe(result, psaw_visible_set(boundary, t, cfg.budget.c_sink), None, cfg.budget, t)
            return result, None
        if kind == SelectorKind.TDO:
            state = self.tdo_states.setdefault((layer, head), TdoState())
            return tdo_select(state, self.histories.setdefault((layer, head), []), cfg.budget, t), None
        if kind == SelectorKind.QAA:
            return qaa_select(inst, cfg.qaa, cfg.budget, t, layer, head)
        raise SimulationError("select", f"unknown selector `{kind}`")

    def _source_vector(self, layer: int, head: int, step: int) -> Optional[np.ndarray]:
        for source in self.cis_states[(layer, head)].sources:
            if source.step == step:
                return source.vector
        return None

    def _decode_row(self, t: int, layer: int, head: int) -> StepMetrics:
        cfg = self.cfg
        inst = self.stream.instance(t, layer, head)
        dist = attention_weights(inst)
        dense_out = attention_output(inst, dist)
        oracle = topk_oracle(dist, cfg.budget, t)
        result, eta = self._select(inst, dist, layer, head, t)
        trunc, out = sparse_attention(inst, result.selected, dist)
        mass = MassAccount.of(dist, trunc.selected, oracle.selected)
        k_max = float(np.linalg.norm(inst.keys, axis=1).max())
        self.trace.k_max = max(self.trace.k_max, k_max)
        self._q_norms.append(float(np.linalg.norm(inst.query)))

        d = inst.d
        retrieved = result.retrievals_performed > 0 and cfg.selector != SelectorKind.QAA
        flops = flops_proxy([result.budget_used], t, d, [retrieved], cfg.qaa.sketch_dim if cfg.selector == SelectorKind.QAA else 0)
        row = StepMetrics(
            step=t, layer=layer, head=head, selector=cfg.selector.value,
            retrieved=result.retrievals_performed, was_shared=result.was_shared, anchor_step=result.anchor_step,
            fallback=result.fallback, budget_used=result.budget_used,
            tau_pre=mass.retained, tau_star=mass.oracle_retained, beta_gap=mass.beta_gap,
            overlap=np.intersect1d(result.selected, oracle.selected).size / oracle.budget_used,
            attn_l1=l1_distance(dist.probs, trunc.renorm_probs), renorm_tv=mass.dropped,
            out_dev=float(np.mean(np.abs(out - dense_out))),
            flops_sparse=flops.sparse, flops_dense=flops.dense, eta=eta,
        )
        if result.was_shared and cfg.selector == SelectorKind.CIS and cfg.cis.similarity_source == SimilaritySource.QUERY:
            source = self._source_vector(layer, head, result.anchor_step)
            row.similarity = cosine_similarity(inst.query, source)
            gap = np.sqrt(max(0.0, 2.0 - 2.0 * cfg.cis.sim_threshold))
            row.delta_att_bound = 2.0 * k_max / np.sqrt(d) * gap
            row.cis_holds = row.tau_pre >= row.tau_star - 2.0 * row.delta_att_bound - TOLERANCE
        if result.surrogate is not None:
            row.eps_d = total_variation(dist.probs, result.surrogate)
            row.mass_loss_holds = row.tau_pre >= row.tau_star - 2.0 * row.eps_d - TOLERANCE
        if cfg.uses_psaw or cfg.gen.generator_kind == GeneratorKind.EXP_DECAY:
            row.psaw_boundary, row.psaw_masked, row.psaw_bound = self._psaw_check(dist.probs, layer, t)
            if row.psaw_bound is not None:
                row.psaw_holds = row.psaw_masked <= row.psaw_bound + 1e-9
        if cfg.selector == SelectorKind.TDO:
            self.histories[(layer, head)].append(dist.probs)
        return row

    def run(self) -> DecodeTrace:
        cfg = self.cfg
        if cfg.simulate_prefill:
            self._prefill()
        n_heads = cfg.head_cfg.H * cfg.head_cfg.n_layers
        for t in range(cfg.prefill_len, cfg.prefill_len + cfg.steps):
            rows = [self._decode_row(t, layer, head) for layer, head in self.heads]
            rho_t = sum(row.retrieved for row in rows) / n_heads
            for row in rows:
                row.rho_t = rho_t
            self.trace.rho.append(rho_t)
            self.trace.steps.extend(rows)
            log.debug(f"Step {t}: rho_t={rho_t:.4f}")
        self.trace.q_max = max(self._q_norms)
        self.trace.q_mean = float(np.mean(self._q_norms))
        log.info(f"Decoded {cfg.steps} steps with `{cfg.selector.value}`: rho_hat={self.trace.rho_hat:.4f}, "
                 f"avg_tokens={self.trace.avg_tokens:.1f}")
        return self.trace


def run_decode(cfg: SimConfig) -> DecodeTrace:
    return DecodeSimulator(cfg).run()


def _stats(values: np.ndarray) -> Dict[str, float]:
    return {
        "mean": float(values.mean()),
        "p50": float(np.percentile(values, 50)),
        "p90": float(np.percentile(values, 90)),
        "p99": float(np.percentile(values, 99)),
        "max": float(values.max()),
    }


def perturbation_report(traces: Mapping[str, DecodeTrace] | DecodeTrace) -> Dict[str, Dict[str, object]]:
    """Per-selector distribution of attention and output perturbation"""
    if isinstance(traces, DecodeTrace):
        traces = {traces.config.selector.value: traces}
    report = {}
    for name, trace in traces.items():
        if not trace.steps:
            raise SimulationError("perturbation_report", f"trace `{name}` has no steps")
        report[name] = {
            "attn_l1": _stats(trace.column("attn_l1")),
            "out_dev": _stats(trace.column("out_dev")),
            "mean_overlap": float(trace.column("overlap").mean()),
        }
    return report


def metrics_row(row: StepMetrics | PrefillMetrics) -> Dict[str, object]:
    return asdict(row)


COMPARED_SELECTORS = (SelectorKind.ORACLE, SelectorKind.CIS, SelectorKind.CPE, SelectorKind.TDO, SelectorKind.QAA)


def compare_selectors(cfg: SimConfig, selectors: Sequence[SelectorKind | str] = COMPARED_SELECTORS) -> Dict[str, DecodeTrace]:
    """
    Runs every selector on the stream of `cfg`; only the selector changes between runs.
    """
    if not selectors:
        raise SimulationError("compare", "no selectors to compare")
    traces = {}
    for kind in selectors:
        kind = SelectorKind(kind)
        if kind.value in traces:
            raise SimulationError("compare", f"selector `{kind.value}` listed twice")
        traces[kind.value] = run_decode(replace(cfg, selector=kind))
    return traces


def comparison_report(traces: Mapping[str, DecodeTrace]) -> Dict[str, Dict[str, object]]:
    """perturbation_report of every trace, with retrieval ratio, token count and retained mass next to it"""
    report = perturbation_report(traces)
    for name, trace in traces.items():
        report[name].update({
            "rho_hat": trace.rho_hat,
            "avg_tokens": trace.avg_tokens,
            "mean_tau_pre": float(trace.column("tau_pre").mean()),
            "violations": trace.violations(),
        })
    return report
