"""
Property suites behind `prehoc-lab verify`. Every suite is a generator of per-trial records;
a record with ok == False is a counterexample.
"""
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from ..attncore import (AttentionDist, AttentionInstance, GeneratorKind, HeadConfig, SynthGenConfig, attention_weights,
                        centroid, counter_rng, l1_distance, normalize, softmax, total_variation, truncate)
from ..decodesim import SelectorKind, SimConfig, run_decode
from ..infobounds import (CertificateInput, centroid_drift_bound, domain_limit, etf_certificate, exact_mi_channel,
                          kl_truncation, kl_variant, mass_loss_check, mi_loss_bound, oracle_mass, oracle_sets,
                          psaw_certificate, random_channel, top_n, tune_schedules)
from ..selection import BudgetSpec, CisConfig, PsawConfig, QaaConfig, topk_oracle

# first counter coordinate of every suite stream, kept apart from the generator streams
SUITE_STREAM = 100

TV_TOLERANCE = 1e-12
KL_TOLERANCE = 1e-10
MI_SLACK = 1e-9
BOUND_SLACK = 1e-9


@dataclass
class SuiteContext:
    seed: int
    trials: int
    stream: int
    max_len: Optional[int] = None
    max_budget: Optional[int] = None
    channels: Optional[int] = None

    def rng(self, trial: int) -> np.random.Generator:
        return counter_rng(self.seed, SUITE_STREAM, self.stream, trial)

    def run_seed(self, trial: int) -> int:
        return int(self.rng(trial).integers(0, 2 ** 63))


@dataclass
class Suite:
    name: str
    stream: int
    trials: int
    run: Callable[[SuiteContext], Iterator[dict]]
    help: str


@dataclass
class SuiteResult:
    name: str
    seed: int
    trials: int
    records: List[dict] = field(default_factory=list)
    failures: int = 0
    counterexample: Optional[dict] = None

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def summary(self) -> Dict[str, object]:
        return {
            "suite": self.name,
            "seed": self.seed,
            "trials": self.trials,
            "records": len(self.records),
            "failures": self.failures,
            "passed": self.passed,
            "counterexample": self.counterexample,
        }


SUITES: Dict[str, Suite] = {}


def suite(name: str, stream: int, trials: int, help: str):
    def register(fn):
        SUITES[name] = Suite(name=name, stream=stream, trials=trials, run=fn, help=help)
        return fn
    return register


def _random_dist(rng: np.random.Generator, L: int, scale: float = 3.0) -> AttentionDist:
    logits = rng.standard_normal(L) * scale
    return AttentionDist(probs=softmax(logits), logits=logits)


def _random_subset(rng: np.random.Generator, L: int) -> np.ndarray:
    selected = np.flatnonzero(rng.random(L) < 0.5)
    return selected if selected.size else np.array([rng.integers(0, L)])


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    return normalize(rng.standard_normal(d))


@suite("tv-identity", 1, 1000, "1/2 ||A - A_S||_1 equals the dropped mass")
def tv_identity(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        L = int(rng.integers(1, (ctx.max_len or 64) + 1))
        dist = _random_dist(rng, L)
        trunc = truncate(dist, _random_subset(rng, L))
        tv = total_variation(dist.probs, trunc.renorm_probs)
        yield {"trial": trial, "length": L, "size": int(trunc.selected.size), "tv": tv, "delta": trunc.dropped,
               "ok": abs(tv - trunc.dropped) <= TV_TOLERANCE}


@suite("mi-channel", 2, 200, "|I_full - I_S| <= g(delta_sup) on enumerated channels")
def mi_channel(ctx: SuiteContext) -> Iterator[dict]:
    negative = kl_failures = 0
    for trial in range(ctx.channels or ctx.trials):
        rng = ctx.rng(trial)
        L = int(rng.integers(2, 9))
        ch = random_channel(rng, int(rng.integers(2, 9)), L, int(rng.integers(2, 5)))
        n = int(rng.integers(1, L + 1))
        # odd trials use the per-context oracle, even trials one random set shared by all contexts
        selected = oracle_sets(ch, n) if trial % 2 else np.sort(rng.choice(L, size=n, replace=False))
        full = exact_mi_channel(ch)
        part = exact_mi_channel(ch, selected)
        g = mi_loss_bound(part.delta_sup, L)
        gap = full.mutual_info - part.mutual_info
        negative += gap < 0
        kl_form = -math.log(1.0 - part.delta_sup) if part.delta_sup < 1.0 else math.inf
        kl_failures += gap > kl_form + MI_SLACK
        yield {"trial": trial, "contexts": ch.n_contexts, "length": L, "alphabet": ch.alphabet,
               "oracle": bool(trial % 2), "I_full": full.mutual_info, "I_S": part.mutual_info,
               "delta_sup": part.delta_sup, "g": g, "gap": gap, "kl_form_holds": bool(gap <= kl_form + MI_SLACK),
               "ok": abs(gap) <= g + MI_SLACK}
    log.info(f"mi-channel: {negative} channels gained information under truncation, "
             f"{kl_failures} lost more than ln(1/(1 - delta_sup))")


@suite("kl-identity", 3, 1000, "D_KL(A_S || A) equals ln(1/tau)")
def kl_identity(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        L = int(rng.integers(1, (ctx.max_len or 64) + 1))
        dist = _random_dist(rng, L)
        selected = _random_subset(rng, L)
        kl = kl_truncation(dist, selected)
        tau = truncate(dist, selected).retained
        yield {"trial": trial, "length": L, "tau": tau, "kl": kl, "ln_inv_tau": kl_variant(tau),
               "ok": abs(kl - kl_variant(tau)) <= KL_TOLERANCE}


@suite("softmax-lipschitz", 4, 10000, "||softmax(a') - softmax(a)||_1 <= 2 ||a' - a||_inf")
def softmax_lipschitz(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        L = int(rng.integers(1, (ctx.max_len or 64) + 1))
        a = rng.standard_normal(L) * rng.uniform(0.1, 10.0)
        delta = rng.standard_normal(L) * 10.0 ** rng.uniform(-3.0, 0.5)
        diff = l1_distance(softmax(a), softmax(a + delta))
        bound = 2.0 * float(np.abs(delta).max())
        yield {"trial": trial, "length": L, "l1": diff, "bound": bound, "ok": diff <= bound + TV_TOLERANCE}


@suite("oracle-optimal", 5, 100, "top-k retained mass equals the best subset found by enumeration")
def oracle_optimal(ctx: SuiteContext) -> Iterator[dict]:
    max_len = ctx.max_len or 12
    max_budget = ctx.max_budget or 6
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        L = trial % max_len + 1
        dist = AttentionDist(probs=rng.dirichlet(np.full(L, rng.uniform(0.2, 2.0))), logits=np.zeros(L))
        for n in range(1, min(L, max_budget) + 1):
            chosen = topk_oracle(dist, BudgetSpec(k_mid=n), L).selected
            tau = math.fsum(dist.probs[chosen])
            best = max(math.fsum(dist.probs[list(c)]) for c in itertools.combinations(range(L), n))
            yield {"trial": trial, "length": L, "budget": n, "tau_star": tau, "best": best,
                   "oracle_mass": oracle_mass(dist.probs, n), "ok": tau == best}


@suite("mass-loss", 6, 10000, "tau(S_D) >= tau* - 2 eps_D for random surrogates and TDO/QAA runs")
def mass_loss(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        L = int(rng.integers(1, (ctx.max_len or 64) + 1))
        logits = rng.standard_normal(L) * 2.0
        surrogate = softmax(logits + rng.standard_normal(L) * rng.uniform(0.0, 3.0))
        n = int(rng.integers(1, L + 1))
        check = mass_loss_check(softmax(logits), surrogate, n)
        yield {"trial": trial, "length": L, "budget": n, "tau_star": check.tau_star, "tau_sd": check.tau_sd,
               "eps_d": check.eps_d, "ok": check.holds}
    for selector in (SelectorKind.TDO, SelectorKind.QAA):
        seed = ctx.run_seed(ctx.trials + (selector == SelectorKind.QAA))
        trace = run_decode(SimConfig(gen=SynthGenConfig(seed=seed), head_cfg=HeadConfig(d=8, H=2, n_layers=2),
                                     selector=selector, budget=BudgetSpec(c_sink=2, c_local=4, k_mid=6),
                                     qaa=QaaConfig(sketch_dim=4, seed=seed), steps=32, prefill_len=32))
        checked = [row for row in trace.steps if row.mass_loss_holds is not None]
        violations = sum(1 for row in checked if not row.mass_loss_holds)
        yield {"trial": f"run-{selector.value}", "seed": seed, "checked": len(checked), "violations": violations,
               "ok": bool(checked) and violations == 0}


@suite("centroid-drift", 7, 10000, "|c(q') - c(q)| <= 2 diam(P) K_max ||q' - q|| / sqrt(d)")
def centroid_drift(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        d = int(rng.integers(1, 17))
        L = int(rng.integers(1, (ctx.max_len or 32) + 1))
        keys = rng.standard_normal((L, d)) * rng.uniform(0.5, 4.0)
        positions = np.sort(rng.choice(200, size=L, replace=False)).astype(np.float64)
        q = _unit(rng, d)
        delta = _unit(rng, d) * rng.uniform(0.0, 0.5)
        c = centroid(attention_weights(AttentionInstance(query=q, keys=keys, values=keys)), positions)
        c_moved = centroid(attention_weights(AttentionInstance(query=q + delta, keys=keys, values=keys)), positions)
        bound = centroid_drift_bound(float(np.linalg.norm(delta)), float(np.ptp(positions)),
                                     float(np.linalg.norm(keys, axis=1).max()), d)
        yield {"trial": trial, "d": d, "length": L, "drift": abs(c_moved - c), "bound": bound,
               "ok": abs(c_moved - c) <= bound + BOUND_SLACK}


@suite("cis-guarantee", 8, 20, "shared CIS steps keep tau_pre >= tau* - 2 delta_att")
def cis_guarantee(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        seed = ctx.run_seed(trial)
        cfg = SimConfig(gen=SynthGenConfig(seed=seed, walk_rate=0.02), head_cfg=HeadConfig(d=16, H=2, n_layers=2),
                        selector=SelectorKind.CIS, budget=BudgetSpec(c_sink=4, c_local=8, k_mid=24),
                        cis=CisConfig(block_size=8, sim_threshold=0.8), steps=256, prefill_len=64,
                        simulate_prefill=False)
        trace = run_decode(cfg)
        shared = [row for row in trace.steps if row.cis_holds is not None]
        violations = [row for row in shared if not row.cis_holds]
        slack = min((row.tau_pre - row.tau_star + 2.0 * row.delta_att_bound for row in shared), default=None)
        yield {"trial": trial, "seed": seed, "rho_hat": trace.rho_hat, "shared": len(shared),
               "violations": len(violations), "min_slack": slack,
               "min_similarity": min((row.similarity for row in shared), default=None),
               "first_violation": None if not violations else {"step": violations[0].step, "layer": violations[0].layer,
                                                               "head": violations[0].head},
               "ok": not violations}


def _decay_config(rng: np.random.Generator, seed: int, n_layers: int, sink_tokens: int) -> SynthGenConfig:
    lam = tuple(float(v) for v in rng.uniform(0.02, 0.3, n_layers))
    tau = tuple(float(v) for v in rng.uniform(0.0, 0.3, n_layers))
    kappa = tuple(float(rng.uniform(0.3, 1.0 - s)) for s in tau)
    return SynthGenConfig(seed=seed, generator_kind=GeneratorKind.EXP_DECAY, decay_rate=lam, sink_mass=tau,
                          decay_factor=kappa, sink_tokens=sink_tokens)


@suite("psaw-bound", 9, 5, "PSAW masked mass <= kappa exp(-lambda D) on exp-decay streams")
def psaw_bound(ctx: SuiteContext) -> Iterator[dict]:
    n_layers = 4
    psaw = PsawConfig()
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        gen = _decay_config(rng, ctx.run_seed(trial), n_layers, sink_tokens=4)
        trace = run_decode(SimConfig(gen=gen, head_cfg=HeadConfig(d=4, H=1, n_layers=n_layers),
                                     selector=SelectorKind.PSAW, budget=BudgetSpec(c_sink=4, c_local=8, k_mid=8),
                                     psaw=psaw, steps=64, prefill_len=64))
        rows = [row for row in trace.prefill + trace.steps if row.psaw_holds is not None]
        violations = sum(1 for row in rows if not row.psaw_holds)
        # top layer against the looser floor(phi^alpha t) distance
        top = [row for row in rows if row.layer == n_layers - 1]
        top_violations = 0
        for row in top:
            inp = CertificateInput(lam=-math.log(gen.decay_ratio(row.layer)), kappa=gen.decay_factor[row.layer],
                                   tau_sink=gen.sink_mass[row.layer])
            floor_bound = psaw_certificate(inp, row.step, psaw.top_fraction).floor_bound
            top_violations += row.psaw_masked > floor_bound + BOUND_SLACK
        yield {"trial": trial, "checked": len(rows), "violations": violations, "top_layer_checked": len(top),
               "top_layer_violations": top_violations,
               "ok": bool(rows) and violations == 0 and top_violations == 0}


@suite("etf-bound", 10, 5, "ETF reuse keeps 1/2 ||A_reused - A||_1 <= |q|/sqrt(d) B exp(-mu (l - l_s))")
def etf_bound(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        gen = SynthGenConfig(seed=ctx.run_seed(trial), key_update_bound=float(rng.uniform(0.05, 1.0)),
                             key_update_rate=float(rng.uniform(0.2, 1.5)))
        trace = run_decode(SimConfig(gen=gen, head_cfg=HeadConfig(d=16, H=2, n_layers=6), selector=SelectorKind.CPE,
                                     budget=BudgetSpec(c_sink=4, c_local=8, k_mid=16), steps=1, prefill_len=96))
        rows = [row for row in trace.prefill if row.etf_holds is not None]
        violations = sum(1 for row in rows if not row.etf_holds)
        yield {"trial": trial, "B": gen.key_update_bound, "mu": gen.key_update_rate, "checked": len(rows),
               "violations": violations, "max_tv": max((row.etf_tv for row in rows), default=0.0),
               "ok": bool(rows) and violations == 0}


@suite("dominance-chain", 11, 1000, "g(delta*) <= g(delta* + beta_th) <= g(delta* + 2 eps_D)")
def dominance_chain(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        L = int(rng.integers(2, 4097))
        limit = domain_limit(L)
        delta_star = rng.uniform(0.0, 0.9) * limit
        eps_d = rng.uniform(0.0, 0.5) * (limit - delta_star)
        beta_th = rng.uniform(0.0, 1.0) * 2.0 * eps_d
        chain = [mi_loss_bound(x, L) for x in (delta_star, delta_star + beta_th, delta_star + 2.0 * eps_d)]
        yield {"trial": trial, "length": L, "delta_star": delta_star, "beta_th": beta_th, "eps_d": eps_d,
               "g_oracle": chain[0], "g_prehoc": chain[1], "g_posthoc": chain[2],
               "ok": chain[0] <= chain[1] + TV_TOLERANCE and chain[1] <= chain[2] + TV_TOLERANCE}


def _perturbed_pair(rng: np.random.Generator, max_len: int) -> tuple:
    d = int(rng.integers(2, 17))
    L = int(rng.integers(2, max_len + 1))
    keys = rng.standard_normal((L, d)) * 2.0
    q = _unit(rng, d)
    moved = q + _unit(rng, d) * rng.uniform(0.0, 0.5)
    a = attention_weights(AttentionInstance(query=q, keys=keys, values=keys)).probs
    b = attention_weights(AttentionInstance(query=moved, keys=keys, values=keys)).probs
    return a, b, int(rng.integers(1, L + 1))


@suite("oracle-continuity", 12, 1000, "|tau*(q') - tau*(q)| <= TV(A(q), A(q'))")
def oracle_continuity(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        a, b, n = _perturbed_pair(ctx.rng(trial), ctx.max_len or 64)
        change = abs(oracle_mass(b, n) - oracle_mass(a, n))
        tv = total_variation(a, b)
        yield {"trial": trial, "length": a.size, "budget": n, "change": change, "tv": tv,
               "ok": change <= tv + TV_TOLERANCE}


@suite("reuse-bound", 13, 1000, "a set chosen for q keeps tau_S(q') >= tau_S(q) - TV")
def reuse_bound(ctx: SuiteContext) -> Iterator[dict]:
    for trial in range(ctx.trials):
        a, b, n = _perturbed_pair(ctx.rng(trial), ctx.max_len or 64)
        kept = top_n(a, n)
        tv = total_variation(a, b)
        yield {"trial": trial, "length": a.size, "budget": n, "tau_anchor": float(a[kept].sum()),
               "tau_reused": float(b[kept].sum()), "tv": tv, "ok": b[kept].sum() >= a[kept].sum() - tv - TV_TOLERANCE}


def _within(bound: float, target: float) -> bool:
    return bound <= target * (1.0 + BOUND_SLACK) + 1e-15


@suite("tuning", 14, 200, "tuned schedules meet the requested PSAW/ETF targets")
def tuning(ctx: SuiteContext) -> Iterator[dict]:
    reference = tune_schedules(CertificateInput(lam=0.01, beta_psaw_target=0.01), t=1000, n_layers=32, d=128)
    yield {"trial": "reference", "min_phi_alpha": reference.min_phi_alpha,
           "ok": abs(reference.min_phi_alpha - math.log(100.0) / 10.0) <= 1e-12}
    for trial in range(ctx.trials):
        rng = ctx.rng(trial)
        tau = float(rng.uniform(0.0, 0.5))
        inp = CertificateInput(lam=float(rng.uniform(0.005, 0.5)), tau_sink=tau, kappa=float(rng.uniform(0.1, 1.0 - tau)),
                               q_max=float(rng.uniform(0.5, 4.0)), b_const=float(rng.uniform(0.01, 2.0)),
                               mu=float(rng.uniform(0.1, 2.0)), beta_psaw_target=float(10 ** rng.uniform(-4, -0.3)),
                               beta_etf_target=float(10 ** rng.uniform(-4, -0.3)))
        t = int(rng.integers(16, 4097))
        d = int(rng.choice([16, 64, 128]))
        tuned = tune_schedules(inp, t=t, n_layers=32, d=d)
        record = {"trial": trial, "t": t, "d": d, "min_phi_alpha": tuned.min_phi_alpha,
                  "min_depth_gap": tuned.min_depth_gap, "psaw_feasible": tuned.psaw_feasible,
                  "etf_feasible": tuned.etf_feasible, "psaw_bound": None}
        ok = True
        if tuned.psaw_feasible:
            record["psaw_bound"] = psaw_certificate(inp, t, tuned.min_phi_alpha).top_layer_bound
            ok = _within(record["psaw_bound"], inp.beta_psaw_target)
        record["etf_bound"] = etf_certificate(inp, d, depth_gap=tuned.min_depth_gap).bound
        record["etf_layers_bound"] = etf_certificate(inp, d, depth_gap=tuned.min_depth_layers).bound
        record["ok"] = (ok and _within(record["etf_bound"], inp.beta_etf_target)
                        and _within(record["etf_layers_bound"], inp.beta_etf_target))
        yield record


@suite("retrieval-ratio", 15, 1, "always-share CIS with s = 8 retrieves once per block")
def retrieval_ratio(ctx: SuiteContext) -> Iterator[dict]:
    steps = 128
    for trial in range(ctx.trials):
        seed = ctx.run_seed(trial)
        for threshold, asserted in ((-1.0, True), (0.8, False)):
            cfg = SimConfig(gen=SynthGenConfig(seed=seed, walk_rate=0.02), head_cfg=HeadConfig(d=16, H=2, n_layers=2),
                            selector=SelectorKind.CIS, budget=BudgetSpec(c_sink=4, c_local=8, k_mid=24),
                            cis=CisConfig(block_size=8, sim_threshold=threshold), steps=steps, prefill_len=64,
                            simulate_prefill=False)
            rho_hat = run_decode(cfg).rho_hat
            within = abs(rho_hat - 1.0 / 8.0) <= 1.0 / steps
            yield {"trial": trial, "seed": seed, "sim_threshold": threshold, "rho_hat": rho_hat, "asserted": asserted,
                   "within": within, "ok": within or not asserted}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def run_suite(name: str, seed: int = 0, trials: Optional[int] = None, **options) -> SuiteResult:
    entry = SUITES[name]
    ctx = SuiteContext(seed=seed, trials=trials if trials is not None else entry.trials, stream=entry.stream, **options)
    result = SuiteResult(name=name, seed=seed, trials=ctx.trials)
    log.info(f"Running suite {name} with seed {seed}, {ctx.trials} trials")
    for record in entry.run(ctx):
        record = _plain(record)
        result.records.append(record)
        if not record["ok"]:
            result.failures += 1
            if result.counterexample is None:
                result.counterexample = record
                log.debug(f"{name}: first counterexample {record}")
    if result.failures:
        log.error(f"Suite {name}: {result.failures} of {len(result.records)} records failed")
    return result
