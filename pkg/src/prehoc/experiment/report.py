import csv
import json
from dataclasses import asdict, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Sequence
from logging import getLogger
log = getLogger(__name__)
import numpy as np

from ..decodesim import PrefillMetrics, StepMetrics

# Columns are append-only: new fields go at the end of their dataclass.
ROW_KEYS = {
    "run_id": "run identifier (output.run_id)",
    "seed": "generator seed of the run",
}

STEP_DOCS = {
    "step": "decode step t; the query at position t attends to [0, t)",
    "layer": "0-based layer index",
    "head": "0-based head index",
    "selector": "selector kind",
    "rho_t": "fraction of (layer, head) pairs that retrieved at this step",
    "retrieved": "1 if this head-step scored every key, else 0",
    "was_shared": "CIS reused an earlier set",
    "anchor_step": "step whose set was reused (empty if not shared)",
    "fallback": "CPE fell back to sinks + local window",
    "budget_used": "positions attended, sinks and local window included",
    "tau_pre": "attention mass retained by the selection",
    "tau_star": "mass retained by the structured top-k oracle",
    "beta_gap": "tau_star - tau_pre",
    "overlap": "|S ∩ S*| / |S*|",
    "attn_l1": "||A - renormalized truncation||_1 = 2 * dropped mass",
    "renorm_tv": "dropped mass 1 - tau_pre, the total-variation distance",
    "out_dev": "mean absolute deviation of sparse vs dense output",
    "flops_sparse": "multiply-accumulates of the sparse head-step",
    "flops_dense": "multiply-accumulates of dense attention, 2 L d",
    "similarity": "cosine similarity to the anchor query on shared CIS steps",
    "delta_att_bound": "2 K_max / sqrt(d) sqrt(2 - 2 theta_sim) on shared CIS steps",
    "cis_holds": "tau_pre >= tau_star - 2 delta_att_bound",
    "eps_d": "posterior bias TV(A, surrogate) for TDO/QAA",
    "eta": "QAA sketch logit error max |a_hat - a|",
    "mass_loss_holds": "tau_pre >= tau_star - 2 eps_d",
    "psaw_boundary": "PSAW earliest visible position P(t)",
    "psaw_masked": "attention mass in the PSAW masked range",
    "psaw_bound": "kappa exp(-lambda (t - P(t))) on exp-decay streams",
    "psaw_holds": "psaw_masked <= psaw_bound",
}

PREFILL_DOCS = {
    "step": "prefill position t",
    "layer": "0-based layer index",
    "head": "0-based head index",
    "psaw_boundary": "PSAW earliest visible position P(t)",
    "psaw_masked": "attention mass in the PSAW masked range",
    "psaw_bound": "kappa exp(-lambda (t - P(t))) on exp-decay streams",
    "psaw_holds": "psaw_masked <= psaw_bound",
    "etf_boundary": "ETF frozen prefix end E(t)",
    "etf_tv": "1/2 ||A with reused keys - A||_1",
    "etf_bound": "|q| / sqrt(d) B exp(-mu (l - l_s)) where key updates apply",
    "etf_holds": "etf_tv <= etf_bound",
}

SUMMARY_DOCS = {
    "selector": "selector kind",
    "steps": "decode steps T",
    "rows": "trace rows (steps x layers x heads)",
    "rho_hat": "mean retrieval ratio",
    "avg_tokens": "mean positions per head-step, sinks and local window included",
    "mean_overlap": "mean overlap with the oracle",
    "mean_tau_pre": "mean retained mass",
    "mean_tau_star": "mean oracle retained mass",
    "mean_attn_l1": "mean attention perturbation",
    "mean_out_dev": "mean output deviation",
    "flops_ratio": "sparse / dense multiply-accumulates",
    "k_max": "largest key norm seen",
    "q_max": "largest query norm seen",
    "q_mean": "mean query norm",
    "checks": "per inequality: rows checked and violations",
    "cis_workload": "C + 2 m r, tokens per retrieving head-step at most",
    "perturbation": "mean and percentiles of attn_l1 and out_dev",
    "certificates": "cis / psaw / etf certificates from the run's measured norms",
}


def _columns(docs: Dict[str, str], row_type) -> List[str]:
    names = [f.name for f in fields(row_type)]
    missing = set(names) - set(docs)
    assert not missing, f"undocumented columns {sorted(missing)}"
    return list(ROW_KEYS) + names


TRACE_COLUMNS = _columns(STEP_DOCS, StepMetrics)
PREFILL_COLUMNS = _columns(PREFILL_DOCS, PrefillMetrics)


def schema_text() -> str:
    lines = ["trace columns:"]
    lines += [f"  {name}: {ROW_KEYS.get(name) or STEP_DOCS[name]}" for name in TRACE_COLUMNS]
    lines += ["prefill columns:"]
    lines += [f"  {name}: {ROW_KEYS.get(name) or PREFILL_DOCS[name]}" for name in PREFILL_COLUMNS]
    lines += ["summary keys:"]
    lines += [f"  {name}: {doc}" for name, doc in SUMMARY_DOCS.items()]
    return "\n".join(lines)


def jsonable(value):
    if is_dataclass(value) and not isinstance(value, type):
        return asdict(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not serializable")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=jsonable)


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n", encoding="utf-8")
    log.info(f"Wrote {path}")


def report_rows(rows: Iterable, run_id: str, seed: int) -> List[dict]:
    return [{"run_id": run_id, "seed": seed, **asdict(row)} for row in rows]


def write_rows(path: Path, rows: Sequence[dict], columns: Sequence[str], fmt: str = "csv"):
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        write_json(path, [{name: row.get(name) for name in columns} for row in rows])
        return
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    log.info(f"Wrote {len(rows)} rows to {path}")
