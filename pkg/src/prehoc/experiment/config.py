from dataclasses import dataclass, field
import json
import re
import tomllib
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple
from logging import getLogger
log = getLogger(__name__)

from ..attncore import AttentionError, HeadConfig, SynthGenConfig
from ..decodesim import SimConfig, SimulationError
from ..infobounds import BoundError, CertificateInput
from ..selection import BudgetSpec, CisConfig, EtfConfig, PsawConfig, QaaConfig, SelectionError

# validation failures of the config dataclasses, reported against the section
VALIDATION_ERRORS = (AttentionError, SelectionError, BoundError, SimulationError, ValueError, TypeError)


class ConfigError(Exception):
    def __init__(self, key: str, *args: object) -> None:
        super().__init__(*args)
        self.key = key


# -1 stands for "derived from other settings" where the field is optional
FIELDS: Dict[str, Tuple[object, str]] = {
    "generator.seed": (0, "64-bit seed every random stream is derived from"),
    "generator.kind": ("random-walk", "random-walk or exp-decay"),
    "generator.walk_rate": (0.1, "embedding walk step; 0 keeps every query identical"),
    "generator.weight_scale": (1.0, "scale applied to the Q/K/V projections"),
    "generator.decay_rate": (0.1, "recency decay rate lambda, scalar or one value per layer"),
    "generator.sink_mass": (0.0, "sink mass floor tau_sink, scalar or per layer"),
    "generator.decay_factor": (1.0, "recency amplitude kappa, scalar or per layer"),
    "generator.sink_tokens": (0, "sink positions of the decay channel"),
    "generator.key_update_bound": (0.2, "cross-layer key update size B"),
    "generator.key_update_rate": (0.5, "cross-layer key update decay mu"),
    "generator.key_update_start": (-1, "1-based layer where key updates start; -1 picks floor(3N/4)"),
    "head.d": (16, "per-head dimension"),
    "head.heads": (2, "heads per layer"),
    "head.layers": (4, "layer count N"),
    "selector.kind": ("cis", "oracle, full, cis, cpe, psaw, tdo or qaa"),
    "selector.c_sink": (4, "sink tokens kept"),
    "selector.c_local": (8, "local window kept"),
    "selector.k_mid": (24, "middle budget k"),
    "selector.block_size": (8, "CIS block size s"),
    "selector.sim_threshold": (0.8, "CIS similarity gate theta_sim; above 1 disables sharing"),
    "selector.similarity_source": ("query", "vector the CIS gate compares: query, key or hidden"),
    "selector.dilate_count": (-1, "CIS dilated indices m; -1 picks k/3"),
    "selector.dilate_radius": (1, "CIS dilation radius r"),
    "selector.psaw_start": (-1, "PSAW start layer; -1 picks floor(3N/4)"),
    "selector.phi": (0.7, "PSAW base phi"),
    "selector.alpha": (1.0, "PSAW exponent alpha"),
    "selector.etf_start": (-1, "ETF start layer; -1 picks floor(3N/4)"),
    "selector.psi": (0.5, "ETF base psi"),
    "selector.gamma": (1.0, "ETF exponent gamma"),
    "selector.sketch_dim": (4, "QAA sketch dimension d'"),
    "selector.sketch_identity": (False, "QAA uses the identity sketch (needs sketch_dim == d)"),
    "sim.steps": (64, "decode steps T"),
    "sim.prefill_len": (64, "prompt length before decoding"),
    "sim.simulate_prefill": (True, "run the prefill batch with PSAW/ETF checks"),
    "bounds.theta_sim": (0.8, "similarity threshold for the CIS certificate"),
    "bounds.k_max": (1.0, "largest key norm K_max"),
    "bounds.q_max": (1.0, "largest query norm Q_max"),
    "bounds.q_mean": (-1.0, "average query norm; -1 falls back to q_max"),
    "bounds.diam_p": (1.0, "diameter of the position set"),
    "bounds.lambda": (0.1, "recency decay rate of the top layer"),
    "bounds.kappa": (1.0, "recency amplitude"),
    "bounds.tau_sink": (0.0, "sink mass floor"),
    "bounds.window_dist": (0, "PSAW window distance D"),
    "bounds.u_frac": (0.7, "top-layer visible fraction phi^alpha"),
    "bounds.b_const": (0.2, "key update bound B"),
    "bounds.mu": (0.5, "key update decay mu"),
    "bounds.depth_gap": (0, "layers above the ETF start layer"),
    "bounds.beta_psaw_target": (0.01, "target PSAW mass error"),
    "bounds.beta_etf_target": (0.01, "target ETF mass error"),
    "bounds.dilate_radius": (1, "CIS dilation radius r"),
    "bounds.t": (1000, "sequence length the certificates are evaluated at"),
    "bounds.delta_star": (0.0, "oracle dropped mass for the implied MI bound"),
    "output.out_dir": ("out", "directory reports are written to"),
    "output.format": ("csv", "trace format: csv or json"),
    "output.run_id": ("run", "run identifier, prefixes file names and fills the run_id column"),
}

PER_LAYER_KEYS = {"generator.decay_rate", "generator.sink_mass", "generator.decay_factor"}

override_pattern = re.compile(r"(?P<key>[a-z_]+(\.[a-z_]+)+)=(?P<value>.*)$")


def flatten(mapping: Mapping, prefix: str = "") -> Dict[str, object]:
    flat = {}
    for key, value in mapping.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def coerce(key: str, value: object) -> object:
    if key not in FIELDS:
        raise ConfigError(key, f"unknown configuration key `{key}`")
    default = FIELDS[key][0]
    if key in PER_LAYER_KEYS and isinstance(value, (list, tuple)):
        if not value or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, "per-layer values must be a non-empty list of numbers")
        return [float(v) for v in value]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def toml_literal(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(toml_literal(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    return json.dumps(value)


def _optional(value: int | float) -> Optional[int | float]:
    return None if value < 0 else value


def _per_layer(value) -> float | Tuple[float, ...]:
    return tuple(value) if isinstance(value, list) else value


@dataclass
class ExperimentConfig:
    values: Dict[str, object] = field(default_factory=lambda: {key: default for key, (default, _) in FIELDS.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        try:
            document = tomllib.loads(text)
        except tomllib.TOMLDecodeError as ex:
            raise ConfigError(source, f"cannot parse configuration: {ex}") from ex
        config = cls()
        for key, value in flatten(document).items():
            config.values[key] = coerce(key, value)
        return config

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as ex:
            raise ConfigError(str(path), f"cannot read configuration file {path}: {ex.strerror}") from ex
        log.info(f"Loaded configuration from {path}")
        return cls.parse(text, str(path))

    def serialize(self) -> str:
        return "".join(f"{key} = {toml_literal(self.values[key])}\n" for key in FIELDS)

    def override(self, assignments: Iterable[str]) -> "ExperimentConfig":
        for assignment in assignments:
            m = override_pattern.match(assignment.strip())
            if not m:
                raise ConfigError(assignment, f"override `{assignment}` is not of the form section.key=value")
            key, raw = m.group("key"), m.group("value")
            try:
                value = tomllib.loads(f"v = {raw}")["v"]
            except tomllib.TOMLDecodeError:
                value = raw
            self.values[key] = coerce(key, value)
            log.debug(f"Override {key} = {self.values[key]!r}")
        return self

    def __getitem__(self, key: str) -> object:
        if key not in FIELDS:
            raise ConfigError(key, f"unknown configuration key `{key}`")
        return self.values[key]

    def build(self, what: str, factory, **kwargs):
        """Constructs a config object, reporting its validation errors against the section"""
        try:
            return factory(**kwargs)
        except VALIDATION_ERRORS as ex:
            raise ConfigError(what, str(ex)) from ex

    def gen_config(self) -> SynthGenConfig:
        v = self.values
        return self.build("generator", SynthGenConfig,
                          seed=v["generator.seed"], walk_rate=v["generator.walk_rate"],
                          weight_scale=v["generator.weight_scale"], generator_kind=v["generator.kind"],
                          decay_rate=_per_layer(v["generator.decay_rate"]), sink_mass=_per_layer(v["generator.sink_mass"]),
                          decay_factor=_per_layer(v["generator.decay_factor"]),
                          key_update_bound=v["generator.key_update_bound"], key_update_rate=v["generator.key_update_rate"],
                          key_update_start=_optional(v["generator.key_update_start"]),
                          sink_tokens=v["generator.sink_tokens"])

    def head_config(self) -> HeadConfig:
        v = self.values
        return self.build("head", HeadConfig, d=v["head.d"], H=v["head.heads"], n_layers=v["head.layers"])

    def budget(self) -> BudgetSpec:
        v = self.values
        return self.build("selector", BudgetSpec, c_sink=v["selector.c_sink"], c_local=v["selector.c_local"],
                          k_mid=v["selector.k_mid"])

    def psaw_config(self) -> PsawConfig:
        v = self.values
        return self.build("selector", PsawConfig, start_layer=_optional(v["selector.psaw_start"]),
                          phi=v["selector.phi"], alpha=v["selector.alpha"])

    def etf_config(self) -> EtfConfig:
        v = self.values
        return self.build("selector", EtfConfig, start_layer=_optional(v["selector.etf_start"]),
                          psi=v["selector.psi"], gamma=v["selector.gamma"])

    def sim_config(self) -> SimConfig:
        v = self.values
        budget = self.budget()
        cis = self.build("selector", CisConfig, block_size=v["selector.block_size"],
                         sim_threshold=v["selector.sim_threshold"], dilate_count=_optional(v["selector.dilate_count"]),
                         dilate_radius=v["selector.dilate_radius"], budget=budget,
                         similarity_source=v["selector.similarity_source"])
        qaa = self.build("selector", QaaConfig, sketch_dim=v["selector.sketch_dim"], seed=v["generator.seed"],
                         identity=v["selector.sketch_identity"])
        return self.build("sim", SimConfig, gen=self.gen_config(), head_cfg=self.head_config(),
                          selector=v["selector.kind"], budget=budget, cis=cis, psaw=self.psaw_config(),
                          etf=self.etf_config(), qaa=qaa, steps=v["sim.steps"], prefill_len=v["sim.prefill_len"],
                          simulate_prefill=v["sim.simulate_prefill"])

    def certificate_input(self) -> CertificateInput:
        v = self.values
        return self.build("bounds", CertificateInput,
                          theta_sim=v["bounds.theta_sim"], k_max=v["bounds.k_max"], q_max=v["bounds.q_max"],
                          q_mean=_optional(v["bounds.q_mean"]), diam_p=v["bounds.diam_p"], lam=v["bounds.lambda"],
                          kappa=v["bounds.kappa"], tau_sink=v["bounds.tau_sink"], window_dist=v["bounds.window_dist"],
                          u_frac=v["bounds.u_frac"], b_const=v["bounds.b_const"], mu=v["bounds.mu"],
                          depth_gap=v["bounds.depth_gap"], beta_psaw_target=v["bounds.beta_psaw_target"],
                          beta_etf_target=v["bounds.beta_etf_target"], dilate_radius=v["bounds.dilate_radius"],
                          t=v["bounds.t"], delta_star=v["bounds.delta_star"])


def describe_fields() -> str:
    return "\n".join(f"  {key} (default {toml_literal(default)}): {help}" for key, (default, help) in FIELDS.items())
