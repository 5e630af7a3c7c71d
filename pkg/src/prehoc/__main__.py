from argparse import ArgumentParser, ArgumentTypeError, RawDescriptionHelpFormatter
from dataclasses import replace
import sys
from pathlib import Path
from logging import WARNING, getLogger, StreamHandler, Formatter, DEBUG
from .attncore import AttentionError, GeneratorKind, per_layer
from .selection import SelectionError
from .infobounds import (BoundError, bound_slope, cis_certificate, etf_certificate, expected_prehoc_bound,
                         joint_certificate, kl_variant, mi_loss_bound, posthoc_bound, prehoc_bound, psaw_certificate,
                         tune_schedules)
from .decodesim import (COMPARED_SELECTORS, SelectorKind, SimulationError, compare_selectors, comparison_report,
                        perturbation_report, run_decode)
from .experiment import (ConfigError, ExperimentConfig, SUITES, PREFILL_COLUMNS, TRACE_COLUMNS, describe_fields, dumps,
                         report_rows, run_suite, schema_text, write_json, write_rows)

log = getLogger()
handler = StreamHandler(sys.stderr)
handler.setLevel(WARNING)
handler.setFormatter(Formatter("%(asctime)s [%(levelname)s] %(message)s"))
log.setLevel(DEBUG)
log.addHandler(handler)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    config.override(args.set or [])
    if args.seed is not None:
        config.values["generator.seed"] = args.seed
    if args.out_dir is not None:
        config.values["output.out_dir"] = args.out_dir
    if args.format is not None:
        config.values["output.format"] = args.format
    if config["output.format"] not in ("csv", "json"):
        raise ConfigError("output.format", f"unknown format `{config['output.format']}`")
    return config


def cmd_verify(args) -> int:
    result = run_suite(args.suite, seed=args.seed or 0, trials=args.trials, max_len=args.max_len,
                       max_budget=args.max_budget, channels=args.channels)
    if args.out_dir is not None:
        fmt = args.format or "json"
        columns = list(dict.fromkeys(key for record in result.records for key in record))
        write_rows(Path(args.out_dir) / f"{args.suite}.{fmt}", result.records, columns, fmt)
    print(dumps(result.summary()))
    return EXIT_OK if result.passed else EXIT_FAILED


def run_certificates(config: ExperimentConfig, trace) -> dict:
    """Certificates for a finished run, evaluated at its last step with the measured norms"""
    sim = trace.config
    n_layers, d = sim.head_cfg.n_layers, sim.head_cfg.d
    t = sim.prefill_len + sim.steps - 1
    inp = replace(config.certificate_input(),
                  theta_sim=min(sim.cis.sim_threshold, 1.0), k_max=trace.k_max, q_max=trace.q_max, q_mean=trace.q_mean,
                  diam_p=float(t - 1), dilate_radius=sim.cis.dilate_radius, t=t, u_frac=sim.psaw.top_fraction,
                  b_const=sim.gen.key_update_bound, mu=sim.gen.key_update_rate,
                  depth_gap=max(0, n_layers - sim.gen.update_start(n_layers)))
    if sim.gen.generator_kind == GeneratorKind.EXP_DECAY:
        top = n_layers - 1
        inp = replace(inp, lam=per_layer(sim.gen.decay_rate, top), kappa=per_layer(sim.gen.decay_factor, top),
                      tau_sink=per_layer(sim.gen.sink_mass, top))
    return {
        "input": inp,
        "cis": cis_certificate(inp, d, m=sim.cis.m),
        "psaw": psaw_certificate(inp),
        "etf": etf_certificate(inp, d, worst_case=True),
        "etf_average": etf_certificate(inp, d, worst_case=False),
    }


def cmd_decode(args) -> int:
    config = load_config(args)
    sim = config.sim_config()
    trace = run_decode(sim)
    out_dir, fmt, run_id = Path(config["output.out_dir"]), config["output.format"], config["output.run_id"]
    seed = sim.gen.seed
    write_rows(out_dir / f"{run_id}_trace.{fmt}", report_rows(trace.steps, run_id, seed), TRACE_COLUMNS, fmt)
    if trace.prefill:
        write_rows(out_dir / f"{run_id}_prefill.{fmt}", report_rows(trace.prefill, run_id, seed), PREFILL_COLUMNS, fmt)
    summary = trace.summary()
    summary["cis_workload"] = sim.cis.workload
    summary["perturbation"] = perturbation_report(trace)[sim.selector.value]
    summary["certificates"] = run_certificates(config, trace)
    write_json(out_dir / f"{run_id}_summary.json", summary)
    print(dumps({key: summary[key] for key in ("selector", "rho_hat", "avg_tokens", "mean_overlap", "checks")}))
    violations = trace.violations()
    if violations:
        log.error(f"{violations} bound checks failed; see {out_dir / f'{run_id}_trace.{fmt}'}")
        return EXIT_FAILED
    return EXIT_OK


def selector_list(text: str) -> list:
    try:
        return [SelectorKind(name.strip()) for name in text.split(",") if name.strip()]
    except ValueError as ex:
        raise ArgumentTypeError(f"{ex}; choose from {', '.join(k.value for k in SelectorKind)}") from ex


def cmd_compare(args) -> int:
    config = load_config(args)
    sim = config.sim_config()
    traces = compare_selectors(sim, args.selectors)
    report = comparison_report(traces)
    out_dir, run_id = Path(config["output.out_dir"]), config["output.run_id"]
    write_json(out_dir / f"{run_id}_compare.json",
               {"seed": sim.gen.seed, "steps": sim.steps, "cis_workload": sim.cis.workload, "selectors": report})
    print(dumps(report))
    failing = [name for name, entry in report.items() if entry["violations"]]
    if failing:
        log.error(f"Bound checks failed for {', '.join(failing)}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_certify(args) -> int:
    config = load_config(args)
    inp = config.certificate_input()
    d, n_layers = config["head.d"], config["head.layers"]
    psaw_cfg, etf_cfg = config.psaw_config(), config.etf_config()
    cis = cis_certificate(inp, d)
    psaw = psaw_certificate(inp)
    etf = etf_certificate(inp, d, worst_case=True)
    joint = joint_certificate(psaw, etf, inp.delta_star, inp.t)
    tuning = tune_schedules(inp, inp.t, n_layers, d)
    if not tuning.psaw_feasible:
        log.warning(f"PSAW target {inp.beta_psaw_target} needs phi^alpha >= {tuning.min_phi_alpha:.6g} > 1; infeasible")
    if not tuning.etf_feasible:
        log.warning(f"ETF target {inp.beta_etf_target} needs {tuning.min_depth_layers} layers above the start layer, "
                    f"model has {n_layers}")
    certificate = {
        "defaults": {"phi": psaw_cfg.phi, "alpha": psaw_cfg.alpha, "psaw_start": psaw_cfg.start(n_layers),
                     "psi": etf_cfg.psi, "gamma": etf_cfg.gamma, "etf_start": etf_cfg.start(n_layers),
                     "n_layers": n_layers, "d": d},
        "input": inp,
        "cis": cis,
        "psaw": psaw,
        "etf": etf,
        "etf_average": etf_certificate(inp, d, worst_case=False),
        "tuning": tuning,
        "joint": joint,
        "prehoc": prehoc_bound(inp.delta_star, cis.beta_th + joint.beta_joint, inp.t),
    }
    if args.out_dir is not None:
        write_json(Path(args.out_dir) / f"{config['output.run_id']}_certificate.json", certificate)
    print(dumps(certificate))
    return EXIT_OK


def cmd_bounds(args) -> int:
    L, delta_star = args.length, args.delta_star
    report = {"length": L, "delta_star": delta_star, "oracle": mi_loss_bound(delta_star, L)}
    if 0.0 < delta_star < 1.0:
        report["slope"] = bound_slope(delta_star, L)
    if args.eps_d is not None:
        report["posthoc"] = posthoc_bound(delta_star, args.eps_d, L)
    if args.beta_th is not None:
        report["prehoc"] = (expected_prehoc_bound if args.expected else prehoc_bound)(delta_star, args.beta_th, L)
    if args.tau is not None:
        report["kl"] = kl_variant(args.tau)
    if args.out_dir is not None:
        write_json(Path(args.out_dir) / "bounds.json", report)
    print(dumps(report))
    return EXIT_OK


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", help="Print more logs", action="store_true")
    common.add_argument("--out-dir", help="Directory reports are written to")
    seeded = ArgumentParser(add_help=False, parents=[common])
    seeded.add_argument("--seed", help="64-bit seed (overrides generator.seed)", type=int)
    seeded.add_argument("--format", help="Trace/record format", choices=("csv", "json"))
    configured = ArgumentParser(add_help=False, parents=[seeded])
    configured.add_argument("--config", help="TOML configuration file with dotted keys")
    configured.add_argument("--set", help="Override one key, e.g. selector.kind=oracle (repeatable)", action="append",
                            metavar="KEY=VALUE")

    parser = ArgumentParser(prog="prehoc-lab", description="Pre-hoc sparse KV selection lab",
                            formatter_class=RawDescriptionHelpFormatter, epilog=schema_text())
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", parents=[seeded], help="Run one property suite",
                            formatter_class=RawDescriptionHelpFormatter,
                            epilog="\n".join(f"  {s.name}: {s.help}" for s in SUITES.values()))
    verify.add_argument("suite", choices=list(SUITES))
    verify.add_argument("--trials", help="Trials (suite default if omitted)", type=int)
    verify.add_argument("--max-len", help="Largest sequence length drawn", type=int)
    verify.add_argument("--max-budget", help="Largest budget enumerated (oracle-optimal)", type=int)
    verify.add_argument("--channels", help="Channels enumerated (mi-channel)", type=int)
    verify.set_defaults(func=cmd_verify)

    decode = sub.add_parser("decode", parents=[configured], help="Simulate a decode run and write its trace",
                            formatter_class=RawDescriptionHelpFormatter,
                            epilog="configuration keys:\n" + describe_fields() + "\n\n" + schema_text())
    decode.set_defaults(func=cmd_decode)

    compare = sub.add_parser("compare", parents=[configured], help="Run several selectors on the same stream",
                             formatter_class=RawDescriptionHelpFormatter,
                             epilog="configuration keys:\n" + describe_fields())
    compare.add_argument("--selectors", help="Comma-separated selector kinds", type=selector_list,
                         default=list(COMPARED_SELECTORS))
    compare.set_defaults(func=cmd_compare)

    certify = sub.add_parser("certify", parents=[configured], help="Evaluate the pre-hoc certificates of a configuration",
                             formatter_class=RawDescriptionHelpFormatter,
                             epilog="configuration keys:\n" + describe_fields())
    certify.set_defaults(func=cmd_certify)

    bounds = sub.add_parser("bounds", parents=[common], help="Evaluate the MI-loss bounds once")
    bounds.add_argument("--delta-star", help="Oracle dropped mass", type=float, required=True)
    bounds.add_argument("--length", help="Sequence length L", type=int, required=True)
    bounds.add_argument("--eps-d", help="Posterior bias for the post-hoc bound", type=float)
    bounds.add_argument("--beta-th", help="Design-time mass error for the pre-hoc bound", type=float)
    bounds.add_argument("--tau", help="Retained mass for the KL form", type=float)
    bounds.add_argument("--expected", help="Read delta-star and beta-th as averages", action="store_true")
    bounds.set_defaults(func=cmd_bounds)
    return parser


def main():
    args = build_parser().parse_args()
    if args.verbose:
        handler.setLevel(DEBUG)

    try:
        status = args.func(args)
    except ConfigError as ex:
        print(f"Configuration `{ex.key}` failed: {ex}", file=sys.stderr)
        exit(EXIT_USAGE)
    except AttentionError as ex:
        print(f"Attention operation `{ex.operation}` failed: {ex}", file=sys.stderr)
        exit(EXIT_USAGE)
    except SelectionError as ex:
        print(f"Selector `{ex.selector}` failed: {ex}", file=sys.stderr)
        exit(EXIT_USAGE)
    except BoundError as ex:
        print(f"Bound `{ex.quantity}` failed: {ex}", file=sys.stderr)
        exit(EXIT_USAGE)
    except SimulationError as ex:
        print(f"Simulation stage `{ex.stage}` failed: {ex}", file=sys.stderr)
        exit(EXIT_USAGE)
    except OSError as ex:
        print(f"Cannot write `{ex.filename}`: {ex.strerror}", file=sys.stderr)
        exit(EXIT_USAGE)
    exit(status)


if __name__=="__main__":
    main()
