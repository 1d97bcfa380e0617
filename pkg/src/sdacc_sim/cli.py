# src/sdacc_sim/cli.py
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import RunConfig, default_config_dict, load_config
from .errors import (
    ConfigError,
    InfeasiblePlanError,
    InvariantViolationError,
    NumericFaultError,
    PlanError,
    SchemaVersionError,
    TopologyError,
    TraceError,
)
from .models import NetworkGraph
from .phase import (
    SamplingPlan,
    analyze_trace,
    candidate_plan,
    load_plan,
    load_trace,
    mac_reduction,
    preset_plan,
    save_plan,
    save_trace,
    search_plan,
    synth_trace,
    write_plans_csv,
)
from .simcore import ablation_grid, schedule_speedup, simulate_network, streaming_study, write_report
from .utils import SCHEMA_VERSION, dump_json, to_serializable, write_csv
from .version import __version__
from .workload import (
    cost_curve,
    count_macs,
    count_params,
    step_macs,
    build_unet,
    write_cost_csv,
    write_footprints_csv,
    write_macs_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_EMPTY = 2
EXIT_INTERNAL = 3

SPEEDUP_HEADER = ["label", "address_centric", "adaptive_dataflow", "streaming_nonlinear",
                  "cycles", "latency_s", "dram_bytes", "energy_j", "speedup"]
STREAMING_HEADER = ["block", "seq_len", "channels", "blocking_cycles", "streaming_cycles", "reduction"]


def _load_graph(config: RunConfig) -> NetworkGraph:
    run = config.run
    latent = run.latent or None
    if run.topology:
        return build_unet(topology=run.topology, latent_h=latent, latent_w=latent)
    return build_unet(run.model, latent_h=latent, latent_w=latent)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.run.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {out}: {e}") from e
    return out


def _provenance(config: RunConfig) -> dict:
    return {"config": config.to_dict(), "defaults": default_config_dict(), "version": __version__}


def _echo(payload: dict) -> None:
    print(json.dumps(to_serializable(payload), indent=2, sort_keys=True))


def cmd_workload(config: RunConfig) -> int:
    graph = _load_graph(config)
    out = _out_dir(config)
    bpe = config.hardware.bytes_per_element
    write_macs_csv(graph, out / "macs.csv", bpe)
    write_footprints_csv(graph, out / "footprints.csv", bpe)
    write_cost_csv(graph, out / "cost_function.csv", config.run.cost_basis)
    macs = count_macs(graph)
    summary = {
        "model_id": graph.model_id,
        "layers": len(graph.layers),
        "params": count_params(graph),
        "unet_macs": macs.total,
        "step_macs": step_macs(graph, cfg=config.run.cfg, include_extras=True),
        "block_macs": {str(b): m for b, m in macs.per_block.items()},
        "cost_function": cost_curve(graph, config.run.cost_basis),
        "cost_basis": config.run.cost_basis,
        "schema_version": SCHEMA_VERSION,
        **_provenance(config),
    }
    dump_json(summary, out / "workload.json")
    _echo({k: summary[k] for k in ("model_id", "layers", "params", "unet_macs", "step_macs")})
    return EXIT_OK


def cmd_plan(config: RunConfig) -> int:
    run = config.run
    if not run.trace:
        raise ConfigError("plan needs a shift-score trace (--trace)")
    graph = _load_graph(config)
    out = _out_dir(config)
    trace = load_trace(run.trace)
    analysis = analyze_trace(trace, config.phase)
    f = cost_curve(graph, run.cost_basis)
    ranked = search_plan(run.constraints(), f, analysis.d_star, analysis.outliers, trace.T, config.phase.placement)
    write_plans_csv(ranked, out / "plans.csv")

    echo = {"d_star": analysis.d_star, "outliers": sorted(analysis.outliers), "feasible": len(ranked)}
    if not ranked:
        echo["reason"] = f"no plan satisfies {run.constraints()}"
        _echo(echo)
        logger.warning(echo["reason"])
        return EXIT_EMPTY
    best = candidate_plan(ranked[0], trace.T, config.phase.placement, analysis.d_star, analysis.outliers)
    save_plan(best, out / "plan.json")
    echo.update(best=ranked[0].params, mac_reduction=ranked[0].reduction)
    _echo(echo)
    return EXIT_OK


def cmd_trace(config: RunConfig) -> int:
    """Write a seeded synthetic shift-score trace with a known transition and outliers."""
    run = config.run
    out = _out_dir(config)
    try:
        trace = synth_trace(T=run.timesteps, D_true=run.synth_transition, noise_sigma=run.synth_noise, rng_seed=run.seed)
    except ValueError as e:
        raise ConfigError(f"run.synth_transition: {e}") from e
    path = out / "trace.csv"
    save_trace(trace, path)
    logger.info(f"Wrote synthetic trace to {path} (seed {run.seed})")
    _echo({"trace": str(path), "T": trace.T, "seed": run.seed, "d_true": run.synth_transition})
    return EXIT_OK


def _sampling_plan(config: RunConfig) -> Optional[SamplingPlan]:
    run = config.run
    if run.plan:
        return load_plan(run.plan)
    if run.preset:
        return preset_plan(run.preset, run.timesteps, config.phase.placement)
    return None


def cmd_simulate(config: RunConfig) -> int:
    graph = _load_graph(config)
    out = _out_dir(config)
    hw, switches = config.hardware, config.switches
    sampling = _sampling_plan(config)
    report = simulate_network(graph, sampling_plan=sampling, hw=hw, switches=switches)
    extra = _provenance(config)
    if sampling is not None:
        full = simulate_network(graph, hw=hw, switches=switches)
        extra["sampling"] = {
            "params": sampling.params,
            "depth_schedule": sampling.depth_schedule,
            "mac_reduction": mac_reduction(sampling, cost_curve(graph, config.run.cost_basis)),
            "speedup": schedule_speedup(full, report),
        }
    write_report(report, out, extra)
    _echo({"model_id": graph.model_id, "switches": switches.label, "latency_s": report.latency_s,
           "dram_bytes": report.total.dram_bytes, "energy_j": report.total.energy_j,
           **({"speedup": extra["sampling"]["speedup"]} if sampling is not None else {})})
    return EXIT_OK


def cmd_ablate(config: RunConfig) -> int:
    graph = _load_graph(config)
    out = _out_dir(config)
    results = ablation_grid(graph, config.hardware, _sampling_plan(config))
    for r in results:
        write_report(r.report, out / r.label.replace("+", "_").strip("_"), _provenance(config))
    rows = [
        (r.label, r.switches.address_centric, r.switches.adaptive_dataflow, r.switches.streaming_nonlinear,
         r.report.total.cycles_total, r.report.latency_s, r.report.total.dram_bytes, r.report.total.energy_j,
         r.speedup)
        for r in results
    ]
    write_csv(out / "speedups.csv", SPEEDUP_HEADER, rows)
    _echo({r.label: r.speedup for r in results})
    return EXIT_OK


def cmd_streaming(config: RunConfig) -> int:
    out = _out_dir(config)
    study = streaming_study(hw=config.hardware)
    rows = [
        (block, p["seq_len"], p["channels"], p["blocking_cycles"], p["streaming_cycles"], p["reduction"])
        for block, points in study.items()
        for p in points
    ]
    write_csv(out / "streaming.csv", STREAMING_HEADER, rows)
    _echo({block: [p["reduction"] for p in points] for block, points in study.items()})
    return EXIT_OK


COMMANDS = {
    "workload": cmd_workload,
    "trace": cmd_trace,
    "plan": cmd_plan,
    "simulate": cmd_simulate,
    "ablate": cmd_ablate,
    "streaming": cmd_streaming,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdacc-sim", description="Stable Diffusion accelerator simulator and planner")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--model", help="Bundled model id (sd14, sd21base, sdxl)")
    common.add_argument("--topology", help="Custom topology JSON file")
    common.add_argument("--trace", help="Shift-score trace CSV")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--seed", type=int, help="Seed for the synthetic trace")
    common.add_argument("--preset", help="Sampling preset, e.g. PAS-25/4")
    common.add_argument("--plan", help="Saved sampling plan (plan.json)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value (section.key=value; bare keys go to hardware, then switches)")
    common.add_argument("-v", "--verbose", action="store_true", help="Log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "workload": "MAC, footprint and cost-function tables",
        "trace": "Write a seeded synthetic shift-score trace",
        "plan": "Search phase-aware sampling plans from a trace",
        "simulate": "Simulate one network under the configured switches",
        "ablate": "Simulate the cumulative optimization settings",
        "streaming": "Streaming nonlinear micro-benchmarks",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    flags = {"model": "run.model", "topology": "run.topology", "trace": "run.trace", "out": "run.out_dir",
             "seed": "run.seed", "preset": "run.preset", "plan": "run.plan"}
    return [f"{key}={getattr(args, attr)}" for attr, key in flags.items() if getattr(args, attr) is not None]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, [*args.overrides, *_flag_overrides(args)])
        return COMMANDS[args.command](config)
    except (ConfigError, TopologyError, TraceError, PlanError, SchemaVersionError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantViolationError, InfeasiblePlanError, NumericFaultError) as e:
        logger.error(f"Internal consistency failure: {e}")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
