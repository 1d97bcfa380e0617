# src/sdacc_sim/server.py
from __future__ import annotations

import argparse
import logging
from functools import lru_cache
from typing import Annotated, Any, Dict, Optional

from mcp.server.fastmcp import FastMCP

from .errors import SimulatorError
from .models import NetworkGraph
from .phase import analyze_trace, load_trace, mac_reduction, preset_plan, search_plan, SearchConstraints
from .simcore import (
    HARDWARE_PRESETS,
    AblationSwitches,
    ablation_grid,
    ablation_summary,
    average_intensity,
    energy_breakdown,
    schedule_speedup,
    simulate_network,
)
from .utils import to_serializable
from .workload import build_unet, cost_curve, count_macs, count_params, step_macs

logger = logging.getLogger(__name__)

mcp = FastMCP("SD accelerator simulator")


@lru_cache(maxsize=8)
def _graph(model_id: str) -> NetworkGraph:
    return build_unet(model_id)


@mcp.tool(
    description=(
        "Summarize a bundled Stable Diffusion U-Net workload: layer and parameter counts, "
        "per-step MACs, per-block MACs and the cost function f(l) for l = 1..13."
    )
)
def workload_summary(
    model_id: Annotated[str, "Bundled model id: sd14, sd21base or sdxl."] = "sd14",
    cost_basis: Annotated[str, "Cost basis: 'profiled' (conv + linear) or 'all'."] = "profiled",
) -> Dict[str, Any]:
    """
    Returns:
      {"model_id": str, "layers": int, "params": int, "unet_macs": int, "step_macs": int,
       "block_macs": {block: int}, "cost_function": {l: float}}
    """
    try:
        graph = _graph(model_id)
        macs = count_macs(graph)
        return to_serializable({
            "model_id": graph.model_id,
            "layers": len(graph.layers),
            "params": count_params(graph),
            "unet_macs": macs.total,
            "step_macs": step_macs(graph, include_extras=True),
            "block_macs": {str(b): m for b, m in macs.per_block.items()},
            "cost_function": cost_curve(graph, cost_basis),
        })
    except SimulatorError as e:
        logger.error(f"Workload summary failed for {model_id}: {e}")
        raise
    except Exception as e:
        logger.error(f"Unexpected error summarizing {model_id}: {e}")
        raise SimulatorError(f"Failed to summarize workload: {e}") from e


@mcp.tool(
    description=(
        "Analyze a shift-score trace CSV (image_id,block_id,timestep,shift_score), find the "
        "transition step D* and outlier blocks, and rank phase-aware sampling plans by MAC reduction."
    )
)
def search_sampling_plans(
    trace_path: Annotated[str, "Path to the trace CSV."],
    model_id: Annotated[str, "Bundled model id whose cost function scores the plans."] = "sd14",
    min_reduction: Annotated[float, "Minimum MAC reduction a plan must reach."] = 1.0,
    limit: Annotated[int, "Number of top plans to return."] = 10,
) -> Dict[str, Any]:
    """
    Returns:
      {"d_star": int, "outliers": [int], "feasible": int,
       "plans": [{"params": {...}, "full_steps": int, "depth_total": int, "reduction": float}, ...]}
    """
    try:
        trace = load_trace(trace_path)
        analysis = analyze_trace(trace)
        ranked = search_plan(
            SearchConstraints(min_reduction=min_reduction),
            cost_curve(_graph(model_id)),
            analysis.d_star,
            analysis.outliers,
            trace.T,
        )
        return to_serializable({
            "d_star": analysis.d_star,
            "outliers": sorted(analysis.outliers),
            "feasible": len(ranked),
            "plans": ranked[:limit],
        })
    except SimulatorError as e:
        logger.error(f"Plan search failed for {trace_path}: {e}")
        raise
    except Exception as e:
        logger.error(f"Unexpected error searching plans for {trace_path}: {e}")
        raise SimulatorError(f"Failed to search sampling plans: {e}") from e


@mcp.tool(
    description=(
        "Simulate a bundled U-Net on the accelerator model. Optional sampling preset (e.g. 'PAS-25/4') "
        "runs the phase-aware schedule and reports its speedup over running the full network every step."
    )
)
def simulate_model(
    model_id: Annotated[str, "Bundled model id."] = "sd14",
    preset: Annotated[Optional[str], "Sampling preset name, e.g. 'PAS-25/4'."] = None,
    address_centric: Annotated[bool, "Address-centric convolution (off = im2col)."] = True,
    adaptive_dataflow: Annotated[bool, "Adaptive reuse and fusion (off = fixed weight reuse)."] = True,
    streaming_nonlinear: Annotated[bool, "Streaming softmax/layernorm (off = blocking passes)."] = True,
    hardware_preset: Annotated[str, "Hardware preset: 'default' or 'scaled'."] = "default",
) -> Dict[str, Any]:
    """
    Returns:
      {"model_id": str, "switches": str, "latency_s": float, "cycles": float, "dram_bytes": int,
       "energy": {...}, "average_intensity": float, "blocks": {block: {...}}, "speedup": float?}
    """
    try:
        if hardware_preset not in HARDWARE_PRESETS:
            raise SimulatorError(f"Unknown hardware preset '{hardware_preset}'")
        hw = HARDWARE_PRESETS[hardware_preset]()
        switches = AblationSwitches(address_centric, adaptive_dataflow, streaming_nonlinear)
        graph = _graph(model_id)
        sampling = preset_plan(preset) if preset else None
        report = simulate_network(graph, sampling_plan=sampling, hw=hw, switches=switches)
        result: Dict[str, Any] = {
            "model_id": graph.model_id,
            "switches": switches.label,
            "latency_s": report.latency_s,
            "cycles": report.total.cycles_total,
            "dram_bytes": report.total.dram_bytes,
            "energy": energy_breakdown(report),
            "average_intensity": average_intensity(report),
            "blocks": report.blocks,
        }
        if sampling is not None:
            full = simulate_network(graph, hw=hw, switches=switches)
            result["speedup"] = schedule_speedup(full, report)
            result["mac_reduction"] = mac_reduction(sampling, cost_curve(graph))
        return to_serializable(result)
    except SimulatorError as e:
        logger.error(f"Simulation failed for {model_id}: {e}")
        raise
    except Exception as e:
        logger.error(f"Unexpected error simulating {model_id}: {e}")
        raise SimulatorError(f"Failed to simulate: {e}") from e


@mcp.tool(
    description=(
        "Run the cumulative ablation (base, +AC, +AC+AD, +AC+AD+SC) on a bundled U-Net and "
        "return latency, traffic, energy and speedup for each setting."
    )
)
def ablate_model(
    model_id: Annotated[str, "Bundled model id."] = "sd14",
    preset: Annotated[Optional[str], "Optional sampling preset name."] = None,
) -> Dict[str, Any]:
    """
    Returns:
      {"model_id": str, "steps": [{"label": str, "cycles": float, "speedup": float, ...}, ...]}
    """
    try:
        graph = _graph(model_id)
        results = ablation_grid(graph, sampling_plan=preset_plan(preset) if preset else None)
        return to_serializable({"model_id": graph.model_id, "steps": ablation_summary(results)})
    except SimulatorError as e:
        logger.error(f"Ablation failed for {model_id}: {e}")
        raise
    except Exception as e:
        logger.error(f"Unexpected error ablating {model_id}: {e}")
        raise SimulatorError(f"Failed to run ablation: {e}") from e


def main():
    parser = argparse.ArgumentParser(description="Run the SD accelerator simulator MCP server")
    parser.add_argument(
        "transport",
        nargs="?",
        default="stdio",
        help="Transport to run (stdio or streamable-http)",
    )
    args = parser.parse_args()
    mcp.run(transport=args.transport)


if __name__ == "__main__":
    main()
