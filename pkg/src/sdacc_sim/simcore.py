# src/sdacc_sim/simcore.py
"""
Analytical timing, traffic and energy model of the accelerator.

Each matmul layer runs as a load / stream / drain sequence. The resident
operand is loaded before streaming starts, the stream phase overlaps compute
with the remaining DRAM traffic (double buffered), and the final output tile
drains afterwards. Array time follows the weight-stationary tile formula
``K + M + sa_h + sa_w`` summed over row chunks and weight tiles. Vector layers
run on the VPU and are either serialized (blocking passes over the data) or
hidden behind the producing matmul when streaming is enabled.

DRAM bytes always come from :func:`sdacc_sim.scheduler.traffic_model`.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from .errors import ConfigError, InfeasiblePlanError, InvariantViolationError, TopologyError
from .models import (
    ATTENTION_KINDS,
    CONV_KINDS,
    FULL_DEPTH,
    MATMUL_KINDS,
    MOVE_KINDS,
    BlockId,
    LayerDescriptor,
    LayerKind,
    NetworkGraph,
    Side,
)
from .nonlinear import NonlinearTiming
from .scheduler import (
    KIB,
    MIB,
    LayerSchedule,
    ReuseMode,
    SchedulePlan,
    SchedulerConfig,
    Tiling,
    TrafficEstimate,
    plan_schedule,
    plan_to_dict,
    planning_footprint,
    tiling_traffic,
    traffic_model,
)
from .utils import SCHEMA_VERSION, dump_json, write_csv
from .workload import executed_blocks, layer_macs

logger = logging.getLogger(__name__)

LAYERS_HEADER = ["layer_id", "cycles", "dram_bytes", "energy_j", "intensity", "attained"]
ROOFLINE_HEADER = ["layer_id", "intensity", "attained", "bound"]

# Relative slack for float comparisons in the consistency checks.
_REL_TOL = 1e-9


@dataclass(frozen=True)
class HardwareConfig:
    sa_h: int = 32
    sa_w: int = 32
    vpu_lanes: int = 32
    freq_hz: float = 2.0e8
    dram_bw_bytes_per_s: float = 38.4e9
    bytes_per_element: int = 2
    global_buffer_bytes: int = 2 * MIB
    staging_buffer_bytes: int = 64 * KIB
    staging_buffers: int = 3
    fifo_depth: int = 32
    power_w: float = 15.98
    dram_energy_per_byte: float = 1.2e-10
    # Rows streamed through one weight residency before the next chunk.
    row_chunk: int = 1024
    # Share of im2col conversion cycles not hidden behind the GEMM.
    im2col_overlap: float = 0.5
    tile_latency_cycles: int = 32
    pipeline_latency_cycles: int = 8
    resident_share: float = 0.75

    def __post_init__(self) -> None:
        for name in (
            "sa_h", "sa_w", "vpu_lanes", "freq_hz", "dram_bw_bytes_per_s", "bytes_per_element",
            "global_buffer_bytes", "staging_buffer_bytes", "staging_buffers", "fifo_depth",
            "power_w", "row_chunk",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"hardware.{name} must be positive, got {getattr(self, name)}")
        if self.dram_energy_per_byte < 0:
            raise ConfigError(f"hardware.dram_energy_per_byte must be non-negative, got {self.dram_energy_per_byte}")
        if self.vpu_lanes != self.sa_h:
            raise ConfigError(f"hardware.vpu_lanes ({self.vpu_lanes}) must equal sa_h ({self.sa_h})")
        if not 0 <= self.im2col_overlap <= 1:
            raise ConfigError(f"hardware.im2col_overlap must be in [0, 1], got {self.im2col_overlap}")
        if not 0 < self.resident_share <= 1:
            raise ConfigError(f"hardware.resident_share must be in (0, 1], got {self.resident_share}")

    @property
    def macs_per_cycle(self) -> int:
        return self.sa_h * self.sa_w

    @property
    def peak_macs_per_s(self) -> float:
        return self.macs_per_cycle * self.freq_hz

    @property
    def bytes_per_cycle(self) -> float:
        return self.dram_bw_bytes_per_s / self.freq_hz

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(
            buffer_bytes=self.global_buffer_bytes,
            resident_share=self.resident_share,
            bytes_per_element=self.bytes_per_element,
            staging_bytes=self.staging_buffer_bytes,
            array_width=self.sa_w,
        )

    def timing(self) -> NonlinearTiming:
        return NonlinearTiming(self.tile_latency_cycles, self.pipeline_latency_cycles)

    @classmethod
    def scaled(cls, **overrides: Any) -> "HardwareConfig":
        """64x64 array at 1 GHz with the default memory system."""
        base = dict(sa_h=64, sa_w=64, vpu_lanes=64, freq_hz=1.0e9)
        base.update(overrides)
        return cls(**base)


HARDWARE_PRESETS = {"default": HardwareConfig, "scaled": HardwareConfig.scaled}


@dataclass(frozen=True)
class AblationSwitches:
    address_centric: bool = True
    adaptive_dataflow: bool = True
    streaming_nonlinear: bool = True

    @classmethod
    def baseline(cls) -> "AblationSwitches":
        """im2col convolutions, fixed weight reuse, blocking nonlinear ops."""
        return cls(False, False, False)

    @property
    def label(self) -> str:
        parts = [tag for tag, on in (("AC", self.address_centric), ("AD", self.adaptive_dataflow),
                                     ("SC", self.streaming_nonlinear)) if on]
        return "+" + "+".join(parts) if parts else "base"


# Cumulative ablation order: each step enables one more optimization.
ABLATION_STEPS = (
    AblationSwitches(False, False, False),
    AblationSwitches(True, False, False),
    AblationSwitches(True, True, False),
    AblationSwitches(True, True, True),
)


@dataclass
class LayerStats:
    layer_id: int
    name: str
    kind: LayerKind
    block: str
    macs: int = 0
    cycles_total: float = 0.0
    cycles_sa_busy: float = 0.0
    cycles_mem_bound: float = 0.0
    cycles_nonlinear_stall: float = 0.0
    cycles_other: float = 0.0
    dram_bytes: int = 0
    energy_j: float = 0.0
    op_intensity: float = 0.0
    attained_mac_per_s: float = 0.0


@dataclass
class StatsTotal:
    macs: int = 0
    cycles_total: float = 0.0
    cycles_sa_busy: float = 0.0
    cycles_mem_bound: float = 0.0
    cycles_nonlinear_stall: float = 0.0
    cycles_other: float = 0.0
    dram_bytes: int = 0
    energy_j: float = 0.0

    def add(self, s: Union[LayerStats, "StatsTotal"], times: int = 1) -> None:
        self.macs += s.macs * times
        self.cycles_total += s.cycles_total * times
        self.cycles_sa_busy += s.cycles_sa_busy * times
        self.cycles_mem_bound += s.cycles_mem_bound * times
        self.cycles_nonlinear_stall += s.cycles_nonlinear_stall * times
        self.cycles_other += s.cycles_other * times
        self.dram_bytes += s.dram_bytes * times
        self.energy_j += s.energy_j * times

    @property
    def op_intensity(self) -> float:
        return self.macs / self.dram_bytes if self.dram_bytes else 0.0


@dataclass
class SimReport:
    model_id: str
    hardware: HardwareConfig
    switches: AblationSwitches
    plan: Dict[str, Any]
    depth_schedule: List[int]
    layers: List[LayerStats]
    blocks: Dict[str, StatsTotal]
    step: StatsTotal
    total: StatsTotal
    schema_version: str = SCHEMA_VERSION

    @property
    def latency_s(self) -> float:
        return self.total.cycles_total / self.hardware.freq_hz

    @property
    def timesteps(self) -> int:
        return len(self.depth_schedule)


@dataclass(frozen=True)
class RooflinePoint:
    layer_id: int
    op_intensity: float
    attained: float
    bound: float


# ---- systolic array timing ---------------------------------------------------


def simulate_matmul_tile(M: int, K: int, N: int, hw: HardwareConfig) -> int:
    """Cycles for one weight residency: load K rows, stream M rows, fill and drain."""
    if M < 1 or K < 1 or N < 1:
        raise ValueError(f"Tile dimensions must be positive, got M={M} K={K} N={N}")
    if K > hw.sa_w or N > hw.sa_h:
        raise ValueError(f"Tile {K}x{N} exceeds the {hw.sa_w}x{hw.sa_h} array")
    return K + M + hw.sa_h + hw.sa_w


def matmul_cycles(M: int, K: int, N: int, hw: HardwareConfig) -> int:
    """(M, K) x (K, N) as array-sized weight tiles with rows streamed in chunks of ``row_chunk``."""
    if M < 1 or K < 1 or N < 1:
        raise ValueError(f"Matmul dimensions must be positive, got M={M} K={K} N={N}")
    n_m = -(-M // hw.row_chunk)
    n_k = -(-K // hw.sa_w)
    n_n = -(-N // hw.sa_h)
    # Summing simulate_matmul_tile over every (chunk, k tile) pair collapses to this.
    return n_n * (n_m * K + n_k * M + n_m * n_k * (hw.sa_h + hw.sa_w))


def sa_cycles(layer: LayerDescriptor, hw: HardwareConfig, address_centric: bool = True) -> int:
    """Array-busy cycles of a matmul layer; zero for everything else."""
    k = layer.kind
    if k in CONV_KINDS:
        taps = layer.kernel * layer.kernel
        if address_centric or layer.kernel == 1:
            return taps * matmul_cycles(layer.out_len, layer.c_in, layer.c_out, hw)
        return matmul_cycles(layer.out_len, taps * layer.c_in, layer.c_out, hw)
    if k is LayerKind.LINEAR:
        return matmul_cycles(layer.row_count, layer.c_in, layer.c_out, hw)
    if k in ATTENTION_KINDS:
        if not (layer.heads and layer.seq_len and layer.kv_len and layer.head_dim):
            raise TopologyError(f"Attention layer {layer.name or layer.id} is missing shape fields")
        if k is LayerKind.ATTENTION_QK:
            return layer.heads * matmul_cycles(layer.seq_len, layer.head_dim, layer.kv_len, hw)
        return layer.heads * matmul_cycles(layer.seq_len, layer.kv_len, layer.head_dim, hw)
    return 0


def im2col_conversion_cycles(layer: LayerDescriptor, hw: HardwareConfig) -> float:
    """Exposed lowering cycles; rows are regenerated for every output-channel tile."""
    if layer.kind not in CONV_KINDS or layer.kernel == 1:
        return 0.0
    lowered = layer.out_len * layer.kernel * layer.kernel * layer.c_in
    return lowered * (-(-layer.c_out // hw.sa_h)) / hw.sa_w * hw.im2col_overlap


def _load_bytes(layer: LayerDescriptor, sched: LayerSchedule, est: TrafficEstimate, hw: HardwareConfig) -> int:
    if layer.kind in ATTENTION_KINDS:
        # One head's stationary operand; later heads load under the previous one.
        return min(est.weight_read, layer.kv_len * layer.head_dim * hw.bytes_per_element)
    if sched.tiling is Tiling.WEIGHT_TILES or (
        sched.tiling is Tiling.SINGLE and sched.reuse is ReuseMode.WEIGHT_REUSE
    ):
        return est.weight_read
    return est.act_in_read


def _finish(stats: LayerStats, hw: HardwareConfig) -> LayerStats:
    stats.energy_j = hw.power_w * stats.cycles_total / hw.freq_hz + hw.dram_energy_per_byte * stats.dram_bytes
    if stats.dram_bytes:
        stats.op_intensity = stats.macs / stats.dram_bytes
    if stats.cycles_total > 0:
        stats.attained_mac_per_s = stats.macs * hw.freq_hz / stats.cycles_total
    return stats


def _matmul_stats(
    layer: LayerDescriptor,
    sched: LayerSchedule,
    est: TrafficEstimate,
    hw: HardwareConfig,
    switches: AblationSwitches,
) -> LayerStats:
    bpc = hw.bytes_per_cycle
    compute = sa_cycles(layer, hw, switches.address_centric)
    conversion = 0.0 if switches.address_centric else im2col_conversion_cycles(layer, hw)
    dram = est.total
    load = _load_bytes(layer, sched, est, hw)
    drain = min(est.act_out_write, hw.staging_buffer_bytes)
    stream = max(float(compute), (dram - load - drain) / bpc)
    other = (load + drain) / bpc + conversion
    stats = LayerStats(
        layer.id, layer.name, layer.kind, str(layer.block_ref),
        macs=layer_macs(layer),
        cycles_total=stream + other,
        cycles_sa_busy=float(compute),
        cycles_mem_bound=dram / bpc,
        cycles_other=other,
        dram_bytes=dram,
    )
    return _finish(stats, hw)


def _vector_stats(layer: LayerDescriptor, hw: HardwareConfig, switches: AblationSwitches) -> LayerStats:
    stats = LayerStats(layer.id, layer.name, layer.kind, str(layer.block_ref))
    if layer.kind not in MOVE_KINDS:
        timing = hw.timing()
        passes = timing.passes(layer.kind.value, switches.streaming_nonlinear)
        if passes:
            stall = passes * -(-layer.vector_elements // hw.vpu_lanes)
        else:
            stall = timing.streaming_tail(layer.kind.value)
        stats.cycles_nonlinear_stall = float(stall)
        stats.cycles_total = float(stall)
    return _finish(stats, hw)


def _check_switches(plan: SchedulePlan, switches: AblationSwitches) -> None:
    if plan.im2col == switches.address_centric:
        raise InfeasiblePlanError(
            f"Plan im2col={plan.im2col} contradicts address_centric={switches.address_centric}"
        )
    if plan.adaptive != switches.adaptive_dataflow:
        raise InfeasiblePlanError(
            f"Plan adaptive={plan.adaptive} contradicts adaptive_dataflow={switches.adaptive_dataflow}"
        )


def simulate_uniconv(
    layer: LayerDescriptor,
    plan: SchedulePlan,
    hw: Optional[HardwareConfig] = None,
    switches: Optional[AblationSwitches] = None,
    estimate: Optional[TrafficEstimate] = None,
) -> LayerStats:
    """
    Time one convolution under ``plan``.

    With ``address_centric`` the KxK kernel runs as K*K slice matmuls whose
    scatter-add overlaps on the VPU; otherwise the im2col GEMM is charged plus
    the exposed conversion cycles. Without an ``estimate`` the layer's unfused
    traffic for its planned tiling is used.
    """
    hw = hw or HardwareConfig()
    switches = switches or AblationSwitches()
    if layer.kind not in CONV_KINDS:
        raise ValueError(f"Layer {layer.name or layer.id} is not a convolution")
    if not plan.covers(layer.id):
        raise InfeasiblePlanError(f"Plan does not cover layer {layer.name or layer.id}")
    _check_switches(plan, switches)
    sched = plan.layers[layer.id]
    if estimate is None:
        fp = planning_footprint(layer, hw.bytes_per_element, plan.im2col)
        estimate = tiling_traffic(fp, sched.tiling, plan.config.share_bytes)
    return _matmul_stats(layer, sched, estimate, hw, switches)


# ---- network -----------------------------------------------------------------


def plan_for(graph: NetworkGraph, hw: HardwareConfig, switches: AblationSwitches) -> SchedulePlan:
    """Schedule plan matching the dataflow switches."""
    return plan_schedule(
        graph,
        hw.scheduler_config(),
        adaptive=switches.adaptive_dataflow,
        im2col=not switches.address_centric,
    )


def simulate_layers(
    graph: NetworkGraph,
    plan: SchedulePlan,
    hw: HardwareConfig,
    switches: AblationSwitches,
) -> List[LayerStats]:
    """Stats for every layer of one full pass over ``graph``."""
    if plan.model_id != graph.model_id:
        raise InfeasiblePlanError(f"Plan is for '{plan.model_id}', graph is '{graph.model_id}'")
    if plan.config.bytes_per_element != hw.bytes_per_element:
        raise InfeasiblePlanError(
            f"Plan uses {plan.config.bytes_per_element} bytes per element, hardware {hw.bytes_per_element}"
        )
    _check_switches(plan, switches)
    missing = [l.name or str(l.id) for l in graph.layers if l.kind in MATMUL_KINDS and not plan.covers(l.id)]
    if missing:
        raise InfeasiblePlanError(f"Plan does not cover {len(missing)} matmul layers, first: {missing[0]}")

    traffic = traffic_model(graph, plan)
    stats = []
    for layer in graph.layers:
        if layer.kind in MATMUL_KINDS:
            stats.append(_matmul_stats(layer, plan.layers[layer.id], traffic.per_layer[layer.id], hw, switches))
        else:
            stats.append(_vector_stats(layer, hw, switches))

    moved = sum(s.dram_bytes for s in stats)
    if moved != traffic.total.total:
        raise InvariantViolationError(f"Layer DRAM bytes {moved} differ from planned traffic {traffic.total.total}")
    return stats


def check_layer_invariants(stats: Sequence[LayerStats], hw: HardwareConfig) -> None:
    """Raise InvariantViolationError for the first layer breaking a timing bound."""
    for s in stats:
        slack = _REL_TOL * max(s.cycles_total, 1.0)
        parts = (s.cycles_sa_busy, s.cycles_mem_bound, s.cycles_nonlinear_stall, s.cycles_other)
        if s.cycles_total + slack < max(parts):
            raise InvariantViolationError(f"Layer {s.layer_id}: total cycles below a component")
        if s.cycles_sa_busy + slack < s.macs / hw.macs_per_cycle:
            raise InvariantViolationError(f"Layer {s.layer_id}: array utilization above 1")
        bound = roofline_bound(s.op_intensity, hw) if s.dram_bytes else hw.peak_macs_per_s
        if s.attained_mac_per_s > bound * (1 + _REL_TOL):
            raise InvariantViolationError(
                f"Layer {s.layer_id}: attained {s.attained_mac_per_s:.6g} MAC/s above roofline {bound:.6g}"
            )


def simulate_network(
    graph: NetworkGraph,
    plan: Optional[SchedulePlan] = None,
    sampling_plan: Optional[Any] = None,
    hw: Optional[HardwareConfig] = None,
    switches: Optional[AblationSwitches] = None,
) -> SimReport:
    """
    Simulate ``graph`` over every timestep of ``sampling_plan``.

    Without a sampling plan a single full-network step is simulated. Each
    timestep costs the sum of its executed blocks, so per-block stats are
    computed once and reused.
    """
    hw = hw or HardwareConfig()
    switches = switches or AblationSwitches()
    plan = plan or plan_for(graph, hw, switches)
    stats = simulate_layers(graph, plan, hw, switches)
    check_layer_invariants(stats, hw)

    blocks: Dict[BlockId, StatsTotal] = {b: StatsTotal() for b in graph.blocks}
    step = StatsTotal()
    for layer, s in zip(graph.layers, stats):
        blocks.setdefault(layer.block_ref, StatsTotal()).add(s)
        step.add(s)

    depths = list(sampling_plan.depth_schedule) if sampling_plan is not None else [FULL_DEPTH]
    total = StatsTotal()
    for depth in sorted(set(depths)):
        for block in executed_blocks(graph, depth):
            total.add(blocks[block], depths.count(depth))

    report = SimReport(
        model_id=graph.model_id,
        hardware=hw,
        switches=switches,
        plan=plan_to_dict(plan),
        depth_schedule=depths,
        layers=stats,
        blocks={str(b): t for b, t in blocks.items()},
        step=step,
        total=total,
    )
    logger.info(
        f"{graph.model_id} {switches.label}: {report.timesteps} steps, "
        f"{total.cycles_total:.4g} cycles, {total.dram_bytes} DRAM bytes, {total.energy_j:.4g} J"
    )
    return report


def schedule_speedup(full: SimReport, sampled: SimReport) -> float:
    """Latency of running the full network on every step of ``sampled`` over its actual latency."""
    return full.step.cycles_total * sampled.timesteps / sampled.total.cycles_total


def energy_breakdown(report: SimReport) -> Dict[str, float]:
    hw = report.hardware
    static = hw.power_w * report.total.cycles_total / hw.freq_hz
    dram = hw.dram_energy_per_byte * report.total.dram_bytes
    return {"static_j": static, "dram_j": dram, "total_j": static + dram}


# ---- roofline ----------------------------------------------------------------


def roofline_bound(op_intensity: float, hw: HardwareConfig) -> float:
    return min(hw.peak_macs_per_s, op_intensity * hw.dram_bw_bytes_per_s)


def roofline_points(report: SimReport, hw: Optional[HardwareConfig] = None) -> List[RooflinePoint]:
    """One point per layer that both computes and moves data."""
    hw = hw or report.hardware
    points = []
    for s in report.layers:
        if s.macs and s.dram_bytes:
            points.append(RooflinePoint(s.layer_id, s.op_intensity, s.attained_mac_per_s,
                                        roofline_bound(s.op_intensity, hw)))
    return points


def average_intensity(report: SimReport) -> float:
    """MACs per DRAM byte over the whole depth schedule."""
    return report.total.op_intensity


# ---- transformer block benchmarks -------------------------------------------

# Top-level U-Net width; self-attention benchmarks keep it fixed across lengths.
ATTENTION_BENCH_WIDTH = 320
ATTENTION_BENCH_HEADS = 8


def level_width(seq_len: int, top_len: int = 4096, top_width: int = ATTENTION_BENCH_WIDTH) -> int:
    """Channel width of the U-Net level whose feature map has ``seq_len`` pixels."""
    return int(round(top_width * math.sqrt(top_len / seq_len)))


def _block_graph(model_id: str, rows: int, channels: int, specs: List[Dict[str, Any]]) -> NetworkGraph:
    block = BlockId(Side.DOWN, 1)
    layers = []
    for n, overrides in enumerate(specs):
        fields = dict(height=rows, width=1, rows=rows, c_in=channels, c_out=channels)
        fields.update(overrides)
        layers.append(LayerDescriptor(id=n, block_ref=block, **fields))
    return NetworkGraph(model_id, layers, [], rows, 1, rows, channels, blocks=[block])


def attention_block(seq_len: int, channels: int = ATTENTION_BENCH_WIDTH, heads: int = ATTENTION_BENCH_HEADS) -> NetworkGraph:
    """Self-attention: q/k/v projections, scores, softmax, weighted sum, output projection."""
    if channels % heads:
        raise ValueError(f"channels {channels} not divisible by heads {heads}")
    shape = dict(heads=heads, seq_len=seq_len, kv_len=seq_len, head_dim=channels // heads)
    specs = [
        dict(kind=LayerKind.LINEAR, name="to_q"),
        dict(kind=LayerKind.LINEAR, name="to_k", chain=False),
        dict(kind=LayerKind.LINEAR, name="to_v", chain=False),
        dict(kind=LayerKind.ATTENTION_QK, name="qk", **shape),
        dict(kind=LayerKind.SOFTMAX, name="softmax", **shape),
        dict(kind=LayerKind.ATTENTION_AV, name="av", **shape),
        dict(kind=LayerKind.LINEAR, name="to_out"),
    ]
    return _block_graph(f"attention-{seq_len}", seq_len, channels, specs)


def ffn_block(seq_len: int, channels: Optional[int] = None) -> NetworkGraph:
    """Layernorm, GEGLU feed-forward and the residual add, at the level's own width."""
    c = channels or level_width(seq_len)
    specs = [
        dict(kind=LayerKind.LAYERNORM, name="norm"),
        dict(kind=LayerKind.LINEAR, name="ff.proj", c_out=8 * c),
        dict(kind=LayerKind.GELU, name="ff.gelu", c_in=4 * c, c_out=4 * c),
        dict(kind=LayerKind.LINEAR, name="ff.out", c_in=4 * c),
        dict(kind=LayerKind.ADD, name="residual"),
    ]
    return _block_graph(f"ffn-{seq_len}", seq_len, c, specs)


def simulate_attention(
    graph: NetworkGraph,
    plan: Optional[SchedulePlan] = None,
    hw: Optional[HardwareConfig] = None,
    switches: Optional[AblationSwitches] = None,
) -> StatsTotal:
    """Aggregate stats of a transformer sub-block graph (attention or feed-forward)."""
    hw = hw or HardwareConfig()
    switches = switches or AblationSwitches()
    if not any(l.kind in MATMUL_KINDS for l in graph.layers):
        raise TopologyError(f"Block graph {graph.model_id} has no matmul layers")
    plan = plan or plan_for(graph, hw, switches)
    stats = simulate_layers(graph, plan, hw, switches)
    check_layer_invariants(stats, hw)
    total = StatsTotal()
    for s in stats:
        total.add(s)
    return total


def _streaming_gain(graph: NetworkGraph, hw: HardwareConfig) -> Dict[str, float]:
    blocking = simulate_attention(graph, hw=hw, switches=AblationSwitches(True, True, False))
    streaming = simulate_attention(graph, hw=hw, switches=AblationSwitches(True, True, True))
    return {
        "seq_len": graph.layers[0].row_count,
        "channels": graph.layers[0].c_in,
        "blocking_cycles": blocking.cycles_total,
        "streaming_cycles": streaming.cycles_total,
        "reduction": 1.0 - streaming.cycles_total / blocking.cycles_total,
    }


def benchmark_attention(seq_len: int, hw: Optional[HardwareConfig] = None,
                        channels: int = ATTENTION_BENCH_WIDTH, heads: int = ATTENTION_BENCH_HEADS) -> Dict[str, float]:
    """Latency reduction from streaming the softmax of one self-attention block."""
    return _streaming_gain(attention_block(seq_len, channels, heads), hw or HardwareConfig())


def benchmark_ffn(seq_len: int, hw: Optional[HardwareConfig] = None, channels: Optional[int] = None) -> Dict[str, float]:
    return _streaming_gain(ffn_block(seq_len, channels), hw or HardwareConfig())


def streaming_study(seq_lens: Sequence[int] = (4096, 1024, 256),
                    hw: Optional[HardwareConfig] = None) -> Dict[str, List[Dict[str, float]]]:
    hw = hw or HardwareConfig()
    return {
        "attention": [benchmark_attention(n, hw) for n in seq_lens],
        "ffn": [benchmark_ffn(n, hw) for n in seq_lens],
    }


# ---- ablation ----------------------------------------------------------------


@dataclass
class AblationResult:
    label: str
    switches: AblationSwitches
    report: SimReport
    speedup: float = 1.0


def ablation_grid(
    graph: NetworkGraph,
    hw: Optional[HardwareConfig] = None,
    sampling_plan: Optional[Any] = None,
    steps: Sequence[AblationSwitches] = ABLATION_STEPS,
    max_workers: int = 4,
) -> List[AblationResult]:
    """
    Simulate each switch setting in ``steps``; speedups are relative to the first.

    Settings share nothing, so they run on a thread pool.
    """
    hw = hw or HardwareConfig()
    if not steps:
        raise ValueError("ablation_grid needs at least one switch setting")

    def run(sw: AblationSwitches) -> SimReport:
        return simulate_network(graph, sampling_plan=sampling_plan, hw=hw, switches=sw)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        reports = list(pool.map(run, steps))
    base = reports[0].total.cycles_total
    results = [AblationResult(sw.label, sw, r, base / r.total.cycles_total) for sw, r in zip(steps, reports)]
    for r in results:
        logger.info(f"Ablation {graph.model_id} {r.label}: {r.speedup:.3f}x")
    return results


# ---- output ------------------------------------------------------------------


def ablation_summary(results: Sequence[AblationResult]) -> List[Dict[str, Any]]:
    return [
        {
            "label": r.label,
            "switches": r.switches,
            "cycles": r.report.total.cycles_total,
            "latency_s": r.report.latency_s,
            "dram_bytes": r.report.total.dram_bytes,
            "energy_j": r.report.total.energy_j,
            "speedup": r.speedup,
        }
        for r in results
    ]


def write_report(report: SimReport, out_dir: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Dict[str, Path]:
    """Write report.json, layers.csv and roofline.csv into ``out_dir``; ``extra`` joins the JSON document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "layers": out / "layers.csv", "roofline": out / "roofline.csv"}
    doc = {"report": report, "energy": energy_breakdown(report), "average_intensity": average_intensity(report)}
    doc.update(extra or {})
    doc["schema_version"] = SCHEMA_VERSION
    dump_json(doc, paths["report"])
    write_csv(
        paths["layers"],
        LAYERS_HEADER,
        ((s.layer_id, s.cycles_total, s.dram_bytes, s.energy_j, s.op_intensity, s.attained_mac_per_s)
         for s in report.layers),
    )
    write_csv(
        paths["roofline"],
        ROOFLINE_HEADER,
        ((p.layer_id, p.op_intensity, p.attained, p.bound) for p in roofline_points(report)),
    )
    logger.info(f"Wrote simulation report to {out}")
    return paths
