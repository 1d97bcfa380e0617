# src/sdacc_sim/scheduler.py
"""
Reuse and fusion planning against a global on-chip buffer.

Every matmul layer (conv, linear, attention) gets a reuse mode and a tiling;
consecutive layers on the main data path may then be fused so their
intermediate activations never leave the chip. Vector layers run on the VPU
out of the same buffers and carry no DRAM traffic of their own.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import InfeasiblePlanError
from .models import ATTENTION_KINDS, CONV_KINDS, MATMUL_KINDS, Footprint, LayerDescriptor, LayerKind, NetworkGraph
from .utils import SCHEMA_VERSION, check_schema, dump_json, to_serializable
from .workload import conv_stack, layer_footprint

logger = logging.getLogger(__name__)

MIB = 1 << 20
KIB = 1 << 10


class ReuseMode(str, Enum):
    INPUT_REUSE = "input_reuse"
    WEIGHT_REUSE = "weight_reuse"
    BOTH_TILED = "both_tiled"


class Tiling(str, Enum):
    SINGLE = "single"              # one operand fully resident
    WEIGHT_TILES = "weight_tiles"  # weight tiles resident, input re-read per tile
    INPUT_TILES = "input_tiles"    # input tiles resident, weights re-read per tile
    CIN_SPLIT = "cin_split"        # input-channel split, partial sums spilled


class FusionKind(str, Enum):
    NONE = "none"
    LAYER_BY_LAYER = "layer_by_layer"
    CROSS_LAYER = "cross_layer"


@dataclass(frozen=True)
class SchedulerConfig:
    buffer_bytes: int = 2 * MIB
    # Largest share of the buffer one resident operand may take; the rest
    # holds the streamed operand's working tiles.
    resident_share: float = 0.75
    bytes_per_element: int = 2
    staging_bytes: int = 64 * KIB
    array_width: int = 32

    def __post_init__(self) -> None:
        if self.buffer_bytes <= 0:
            raise ValueError(f"buffer_bytes must be positive, got {self.buffer_bytes}")
        if not 0 < self.resident_share <= 1:
            raise ValueError(f"resident_share must be in (0, 1], got {self.resident_share}")

    @property
    def share_bytes(self) -> int:
        return int(self.buffer_bytes * self.resident_share)


@dataclass(frozen=True)
class TileConfig:
    L0: int
    cin0: int
    cout0: int


@dataclass
class TrafficEstimate:
    weight_read: int = 0
    act_in_read: int = 0
    act_out_read: int = 0
    act_out_write: int = 0

    @property
    def read_bytes(self) -> int:
        return self.weight_read + self.act_in_read + self.act_out_read

    @property
    def write_bytes(self) -> int:
        return self.act_out_write

    @property
    def total(self) -> int:
        return self.read_bytes + self.write_bytes

    def __add__(self, other: "TrafficEstimate") -> "TrafficEstimate":
        return TrafficEstimate(
            self.weight_read + other.weight_read,
            self.act_in_read + other.act_in_read,
            self.act_out_read + other.act_out_read,
            self.act_out_write + other.act_out_write,
        )


@dataclass
class LayerSchedule:
    layer_id: int
    tile: TileConfig
    reuse: ReuseMode
    tiling: Tiling = Tiling.SINGLE
    group_id: int = -1
    fusion: FusionKind = FusionKind.NONE


@dataclass
class FusionGroup:
    group_id: int
    kind: FusionKind
    layer_ids: List[int]


@dataclass
class FusionPlan:
    groups: List[FusionGroup] = field(default_factory=list)


@dataclass
class SchedulePlan:
    model_id: str
    config: SchedulerConfig
    layers: Dict[int, LayerSchedule]
    fusion: FusionPlan
    adaptive: bool = True
    im2col: bool = False

    def covers(self, layer_id: int) -> bool:
        return layer_id in self.layers


@dataclass
class TrafficReport:
    per_layer: Dict[int, TrafficEstimate]
    total: TrafficEstimate


# ---- per-layer reuse ---------------------------------------------------------


def planning_footprint(layer: LayerDescriptor, bpe: int, im2col: bool = False) -> Footprint:
    """Footprint as the dataflow sees it; im2col lowering reads each input pixel once per kernel tap."""
    fp = layer_footprint(layer, bpe)
    if im2col and layer.kernel > 1 and layer.kind in CONV_KINDS:
        lowered = layer.out_len * layer.kernel * layer.kernel * layer.c_in * bpe
        return Footprint(fp.layer_id, fp.weight_bytes, lowered, fp.act_out_bytes)
    return fp


def tile_config(layer: LayerDescriptor, config: SchedulerConfig) -> TileConfig:
    rows = layer.seq_len if layer.kind in ATTENTION_KINDS else (
        layer.row_count if layer.kind is LayerKind.LINEAR else layer.spatial_len
    )
    l0 = max(1, min(rows, config.staging_bytes // (config.array_width * config.bytes_per_element)))
    return TileConfig(L0=l0, cin0=config.array_width, cout0=config.array_width)


def tiling_traffic(fp: Footprint, tiling: Tiling, share: int) -> TrafficEstimate:
    w, a, out = fp.weight_bytes, fp.act_in_bytes, fp.act_out_bytes
    if tiling is Tiling.SINGLE:
        return TrafficEstimate(w, a, 0, out)
    if tiling is Tiling.WEIGHT_TILES:
        return TrafficEstimate(w, a * max(1, math.ceil(w / share)), 0, out)
    if tiling is Tiling.INPUT_TILES:
        return TrafficEstimate(w * max(1, math.ceil(a / share)), a, 0, out)
    k = max(1, math.ceil(a / share))
    return TrafficEstimate(w, a, out * (k - 1), out * k)


def _best_tiled(fp: Footprint, share: int) -> Tuple[Tiling, TrafficEstimate]:
    options = [(t, tiling_traffic(fp, t, share)) for t in (Tiling.WEIGHT_TILES, Tiling.INPUT_TILES, Tiling.CIN_SPLIT)]
    return min(options, key=lambda o: o[1].total)


def select_reuse(fp: Footprint, share: int) -> Tuple[ReuseMode, Tiling, TrafficEstimate]:
    """Cheapest feasible mode; ties go to weight_reuse."""
    candidates: List[Tuple[int, int, ReuseMode, Tiling, TrafficEstimate]] = []
    if fp.weight_bytes <= share:
        est = tiling_traffic(fp, Tiling.SINGLE, share)
        candidates.append((est.total, 0, ReuseMode.WEIGHT_REUSE, Tiling.SINGLE, est))
    if fp.act_in_bytes <= share:
        est = tiling_traffic(fp, Tiling.SINGLE, share)
        candidates.append((est.total, 1, ReuseMode.INPUT_REUSE, Tiling.SINGLE, est))
    tiling, est = _best_tiled(fp, share)
    candidates.append((est.total, 2, ReuseMode.BOTH_TILED, tiling, est))
    _, _, mode, tiling, est = min(candidates, key=lambda c: (c[0], c[1]))
    return mode, tiling, est


def choose_reuse(fp: Footprint, buffer_bytes: int, resident_share: float = 0.75) -> Tuple[ReuseMode, TrafficEstimate]:
    """Reuse mode with the least DRAM traffic for one layer."""
    if buffer_bytes <= 0:
        raise ValueError(f"buffer_bytes must be positive, got {buffer_bytes}")
    mode, _, est = select_reuse(fp, int(buffer_bytes * resident_share))
    return mode, est


def fixed_weight_reuse(fp: Footprint, share: int) -> Tuple[ReuseMode, Tiling]:
    """Baseline dataflow: weights stationary, tiled when they do not fit."""
    if fp.weight_bytes <= share:
        return ReuseMode.WEIGHT_REUSE, Tiling.SINGLE
    return ReuseMode.BOTH_TILED, Tiling.WEIGHT_TILES


def resident_weight_bytes(layer: LayerDescriptor, fp: Footprint, bpe: int) -> int:
    """Weight bytes held on chip; attention keeps one head of K or V at a time."""
    if layer.kind in ATTENTION_KINDS:
        return layer.kv_len * layer.head_dim * bpe
    return fp.weight_bytes


# ---- fusion ------------------------------------------------------------------


def _edge_saving(prev: LayerDescriptor, prev_fp: Footprint, cur_fp: Footprint) -> int:
    read = min(prev_fp.act_out_bytes, cur_fp.act_in_bytes)
    write = 0 if prev.skip_source else prev_fp.act_out_bytes
    return read + write


def lbl_fits(fp: Footprint, buffer_bytes: int) -> bool:
    """A layer_by_layer member keeps its whole input and output on chip."""
    return fp.act_in_bytes + fp.act_out_bytes <= buffer_bytes


def row_band_bytes(layer: LayerDescriptor, bpe: int) -> int:
    """Input rows one output row consumes; attention scores stream through staging."""
    if layer.kind in ATTENTION_KINDS:
        return 0
    rows = layer.kernel if layer.kind in CONV_KINDS else 1
    return rows * max(layer.width, 1) * layer.c_in * bpe


def cross_working_set(members: Sequence[LayerDescriptor], footprints: Dict[int, Footprint], bpe: int) -> int:
    """
    Bytes a part-by-part cross_layer group holds on chip.

    Every member's weights stay resident; each intermediate activation is
    kept as the row band its consumer needs for one output row.
    """
    resident = sum(resident_weight_bytes(l, footprints[l.id], bpe) for l in members)
    return resident + sum(row_band_bytes(l, bpe) for l in members[1:])


def _grow_runs(
    seq: Sequence[LayerDescriptor],
    eligible: Callable[[LayerDescriptor], bool],
    extend: Callable[[List[LayerDescriptor], LayerDescriptor], bool],
) -> List[List[LayerDescriptor]]:
    groups: List[List[LayerDescriptor]] = []
    i = 0
    while i < len(seq):
        if not eligible(seq[i]):
            i += 1
            continue
        group = [seq[i]]
        j = i + 1
        while j < len(seq) and eligible(seq[j]) and extend(group, seq[j]):
            group.append(seq[j])
            j += 1
        if len(group) > 1:
            groups.append(group)
        i = j
    return groups


def attention_cores(seq: Sequence[LayerDescriptor]) -> List[List[LayerDescriptor]]:
    """Adjacent qk -> av pairs; the score matrix between them stays on chip."""
    return [
        [prev, cur]
        for prev, cur in zip(seq, seq[1:])
        if prev.kind is LayerKind.ATTENTION_QK and cur.kind is LayerKind.ATTENTION_AV
    ]


def plan_fusion(
    seq: Sequence[LayerDescriptor],
    schedules: Dict[int, LayerSchedule],
    footprints: Dict[int, Footprint],
    config: SchedulerConfig,
) -> FusionPlan:
    """
    Group a chain of layers, each consuming its predecessor's output.

    Attention cores are grouped first, then input-reuse runs (layer_by_layer),
    then cross_layer runs. A layer_by_layer member must hold its whole input
    and output in the buffer. A cross_layer run keeps every member's weights
    resident and passes activations part by part in row bands, so a tiled
    layer whose weights fit alongside the bands may join one; it is then
    switched to weight_reuse. A layer joins a group only if that lowers
    modeled traffic.
    """
    buffer = config.buffer_bytes
    bpe = config.bytes_per_element
    taken: set = set()
    groups: List[Tuple[FusionKind, List[LayerDescriptor]]] = []

    for core in attention_cores(seq):
        groups.append((FusionKind.CROSS_LAYER, core))
        taken.update(l.id for l in core)

    def lbl_member(l: LayerDescriptor) -> bool:
        return (l.id not in taken and schedules[l.id].reuse is ReuseMode.INPUT_REUSE
                and lbl_fits(footprints[l.id], buffer))

    def extend_lbl(group: List[LayerDescriptor], cur: LayerDescriptor) -> bool:
        prev = group[-1]
        return _edge_saving(prev, footprints[prev.id], footprints[cur.id]) > 0

    for run in _grow_runs(seq, lbl_member, extend_lbl):
        groups.append((FusionKind.LAYER_BY_LAYER, run))
        taken.update(l.id for l in run)

    def cross_member(l: LayerDescriptor) -> bool:
        if l.id in taken:
            return False
        reuse = schedules[l.id].reuse
        return reuse is ReuseMode.WEIGHT_REUSE or (
            reuse is ReuseMode.BOTH_TILED and footprints[l.id].weight_bytes <= buffer
        )

    def extend_cross(group: List[LayerDescriptor], cur: LayerDescriptor) -> bool:
        if cross_working_set(group + [cur], footprints, bpe) > buffer:
            return False
        prev = group[-1]
        return _edge_saving(prev, footprints[prev.id], footprints[cur.id]) > 0

    for run in _grow_runs(seq, cross_member, extend_cross):
        groups.append((FusionKind.CROSS_LAYER, run))
        taken.update(l.id for l in run)
        for l in run:
            if schedules[l.id].reuse is ReuseMode.BOTH_TILED:
                schedules[l.id].reuse, schedules[l.id].tiling = ReuseMode.WEIGHT_REUSE, Tiling.SINGLE

    groups.sort(key=lambda g: g[1][0].id)
    plan = FusionPlan([FusionGroup(n, kind, [l.id for l in members]) for n, (kind, members) in enumerate(groups)])
    for group in plan.groups:
        for lid in group.layer_ids:
            schedules[lid].group_id = group.group_id
            schedules[lid].fusion = group.kind
        logger.debug(f"Fusion group {group.group_id}: {group.kind.value} over layers {group.layer_ids}")
    return plan


# ---- whole-plan construction -------------------------------------------------


def main_path(layers: Iterable[LayerDescriptor]) -> List[LayerDescriptor]:
    """Matmul layers that consume the previous one's output, plus the chain head."""
    seq: List[LayerDescriptor] = []
    for layer in layers:
        if layer.kind in MATMUL_KINDS and (layer.chain or not seq):
            seq.append(layer)
    return seq


def plan_schedule(
    graph: NetworkGraph,
    config: Optional[SchedulerConfig] = None,
    adaptive: bool = True,
    layers: Optional[Sequence[LayerDescriptor]] = None,
    im2col: bool = False,
) -> SchedulePlan:
    """
    Plan every matmul layer of ``graph`` (or the given chain of ``layers``).

    ``adaptive=False`` yields the fixed weight-reuse, unfused baseline;
    ``im2col=True`` plans convolutions on their lowered input matrices.
    """
    config = config or SchedulerConfig()
    share = config.share_bytes
    bpe = config.bytes_per_element
    chain_only = layers is not None
    targets = list(layers) if chain_only else [l for l in graph.layers if l.kind in MATMUL_KINDS]
    footprints = {l.id: planning_footprint(l, bpe, im2col) for l in targets}

    schedules: Dict[int, LayerSchedule] = {}
    for layer in targets:
        fp = footprints[layer.id]
        if layer.kind in ATTENTION_KINDS:
            mode, tiling = ReuseMode.WEIGHT_REUSE, Tiling.SINGLE
        elif adaptive:
            mode, tiling, _ = select_reuse(fp, share)
        else:
            mode, tiling = fixed_weight_reuse(fp, share)
        schedules[layer.id] = LayerSchedule(layer.id, tile_config(layer, config), mode, tiling)

    fusion = FusionPlan()
    if adaptive:
        seq = targets if chain_only else main_path(targets)
        fusion = plan_fusion(seq, schedules, footprints, config)
    elif not chain_only:
        # The score matrix never round-trips DRAM, even in the baseline.
        cores = attention_cores(main_path(targets))
        fusion = FusionPlan([FusionGroup(n, FusionKind.CROSS_LAYER, [l.id for l in core]) for n, core in enumerate(cores)])
        for group in fusion.groups:
            for lid in group.layer_ids:
                schedules[lid].group_id, schedules[lid].fusion = group.group_id, group.kind

    plan = SchedulePlan(graph.model_id, config, schedules, fusion, adaptive, im2col)
    logger.info(
        f"Planned {len(schedules)} layers of {graph.model_id} "
        f"({'adaptive' if adaptive else 'baseline'}), {len(fusion.groups)} fusion groups"
    )
    return plan


def baseline_plan(graph: NetworkGraph, config: Optional[SchedulerConfig] = None,
                  layers: Optional[Sequence[LayerDescriptor]] = None, im2col: bool = False) -> SchedulePlan:
    return plan_schedule(graph, config, adaptive=False, layers=layers, im2col=im2col)


# ---- traffic -----------------------------------------------------------------


def validate_plan(graph: NetworkGraph, plan: SchedulePlan) -> None:
    """Raise InfeasiblePlanError naming the first violated constraint."""
    cfg = plan.config
    share, bpe = cfg.share_bytes, cfg.bytes_per_element
    fps = {lid: planning_footprint(graph.layer(lid), bpe, plan.im2col) for lid in plan.layers}
    # Cross-layer members are bounded by their group's working set instead of the share.
    cross = {lid for g in plan.fusion.groups if g.kind is FusionKind.CROSS_LAYER for lid in g.layer_ids}
    for lid, sched in plan.layers.items():
        layer = graph.layer(lid)
        fp = fps[lid]
        if layer.kind in ATTENTION_KINDS:
            continue
        if sched.reuse is ReuseMode.INPUT_REUSE and fp.act_in_bytes > share:
            raise InfeasiblePlanError(
                f"Layer {layer.name or lid}: input_reuse needs act_in {fp.act_in_bytes} <= resident share {share}"
            )
        if sched.reuse is ReuseMode.WEIGHT_REUSE and fp.weight_bytes > share and lid not in cross:
            raise InfeasiblePlanError(
                f"Layer {layer.name or lid}: weight_reuse needs weights {fp.weight_bytes} <= resident share {share}"
            )
    for group in plan.fusion.groups:
        members = [graph.layer(lid) for lid in group.layer_ids]
        if group.kind is FusionKind.CROSS_LAYER:
            if any(plan.layers[l.id].reuse is not ReuseMode.WEIGHT_REUSE for l in members):
                raise InfeasiblePlanError(f"Fusion group {group.group_id}: cross_layer members must use weight_reuse")
            working = cross_working_set(members, fps, bpe)
            if working > cfg.buffer_bytes:
                raise InfeasiblePlanError(
                    f"Fusion group {group.group_id}: cross_layer weights plus row bands {working} "
                    f"exceed buffer {cfg.buffer_bytes}"
                )
        elif group.kind is FusionKind.LAYER_BY_LAYER:
            if any(plan.layers[l.id].reuse is not ReuseMode.INPUT_REUSE for l in members):
                raise InfeasiblePlanError(f"Fusion group {group.group_id}: layer_by_layer members must use input_reuse")
            for l in members:
                fp = fps[l.id]
                if not lbl_fits(fp, cfg.buffer_bytes):
                    raise InfeasiblePlanError(
                        f"Layer {l.name or l.id}: layer_by_layer needs act_in + act_out "
                        f"{fp.act_in_bytes + fp.act_out_bytes} <= buffer {cfg.buffer_bytes}"
                    )


def traffic_model(graph: NetworkGraph, plan: SchedulePlan) -> TrafficReport:
    """DRAM bytes per planned layer with fused intermediates removed."""
    validate_plan(graph, plan)
    cfg = plan.config
    bpe = cfg.bytes_per_element
    fps = {lid: planning_footprint(graph.layer(lid), bpe, plan.im2col) for lid in plan.layers}
    per_layer = {lid: tiling_traffic(fps[lid], s.tiling, cfg.share_bytes) for lid, s in sorted(plan.layers.items())}

    for group in plan.fusion.groups:
        for prev_id, cur_id in zip(group.layer_ids, group.layer_ids[1:]):
            prev = graph.layer(prev_id)
            saved_read = min(fps[prev_id].act_out_bytes, per_layer[cur_id].act_in_read)
            per_layer[cur_id].act_in_read -= saved_read
            if not prev.skip_source:
                per_layer[prev_id].act_out_write -= min(fps[prev_id].act_out_bytes, per_layer[prev_id].act_out_write)

    total = TrafficEstimate()
    for est in per_layer.values():
        total = total + est
    return TrafficReport(per_layer, total)


def conv_stack_study(graph: NetworkGraph, config: Optional[SchedulerConfig] = None) -> Dict[str, float]:
    """Baseline, adaptive-reuse and fused traffic over the 3x3 conv stack."""
    config = config or SchedulerConfig()
    stack = conv_stack(graph)
    base = traffic_model(graph, baseline_plan(graph, config, layers=stack)).total.total
    adaptive = plan_schedule(graph, config, layers=stack)
    fused = traffic_model(graph, adaptive).total.total
    # Per-layer reuse choice alone; fusion may still switch tiled members to weight_reuse.
    unfused = sum(select_reuse(layer_footprint(l, config.bytes_per_element), config.share_bytes)[2].total for l in stack)
    return {
        "baseline_bytes": base,
        "reuse_bytes": unfused,
        "fused_bytes": fused,
        "reuse_saving": 1.0 - unfused / base,
        "total_saving": 1.0 - fused / base,
    }


def buffer_sweep(graph: NetworkGraph, sizes: Sequence[int], config: Optional[SchedulerConfig] = None) -> Dict[int, float]:
    """Fused conv-stack traffic per buffer size, normalized to the first size."""
    config = config or SchedulerConfig()
    stack = conv_stack(graph)
    totals = {}
    for size in sizes:
        cfg = SchedulerConfig(size, config.resident_share, config.bytes_per_element, config.staging_bytes, config.array_width)
        totals[size] = traffic_model(graph, plan_schedule(graph, cfg, layers=stack)).total.total
    ref = totals[sizes[0]]
    return {size: totals[size] / ref for size in sizes}


# ---- serialization -----------------------------------------------------------


def plan_to_dict(plan: SchedulePlan) -> Dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "model_id": plan.model_id,
        "adaptive": plan.adaptive,
        "im2col": plan.im2col,
        "config": to_serializable(plan.config),
        "layers": [to_serializable(plan.layers[lid]) for lid in sorted(plan.layers)],
        "groups": to_serializable(plan.fusion.groups),
    }


def plan_from_dict(data: Dict, source: str = "plan") -> SchedulePlan:
    check_schema(data, source)
    try:
        config = SchedulerConfig(**data["config"])
        layers = {}
        for entry in data["layers"]:
            layers[int(entry["layer_id"])] = LayerSchedule(
                layer_id=int(entry["layer_id"]),
                tile=TileConfig(**entry["tile"]),
                reuse=ReuseMode(entry["reuse"]),
                tiling=Tiling(entry.get("tiling", "single")),
                group_id=int(entry.get("group_id", -1)),
                fusion=FusionKind(entry.get("fusion", "none")),
            )
        groups = [FusionGroup(int(g["group_id"]), FusionKind(g["kind"]), [int(x) for x in g["layer_ids"]])
                  for g in data.get("groups", [])]
    except (KeyError, TypeError, ValueError) as e:
        raise InfeasiblePlanError(f"Malformed schedule plan in {source}: {e}") from e
    return SchedulePlan(data.get("model_id", "custom"), config, layers, FusionPlan(groups),
                        bool(data.get("adaptive", True)), bool(data.get("im2col", False)))


def save_schedule(plan: SchedulePlan, path: Union[str, Path]) -> None:
    dump_json(plan_to_dict(plan), Path(path))


def load_schedule(path: Union[str, Path]) -> SchedulePlan:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise InfeasiblePlanError(f"Failed to read schedule plan {path}: {e}") from e
    return plan_from_dict(data, str(path))
