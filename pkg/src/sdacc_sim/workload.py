# src/sdacc_sim/workload.py
"""
U-Net topology construction and workload accounting.

Topologies ship as JSON data files under ``sdacc_sim/data``. Each block is
either a list of compact ``units`` (resnet, transformer, ...) expanded by
:class:`TopologyBuilder`, or an explicit ``layers`` list of LayerDescriptor
fields. Everything here is shapes and counts; no tensor data is touched.
"""
from __future__ import annotations

import json
import logging
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .errors import SchemaVersionError, TopologyError
from .models import (
    CONV_KINDS,
    FULL_DEPTH,
    MATMUL_KINDS,
    BlockId,
    Footprint,
    LayerDescriptor,
    LayerKind,
    MacBreakdown,
    NetworkGraph,
    Side,
)
from .utils import check_schema, write_csv

logger = logging.getLogger(__name__)

MODEL_IDS = ("sd14", "sd21base", "sdxl")
MAX_MACS = 2**63 - 1

# Layer kinds a module-level MAC profiler sees (parameterized conv / linear modules).
PROFILED_KINDS = frozenset(CONV_KINDS | {LayerKind.LINEAR})
COST_BASES = ("profiled", "all")

MACS_HEADER = ["layer_id", "kind", "block", "macs", "weight_bytes", "act_in_bytes", "act_out_bytes"]
FOOTPRINT_HEADER = ["layer_id", "kind", "block", "weight_bytes", "act_in_bytes", "act_out_bytes"]


def load_topology(path: Union[str, Path]) -> Dict[str, Any]:
    """Read and schema-check a topology file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise TopologyError(f"Topology file not found: {path}")
    except (OSError, ValueError) as e:
        raise TopologyError(f"Failed to parse topology file {path}: {e}") from e
    if not isinstance(data, dict):
        raise TopologyError(f"Topology file {path} must contain a JSON object")
    try:
        check_schema(data, str(path))
    except SchemaVersionError as e:
        raise TopologyError(str(e)) from e
    return data


def _bundled_topology(model_id: str) -> Dict[str, Any]:
    if model_id not in MODEL_IDS:
        raise TopologyError(f"Unknown model_id '{model_id}'. Known models: {', '.join(MODEL_IDS)}")
    ref = resources.files("sdacc_sim").joinpath("data", f"{model_id}.json")
    with resources.as_file(ref) as path:
        return load_topology(path)


class TopologyBuilder:
    """Expands a topology document into an ordered list of layers."""

    def __init__(self, doc: Dict[str, Any], latent_h: Optional[int] = None, latent_w: Optional[int] = None):
        self.doc = doc
        try:
            self.base_h = int(doc["latent_h"])
            self.base_w = int(doc.get("latent_w", self.base_h))
            self.context_len = int(doc.get("context_len", 77))
            self.context_dim = int(doc.get("context_dim", 768))
            self.time_embed_dim = int(doc.get("time_embed_dim", 1280))
        except (KeyError, TypeError, ValueError) as e:
            raise TopologyError(f"Topology header is incomplete: {e}") from e
        self.latent_h = latent_h or self.base_h
        self.latent_w = latent_w or self.base_w
        attention = doc.get("attention", {}) or {}
        self.heads = attention.get("heads")
        self.head_dim = attention.get("head_dim")
        if not self.heads and not self.head_dim:
            self.heads = 8
        self.linear_proj = attention.get("proj", "conv") == "linear"
        self.layers: List[LayerDescriptor] = []
        self._block: Optional[BlockId] = None

    # ---- geometry ----------------------------------------------------------

    def _grid(self, res: int) -> Tuple[int, int]:
        if res <= 0 or self.base_h % res:
            raise TopologyError(f"Unit resolution {res} does not divide latent height {self.base_h}")
        factor = self.base_h // res
        if self.latent_h % factor or self.latent_w % factor:
            raise TopologyError(
                f"Latent {self.latent_h}x{self.latent_w} is not divisible by downsampling factor {factor}"
            )
        return self.latent_h // factor, self.latent_w // factor

    def _attention_shape(self, c: int) -> Tuple[int, int]:
        if self.head_dim:
            heads, head_dim = c // int(self.head_dim), int(self.head_dim)
        else:
            heads, head_dim = int(self.heads), c // int(self.heads)
        if heads * head_dim != c:
            raise TopologyError(f"Channel count {c} is not divisible into attention heads")
        return heads, head_dim

    # ---- emission ----------------------------------------------------------

    def _emit(self, kind: LayerKind, name: str, **fields: Any) -> LayerDescriptor:
        layer = LayerDescriptor(
            id=len(self.layers), kind=kind, block_ref=self._block, name=f"{self._block}.{name}", **fields
        )
        self.layers.append(layer)
        return layer

    def _vector(self, kind: LayerKind, name: str, h: int, w: int, c: int, rows: int = 0) -> None:
        self._emit(kind, name, height=h, width=w, c_in=c, c_out=c, rows=rows)

    def _conv(self, name: str, h: int, w: int, c_in: int, c_out: int, kernel: int = 3,
              stride: int = 1, chain: bool = True) -> None:
        kind = LayerKind.CONV1X1 if kernel == 1 else LayerKind.CONV3X3
        if stride == 2:
            kind = LayerKind.DOWNSAMPLE_CONV
        self._emit(kind, name, height=h, width=w, c_in=c_in, c_out=c_out, kernel=kernel, stride=stride, chain=chain)

    def _linear(self, name: str, h: int, w: int, c_in: int, c_out: int, rows: int = 0, chain: bool = True) -> None:
        self._emit(LayerKind.LINEAR, name, height=h, width=w, c_in=c_in, c_out=c_out, rows=rows, chain=chain)

    # ---- units -------------------------------------------------------------

    def unit_conv(self, u: Dict[str, Any], prefix: str) -> None:
        h, w = self._grid(u["res"])
        self._conv(f"{prefix}conv", h, w, u["c_in"], u["c_out"], chain=False)

    def unit_time_embed(self, u: Dict[str, Any], prefix: str) -> None:
        self._linear(f"{prefix}linear1", 1, 1, u["c_in"], u["c_out"], rows=1, chain=False)
        self._vector(LayerKind.SILU, f"{prefix}act", 1, 1, u["c_out"], rows=1)
        self._linear(f"{prefix}linear2", 1, 1, u["c_out"], u["c_out"], rows=1, chain=False)

    def unit_resnet(self, u: Dict[str, Any], prefix: str) -> None:
        h, w = self._grid(u["res"])
        ci, co = u["c_in"], u["c_out"]
        skip_c = u.get("skip_c", 0)
        if skip_c:
            self._emit(LayerKind.CONCAT, f"{prefix}concat", height=h, width=w, c_in=ci - skip_c, c_out=ci)
        self._vector(LayerKind.GROUPNORM, f"{prefix}norm1", h, w, ci)
        self._vector(LayerKind.SILU, f"{prefix}act1", h, w, ci)
        self._conv(f"{prefix}conv1", h, w, ci, co)
        self._linear(f"{prefix}time_proj", 1, 1, self.time_embed_dim, co, rows=1, chain=False)
        self._vector(LayerKind.ADD, f"{prefix}time_add", h, w, co)
        self._vector(LayerKind.GROUPNORM, f"{prefix}norm2", h, w, co)
        self._vector(LayerKind.SILU, f"{prefix}act2", h, w, co)
        self._conv(f"{prefix}conv2", h, w, co, co)
        if ci != co:
            self._conv(f"{prefix}shortcut", h, w, ci, co, kernel=1, chain=False)
        self._vector(LayerKind.ADD, f"{prefix}residual", h, w, co)

    def _attention(self, prefix: str, h: int, w: int, c: int, kv_len: int, kv_dim: int) -> None:
        seq = h * w
        heads, head_dim = self._attention_shape(c)
        kv_rows = 0 if kv_len == seq else kv_len
        self._linear(f"{prefix}to_q", h, w, c, c)
        self._linear(f"{prefix}to_k", h, w, kv_dim, c, rows=kv_rows, chain=False)
        self._linear(f"{prefix}to_v", h, w, kv_dim, c, rows=kv_rows, chain=False)
        shape = dict(height=h, width=w, c_in=c, c_out=c, seq_len=seq, kv_len=kv_len, heads=heads, head_dim=head_dim)
        self._emit(LayerKind.ATTENTION_QK, f"{prefix}qk", **shape)
        self._emit(LayerKind.SOFTMAX, f"{prefix}softmax", **shape)
        self._emit(LayerKind.ATTENTION_AV, f"{prefix}av", **shape)
        self._linear(f"{prefix}to_out", h, w, c, c)
        self._vector(LayerKind.ADD, f"{prefix}residual", h, w, c)

    def unit_transformer(self, u: Dict[str, Any], prefix: str) -> None:
        h, w = self._grid(u["res"])
        c = u["c"]
        self._vector(LayerKind.GROUPNORM, f"{prefix}norm", h, w, c)
        if self.linear_proj:
            self._linear(f"{prefix}proj_in", h, w, c, c)
        else:
            self._conv(f"{prefix}proj_in", h, w, c, c, kernel=1)
        for d in range(int(u.get("depth", 1))):
            p = f"{prefix}t{d}."
            self._vector(LayerKind.LAYERNORM, f"{p}norm1", h, w, c)
            self._attention(f"{p}attn1.", h, w, c, h * w, c)
            self._vector(LayerKind.LAYERNORM, f"{p}norm2", h, w, c)
            self._attention(f"{p}attn2.", h, w, c, self.context_len, self.context_dim)
            self._vector(LayerKind.LAYERNORM, f"{p}norm3", h, w, c)
            self._linear(f"{p}ff.proj", h, w, c, 8 * c)
            self._vector(LayerKind.GELU, f"{p}ff.gelu", h, w, 4 * c)
            self._linear(f"{p}ff.out", h, w, 4 * c, c)
            self._vector(LayerKind.ADD, f"{p}ff.residual", h, w, c)
        if self.linear_proj:
            self._linear(f"{prefix}proj_out", h, w, c, c)
        else:
            self._conv(f"{prefix}proj_out", h, w, c, c, kernel=1)
        self._vector(LayerKind.ADD, f"{prefix}residual", h, w, c)

    def unit_downsample(self, u: Dict[str, Any], prefix: str) -> None:
        h, w = self._grid(u["res"])
        self._conv(f"{prefix}conv", h, w, u["c"], u["c"], stride=2)

    def unit_upsample(self, u: Dict[str, Any], prefix: str) -> None:
        h, w = self._grid(u["res"])
        self._emit(LayerKind.UPSAMPLE_NEAREST, f"{prefix}interp", height=h, width=w, c_in=u["c"], c_out=u["c"])
        self._conv(f"{prefix}conv", 2 * h, 2 * w, u["c"], u["c"])

    def unit_conv_out(self, u: Dict[str, Any], prefix: str) -> None:
        h, w = self._grid(u["res"])
        self._vector(LayerKind.GROUPNORM, f"{prefix}norm", h, w, u["c_in"])
        self._vector(LayerKind.SILU, f"{prefix}act", h, w, u["c_in"])
        self._conv(f"{prefix}conv", h, w, u["c_in"], u["c_out"])

    def explicit_layer(self, raw: Dict[str, Any]) -> None:
        fields = dict(raw)
        try:
            kind = LayerKind(fields.pop("kind"))
        except (KeyError, ValueError) as e:
            raise TopologyError(f"Layer in block {self._block} has missing or unknown kind: {e}") from e
        name = fields.pop("name", f"layer{len(self.layers)}")
        if "H" in fields:
            fields["height"] = fields.pop("H")
        if "W" in fields:
            fields["width"] = fields.pop("W")
        try:
            self._emit(kind, name, **fields)
        except TypeError as e:
            raise TopologyError(f"Invalid layer fields in block {self._block}: {e}") from e

    # ---- driver ------------------------------------------------------------

    def build(self) -> List[Tuple[BlockId, List[LayerDescriptor]]]:
        blocks: List[Tuple[BlockId, List[LayerDescriptor]]] = []
        for entry in self.doc.get("blocks", []):
            try:
                block = BlockId(Side(entry["side"]), int(entry.get("index", 0)))
            except (KeyError, ValueError) as e:
                raise TopologyError(f"Invalid block entry {entry!r}: {e}") from e
            self._block = block
            start = len(self.layers)
            if "layers" in entry:
                for raw in entry["layers"]:
                    self.explicit_layer(raw)
            for n, unit in enumerate(entry.get("units", [])):
                handler = getattr(self, f"unit_{unit.get('type')}", None)
                if handler is None:
                    raise TopologyError(f"Unknown unit type '{unit.get('type')}' in block {block}")
                try:
                    handler(unit, f"{unit['type']}{n}.")
                except KeyError as e:
                    raise TopologyError(f"Unit '{unit['type']}' in block {block} is missing field {e}") from e
            if len(self.layers) == start:
                raise TopologyError(f"Block {block} has no layers")
            if block.side is Side.DOWN:
                self._mark_skip_source(start)
            blocks.append((block, self.layers[start:]))
        return blocks

    def _mark_skip_source(self, start: int) -> None:
        for i in range(len(self.layers) - 1, start - 1, -1):
            layer = self.layers[i]
            if layer.kind in MATMUL_KINDS and (layer.chain or i == start):
                self.layers[i] = replace(layer, skip_source=True)
                return


def _validate_layer(layer: LayerDescriptor) -> None:
    if layer.c_in < 1 or layer.c_out < 1:
        raise TopologyError(f"Layer {layer.name}: channels must be >= 1")
    if layer.stride not in (1, 2):
        raise TopologyError(f"Layer {layer.name}: stride must be 1 or 2, got {layer.stride}")
    if layer.kind is LayerKind.CONV1X1 and (layer.stride != 1 or layer.kernel != 1):
        raise TopologyError(f"Layer {layer.name}: conv1x1 requires kernel 1 and stride 1")
    if layer.kind in (LayerKind.CONV3X3, LayerKind.DOWNSAMPLE_CONV) and layer.kernel != 3:
        raise TopologyError(f"Layer {layer.name}: {layer.kind.value} requires kernel 3")
    if layer.kind is LayerKind.DOWNSAMPLE_CONV and layer.stride != 2:
        raise TopologyError(f"Layer {layer.name}: downsample_conv requires stride 2")
    if layer.kind in (LayerKind.ATTENTION_QK, LayerKind.ATTENTION_AV, LayerKind.SOFTMAX):
        if min(layer.seq_len, layer.kv_len, layer.heads) < 1 or (layer.kind is not LayerKind.SOFTMAX and layer.head_dim < 1):
            raise TopologyError(f"Layer {layer.name}: attention layers need seq_len, kv_len, heads and head_dim")


def _validate_blocks(order: List[BlockId]) -> List[Tuple[BlockId, BlockId]]:
    if len(set(order)) != len(order):
        raise TopologyError("Topology lists a block more than once")
    mids = [b for b in order if b.side is Side.MID]
    if len(mids) != 1:
        raise TopologyError(f"Topology must contain exactly one mid block, found {len(mids)}")
    downs = sorted(b.index for b in order if b.side is Side.DOWN)
    ups = sorted(b.index for b in order if b.side is Side.UP)
    if not downs or downs != list(range(1, len(downs) + 1)):
        raise TopologyError(f"Down blocks must be indexed 1..n without gaps, got {downs}")
    if ups != downs:
        raise TopologyError(f"Up blocks {ups} do not mirror down blocks {downs}")
    return [(BlockId(Side.DOWN, i), BlockId(Side.UP, i)) for i in downs]


def build_unet(
    model_id: Optional[str] = None,
    topology: Optional[Union[str, Path]] = None,
    latent_h: Optional[int] = None,
    latent_w: Optional[int] = None,
) -> NetworkGraph:
    """
    Build a NetworkGraph for a bundled model or a custom topology file.

    ``latent_h``/``latent_w`` rescale every spatial level of the bundled topology.
    """
    if topology is not None:
        doc = load_topology(topology)
        source = str(topology)
    elif model_id is not None:
        doc = _bundled_topology(model_id)
        source = f"bundled:{model_id}"
    else:
        raise TopologyError("Either model_id or a topology file is required")

    builder = TopologyBuilder(doc, latent_h=latent_h, latent_w=latent_w)
    built = builder.build()
    order = [block for block, _ in built]
    skips = _validate_blocks(order)
    for layer in builder.layers:
        _validate_layer(layer)

    resolved_id = doc.get("model_id", "custom") if topology is None else "custom"
    graph = NetworkGraph(
        model_id=resolved_id,
        layers=builder.layers,
        skips=skips,
        latent_h=builder.latent_h,
        latent_w=builder.latent_w,
        context_len=builder.context_len,
        context_dim=builder.context_dim,
        latent_channels=int(doc.get("latent_channels", 4)),
        blocks=order,
        extras={k: int(v) for k, v in (doc.get("extras") or {}).items()},
        source=source,
    )
    logger.info(
        f"Built {graph.model_id} U-Net from {source}: {len(graph.layers)} layers, "
        f"{graph.depth} down/up blocks, latent {graph.latent_h}x{graph.latent_w}"
    )
    return graph


# ---- accounting ---------------------------------------------------------------


def layer_macs(layer: LayerDescriptor) -> int:
    """MACs of one layer; vector and data-movement layers count zero."""
    if layer.kind in CONV_KINDS:
        return layer.out_len * layer.c_in * layer.c_out * layer.kernel * layer.kernel
    if layer.kind is LayerKind.LINEAR:
        return layer.row_count * layer.c_in * layer.c_out
    if layer.kind in (LayerKind.ATTENTION_QK, LayerKind.ATTENTION_AV):
        return layer.heads * layer.seq_len * layer.kv_len * layer.head_dim
    return 0


def count_macs(graph: NetworkGraph, kinds: Optional[frozenset] = None) -> MacBreakdown:
    """Per-layer and per-block MAC totals, optionally restricted to ``kinds``."""
    breakdown = MacBreakdown(per_block={block: 0 for block in graph.blocks})
    for layer in graph.layers:
        macs = layer_macs(layer) if kinds is None or layer.kind in kinds else 0
        breakdown.per_layer[layer.id] = macs
        breakdown.per_block[layer.block_ref] = breakdown.per_block.get(layer.block_ref, 0) + macs
        breakdown.total += macs
    if breakdown.total > MAX_MACS:
        raise TopologyError(f"MAC total {breakdown.total} exceeds the 64-bit counter range")
    return breakdown


def step_macs(graph: NetworkGraph, cfg: bool = False, include_extras: bool = False) -> int:
    """Absolute MACs of one denoising step; classifier-free guidance doubles the U-Net pass."""
    total = count_macs(graph).total * (2 if cfg else 1)
    if include_extras:
        total += sum(graph.extras.values())
    return total


def count_params(graph: NetworkGraph) -> int:
    params = 0
    for layer in graph.layers:
        if layer.kind in CONV_KINDS:
            params += layer.kernel * layer.kernel * layer.c_in * layer.c_out + layer.c_out
        elif layer.kind is LayerKind.LINEAR:
            params += layer.c_in * layer.c_out + layer.c_out
        elif layer.kind in (LayerKind.GROUPNORM, LayerKind.LAYERNORM):
            params += 2 * layer.c_in
    return params


def executed_blocks(graph: NetworkGraph, l: int) -> List[BlockId]:
    """Blocks run when only the top ``l`` down/up blocks execute (l = 13 is the whole network)."""
    if not 1 <= l <= FULL_DEPTH:
        raise ValueError(f"Depth l must be in [1, {FULL_DEPTH}], got {l}")
    if l == FULL_DEPTH:
        return list(graph.blocks)
    return [b for b in graph.blocks if b.side is not Side.MID and b.index <= l]


def cost_function(graph: NetworkGraph, l: int, basis: str = "profiled") -> float:
    """Fraction of the per-step MACs spent in the top ``l`` down and up blocks."""
    if basis not in COST_BASES:
        raise ValueError(f"Unknown cost basis '{basis}', expected one of {COST_BASES}")
    blocks = set(executed_blocks(graph, l))
    breakdown = count_macs(graph, PROFILED_KINDS if basis == "profiled" else None)
    if breakdown.total == 0:
        raise TopologyError("Graph has no MACs on the requested basis")
    if l == FULL_DEPTH:
        return 1.0
    partial = sum(macs for block, macs in breakdown.per_block.items() if block in blocks)
    return partial / breakdown.total


def cost_curve(graph: NetworkGraph, basis: str = "profiled") -> Dict[int, float]:
    return {l: cost_function(graph, l, basis) for l in range(1, FULL_DEPTH + 1)}


def tensor_footprints(graph: NetworkGraph, bytes_per_element: int = 2) -> List[Footprint]:
    if bytes_per_element < 1:
        raise ValueError(f"bytes_per_element must be >= 1, got {bytes_per_element}")
    return [layer_footprint(layer, bytes_per_element) for layer in graph.layers]


def layer_footprint(layer: LayerDescriptor, bpe: int = 2) -> Footprint:
    k = layer.kind
    if k in CONV_KINDS:
        weight = layer.kernel * layer.kernel * layer.c_in * layer.c_out
        act_in = layer.spatial_len * layer.c_in
        act_out = layer.out_len * layer.c_out
    elif k is LayerKind.LINEAR:
        weight = layer.c_in * layer.c_out
        act_in = layer.row_count * layer.c_in
        act_out = layer.row_count * layer.c_out
    elif k is LayerKind.ATTENTION_QK:
        # Q streams in, K is the stationary operand, scores stream out.
        weight = layer.kv_len * layer.heads * layer.head_dim
        act_in = layer.seq_len * layer.heads * layer.head_dim
        act_out = layer.heads * layer.seq_len * layer.kv_len
    elif k is LayerKind.ATTENTION_AV:
        weight = layer.kv_len * layer.heads * layer.head_dim
        act_in = layer.heads * layer.seq_len * layer.kv_len
        act_out = layer.seq_len * layer.heads * layer.head_dim
    elif k is LayerKind.SOFTMAX:
        weight, act_in = 0, layer.vector_elements
        act_out = act_in
    elif k in (LayerKind.UPSAMPLE_NEAREST, LayerKind.CONCAT):
        weight = 0
        act_in = layer.spatial_len * layer.c_in
        act_out = layer.out_len * layer.c_out
    else:
        weight, act_in = 0, layer.vector_elements
        act_out = act_in
    return Footprint(layer.id, weight * bpe, act_in * bpe, act_out * bpe)


def conv_stack(graph: NetworkGraph) -> List[LayerDescriptor]:
    """3x3 convolutions (including stride-2) in execution order."""
    return [l for l in graph.layers if l.kind in (LayerKind.CONV3X3, LayerKind.DOWNSAMPLE_CONV)]


# ---- CSV dumps ----------------------------------------------------------------


def write_macs_csv(graph: NetworkGraph, path: Path, bytes_per_element: int = 2) -> None:
    macs = count_macs(graph)
    fps = tensor_footprints(graph, bytes_per_element)
    rows = (
        [l.id, l.kind.value, str(l.block_ref), macs.per_layer[l.id], fp.weight_bytes, fp.act_in_bytes, fp.act_out_bytes]
        for l, fp in zip(graph.layers, fps)
    )
    write_csv(path, MACS_HEADER, rows)


def write_footprints_csv(graph: NetworkGraph, path: Path, bytes_per_element: int = 2) -> None:
    fps = tensor_footprints(graph, bytes_per_element)
    rows = (
        [l.id, l.kind.value, str(l.block_ref), fp.weight_bytes, fp.act_in_bytes, fp.act_out_bytes]
        for l, fp in zip(graph.layers, fps)
    )
    write_csv(path, FOOTPRINT_HEADER, rows)


def write_cost_csv(graph: NetworkGraph, path: Path, basis: str = "profiled") -> None:
    write_csv(path, ["l", "f"], sorted(cost_curve(graph, basis).items()))
