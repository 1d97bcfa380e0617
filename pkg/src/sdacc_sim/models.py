from __future__ import annotations
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple


class LayerKind(str, Enum):
    CONV3X3 = "conv3x3"
    CONV1X1 = "conv1x1"
    LINEAR = "linear"
    ATTENTION_QK = "attention_qk"
    ATTENTION_AV = "attention_av"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    GROUPNORM = "groupnorm"
    GELU = "gelu"
    SILU = "silu"
    UPSAMPLE_NEAREST = "upsample_nearest"
    DOWNSAMPLE_CONV = "downsample_conv"
    ADD = "add"
    CONCAT = "concat"


CONV_KINDS = frozenset({LayerKind.CONV3X3, LayerKind.CONV1X1, LayerKind.DOWNSAMPLE_CONV})
ATTENTION_KINDS = frozenset({LayerKind.ATTENTION_QK, LayerKind.ATTENTION_AV})
MATMUL_KINDS = CONV_KINDS | ATTENTION_KINDS | {LayerKind.LINEAR}
# Vector work executed on the VPU; zero MACs.
VECTOR_KINDS = frozenset(
    {
        LayerKind.SOFTMAX,
        LayerKind.LAYERNORM,
        LayerKind.GROUPNORM,
        LayerKind.GELU,
        LayerKind.SILU,
        LayerKind.ADD,
    }
)
# Pure data movement; zero MACs and no VPU arithmetic.
MOVE_KINDS = frozenset({LayerKind.UPSAMPLE_NEAREST, LayerKind.CONCAT})


class Side(str, Enum):
    DOWN = "down"
    MID = "mid"
    UP = "up"


MAX_BLOCK_INDEX = 12
FULL_DEPTH = 13


@dataclass(frozen=True)
class BlockId:
    side: Side
    index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "side", Side(self.side))
        if self.side is Side.MID:
            if self.index != 0:
                raise ValueError(f"mid block must have index 0, got {self.index}")
        elif not 1 <= self.index <= MAX_BLOCK_INDEX:
            raise ValueError(f"{self.side.value} block index {self.index} outside [1, {MAX_BLOCK_INDEX}]")

    def __str__(self) -> str:
        return "mid" if self.side is Side.MID else f"{self.side.value}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "BlockId":
        if text == "mid":
            return cls(Side.MID, 0)
        for side in (Side.DOWN, Side.UP):
            if text.startswith(side.value) and text[len(side.value):].isdigit():
                return cls(side, int(text[len(side.value):]))
        raise ValueError(f"Unrecognized block id '{text}'")


@dataclass(frozen=True)
class LayerDescriptor:
    id: int
    kind: LayerKind
    block_ref: BlockId
    name: str = ""
    # Input grid; output grid follows from stride and kind.
    height: int = 1
    width: int = 1
    c_in: int = 1
    c_out: int = 1
    stride: int = 1
    kernel: int = 1
    # Row count of a linear layer (defaults to the spatial length).
    rows: int = 0
    seq_len: int = 0
    kv_len: int = 0
    heads: int = 0
    head_dim: int = 0
    chain: bool = True
    skip_source: bool = False

    @property
    def spatial_len(self) -> int:
        return self.height * self.width

    @property
    def out_height(self) -> int:
        if self.kind is LayerKind.UPSAMPLE_NEAREST:
            return self.height * 2
        return -(-self.height // self.stride)

    @property
    def out_width(self) -> int:
        if self.kind is LayerKind.UPSAMPLE_NEAREST:
            return self.width * 2
        return -(-self.width // self.stride)

    @property
    def out_len(self) -> int:
        return self.out_height * self.out_width

    @property
    def row_count(self) -> int:
        return self.rows or self.spatial_len

    @property
    def vector_elements(self) -> int:
        """Elements touched by a vector op (scores for softmax, rows x channels otherwise)."""
        if self.kind is LayerKind.SOFTMAX:
            return self.heads * self.seq_len * self.kv_len
        return self.row_count * self.c_in


@dataclass
class MacBreakdown:
    per_layer: Dict[int, int] = field(default_factory=dict)
    per_block: Dict[BlockId, int] = field(default_factory=dict)
    total: int = 0


@dataclass(frozen=True)
class Footprint:
    layer_id: int
    weight_bytes: int
    act_in_bytes: int
    act_out_bytes: int


@dataclass
class NetworkGraph:
    model_id: str
    layers: List[LayerDescriptor]
    skips: List[Tuple[BlockId, BlockId]]
    latent_h: int
    latent_w: int
    context_len: int
    context_dim: int
    latent_channels: int = 4
    # Blocks in execution order: down 1..n, mid, up n..1.
    blocks: List[BlockId] = field(default_factory=list)
    # MAC totals of optional non-U-Net components (text encoder, VAE decoder).
    extras: Dict[str, int] = field(default_factory=dict)
    source: Optional[str] = None

    @property
    def depth(self) -> int:
        return sum(1 for b in self.blocks if b.side is Side.DOWN)

    def layers_in(self, block: BlockId) -> List[LayerDescriptor]:
        return [layer for layer in self.layers if layer.block_ref == block]

    def layer(self, layer_id: int) -> LayerDescriptor:
        return self.layers[layer_id]
