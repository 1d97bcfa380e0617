# src/sdacc_sim/uniconv.py
"""
Address-centric convolution.

A KxK convolution is split into K*K pointwise slices. Each slice is a plain
(L, C_in) x (C_in, C_out) product whose rows are scatter-added into the output
at a fixed row offset ``delta``; an edge flag masks rows whose destination
falls outside the output grid. Activations are stored merged as (L, C) with
l = h * W + w, weights as (F, C_out, C_in).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .models import LayerDescriptor, LayerKind

SUPPORTED_KERNELS = (1, 3)

# Receives (slice index, l_in rows, l_out rows) for each scatter-add pass.
ScatterHook = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class AddressMap:
    kernel_offset: Tuple[int, int]
    delta: int
    width: int


@dataclass
class PackedActivation:
    data: np.ndarray
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.shape[0] != self.height * self.width:
            raise ValueError(
                f"Packed activation must be (H*W, C) = ({self.height * self.width}, C), got {self.data.shape}"
            )

    @property
    def L(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]


@dataclass
class PackedWeight:
    data: np.ndarray
    kernel: int

    def __post_init__(self) -> None:
        if self.kernel not in SUPPORTED_KERNELS:
            raise ValueError(f"Unsupported kernel size {self.kernel}; expected one of {SUPPORTED_KERNELS}")
        if self.data.ndim != 3 or self.data.shape[0] != self.kernel * self.kernel:
            raise ValueError(f"Packed weight must be (F, C_out, C_in) with F = {self.kernel ** 2}, got {self.data.shape}")

    @property
    def F(self) -> int:
        return self.data.shape[0]

    @property
    def c_out(self) -> int:
        return self.data.shape[1]

    @property
    def c_in(self) -> int:
        return self.data.shape[2]


def pack_activation(x: np.ndarray) -> PackedActivation:
    """(H, W, C) tensor to merged (L, C) storage."""
    h, w, c = x.shape
    return PackedActivation(np.ascontiguousarray(x).reshape(h * w, c), h, w)


def unpack_activation(act: PackedActivation) -> np.ndarray:
    return act.data.reshape(act.height, act.width, act.C)


def pack_weight(w: np.ndarray) -> PackedWeight:
    """(R, S, C_in, C_out) kernel to (F, C_out, C_in) slices, F row-major over (r, s)."""
    r, s, c_in, c_out = w.shape
    if r != s:
        raise ValueError(f"Only square kernels are supported, got {r}x{s}")
    return PackedWeight(np.ascontiguousarray(w.reshape(r * s, c_in, c_out).transpose(0, 2, 1)), r)


def address_maps(kernel: int, width: int) -> List[AddressMap]:
    if kernel not in SUPPORTED_KERNELS:
        raise ValueError(f"Unsupported kernel size {kernel}; expected one of {SUPPORTED_KERNELS}")
    half = kernel // 2
    maps = []
    for r in range(kernel):
        for s in range(kernel):
            dr, ds = r - half, s - half
            maps.append(AddressMap((dr, ds), -dr * width - ds, width))
    return maps


def decompose(conv: Union[LayerDescriptor, int], width: Optional[int] = None) -> List[Tuple[int, AddressMap]]:
    """
    Split a convolution into (slice index, AddressMap) pairs.

    Accepts a conv LayerDescriptor, or a kernel size plus row width.
    """
    if isinstance(conv, LayerDescriptor):
        if conv.kind not in (LayerKind.CONV3X3, LayerKind.CONV1X1, LayerKind.DOWNSAMPLE_CONV):
            raise ValueError(f"Layer {conv.name or conv.id} is not a convolution")
        kernel, width = conv.kernel, conv.width
    else:
        kernel = conv
        if width is None:
            raise ValueError("width is required when decomposing by kernel size")
    return list(enumerate(address_maps(kernel, width)))


def delta_table(width: int, kernel: int = 3) -> List[int]:
    return [m.delta for m in address_maps(kernel, width)]


def edge_flag(amap: AddressMap, l_in: int, height: int, width: int) -> bool:
    """True iff the partial sum produced at ``l_in`` lands inside the output grid."""
    if not 0 <= l_in < height * width:
        raise ValueError(f"l_in {l_in} outside [0, {height * width})")
    h, w = divmod(l_in, width)
    dr, ds = amap.kernel_offset
    p, q = h - dr, w - ds
    return 0 <= p < height and 0 <= q < width


def _scatter_rows(amap: AddressMap, height: int, width: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Source rows kept by the edge flag and their destination rows."""
    l_in = np.arange(height * width)
    h, w = np.divmod(l_in, width)
    dr, ds = amap.kernel_offset
    p, q = h - dr, w - ds
    valid = (p >= 0) & (p < height) & (q >= 0) & (q < width)
    if stride == 1:
        return l_in[valid], (l_in + amap.delta)[valid]
    # Stride 2 keeps destinations on even rows and columns of the dense grid.
    valid &= (p % 2 == 0) & (q % 2 == 0)
    out_w = -(-width // 2)
    return l_in[valid], (p // 2 * out_w + q // 2)[valid]


def uniconv_execute(
    act: PackedActivation,
    weight: PackedWeight,
    stride: int = 1,
    hook: Optional[ScatterHook] = None,
) -> PackedActivation:
    """Run a convolution as F slice-matmuls with edge-masked scatter-add, in slice order."""
    if act.C != weight.c_in:
        raise ValueError(f"Input has {act.C} channels but weight expects {weight.c_in}")
    if stride not in (1, 2):
        raise ValueError(f"Unsupported stride {stride}")
    if stride == 2 and weight.kernel != 3:
        raise ValueError("Stride 2 is only supported for 3x3 kernels")

    out_h = -(-act.height // stride)
    out_w = -(-act.width // stride)
    dtype = np.result_type(act.data.dtype, weight.data.dtype)
    out = np.zeros((out_h * out_w, weight.c_out), dtype=dtype)
    for f, amap in decompose(weight.kernel, act.width):
        src, dst = _scatter_rows(amap, act.height, act.width, stride)
        if src.size == 0:
            continue
        partial = act.data[src] @ weight.data[f].T
        # dst is strictly increasing, so fancy-index add has no collisions.
        out[dst] += partial
        if hook is not None:
            hook(f, src, dst)
    return PackedActivation(out, out_h, out_w)


def direct_conv_oracle(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 1) -> np.ndarray:
    """
    Reference convolution over an (H, W, C_in) input and (R, S, C_in, C_out) kernel.

    Cross-correlation with zero padding; the channel contraction of the inner
    loops is a dot product.
    """
    h, wd, c_in = x.shape
    r_k, s_k, w_cin, c_out = w.shape
    if w_cin != c_in:
        raise ValueError(f"Input has {c_in} channels but kernel expects {w_cin}")
    out_h = (h + 2 * padding - r_k) // stride + 1
    out_w = (wd + 2 * padding - s_k) // stride + 1
    out = np.zeros((out_h, out_w, c_out), dtype=np.result_type(x.dtype, w.dtype))
    for p in range(out_h):
        for q in range(out_w):
            for r in range(r_k):
                for s in range(s_k):
                    hi = p * stride + r - padding
                    wi = q * stride + s - padding
                    if 0 <= hi < h and 0 <= wi < wd:
                        out[p, q] += x[hi, wi] @ w[r, s]
    return out


def uniconv(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """(H, W, C_in) x (R, S, C_in, C_out) convenience wrapper around uniconv_execute."""
    return unpack_activation(uniconv_execute(pack_activation(x), pack_weight(w), stride))
