# src/sdacc_sim/nonlinear.py
"""
Streaming softmax, layernorm and GELU.

Each normalization is split in two calls: an NCA update that folds in one tile
of the row as it leaves the systolic array, and a Norm step applied per element
once the row statistics are final.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence, Tuple

import numpy as np
from scipy.special import erf, expit

from .errors import NumericFaultError

logger = logging.getLogger(__name__)

DEFAULT_TILE = 32
GELU_ALPHA = 1.702
LAYERNORM_EPS = 1e-5


@dataclass(frozen=True)
class SoftmaxState:
    running_max: float = -math.inf
    es: float = 0.0
    n1: int = 0
    tile_size: int = DEFAULT_TILE


@dataclass(frozen=True)
class MomentState:
    sum: float = 0.0
    sqsum: float = 0.0
    n: int = 0


@dataclass(frozen=True)
class NonlinearTiming:
    tile_latency_cycles: int = DEFAULT_TILE
    pipeline_latency_cycles: int = 8

    def __post_init__(self) -> None:
        if self.tile_latency_cycles < 0 or self.pipeline_latency_cycles < 0:
            raise ValueError("Nonlinear latencies must be non-negative")

    # Full passes over the data when the op runs after its producer finishes.
    # Sigmoid-based activations pay for exp range reduction and the reciprocal
    # as separate VPU sweeps.
    BLOCKING_PASSES = {"softmax": 3, "layernorm": 2, "groupnorm": 2, "gelu": 8, "silu": 8, "add": 1}

    def passes(self, kind: str, streaming: bool) -> int:
        """Exposed passes over the data; zero when the op streams with its producer."""
        if streaming:
            return 0
        return self.BLOCKING_PASSES.get(kind, 1)

    def streaming_tail(self, kind: str) -> int:
        """Cycles left exposed under streaming: the NCA tile fill plus the Norm pipeline."""
        if kind in ("softmax", "layernorm", "groupnorm"):
            return self.tile_latency_cycles + self.pipeline_latency_cycles
        return self.pipeline_latency_cycles


def _ingest(tile: Sequence[float], limit: int) -> np.ndarray:
    arr = np.asarray(tile, dtype=np.float64).ravel()
    if arr.size == 0:
        raise NumericFaultError("Empty tile")
    if arr.size > limit:
        raise NumericFaultError(f"Tile of {arr.size} elements exceeds tile size {limit}")
    if np.isnan(arr).any():
        raise NumericFaultError("NaN in tile")
    if np.isposinf(arr).any():
        raise NumericFaultError("+inf in tile; the row has no finite maximum")
    return arr


def tiles(row: Sequence[float], tile_size: int = DEFAULT_TILE) -> Iterator[np.ndarray]:
    arr = np.asarray(row, dtype=np.float64).ravel()
    for start in range(0, arr.size, tile_size):
        yield arr[start:start + tile_size]


# ---- softmax -----------------------------------------------------------------


def softmax_nca_update(state: SoftmaxState, tile: Sequence[float]) -> SoftmaxState:
    """Fold one tile into the running max and rescaled exponential sum."""
    x = _ingest(tile, state.tile_size)
    new_max = max(state.running_max, float(x.max()))
    if new_max == -math.inf:
        return replace(state, n1=state.n1 + x.size)
    scale = math.exp(state.running_max - new_max) if state.es else 0.0
    es = state.es * scale + float(np.exp(x - new_max).sum())
    return replace(state, running_max=new_max, es=es, n1=state.n1 + x.size)


def merge_softmax(a: SoftmaxState, b: SoftmaxState) -> SoftmaxState:
    """Combine the states of two disjoint parts of a row."""
    m = max(a.running_max, b.running_max)
    if m == -math.inf:
        return replace(a, n1=a.n1 + b.n1)
    es = (a.es * math.exp(a.running_max - m) if a.es else 0.0) + (b.es * math.exp(b.running_max - m) if b.es else 0.0)
    return replace(a, running_max=m, es=es, n1=a.n1 + b.n1)


def softmax_norm(x, state: SoftmaxState):
    if not state.es > 0.0:
        raise NumericFaultError(f"Exponential sum is {state.es}; row has no finite maximum")
    return np.exp(np.asarray(x, dtype=np.float64) - state.running_max) / state.es


def softmax_streaming(row: Sequence[float], tile_size: int = DEFAULT_TILE) -> np.ndarray:
    state = SoftmaxState(tile_size=tile_size)
    for t in tiles(row, tile_size):
        state = softmax_nca_update(state, t)
    return softmax_norm(row, state)


def softmax_naive(row: Sequence[float]) -> np.ndarray:
    """Two-pass reference: max, then normalized exponentials."""
    x = np.asarray(row, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


# ---- layernorm ---------------------------------------------------------------


def layernorm_nca_update(state: MomentState, tile: Iterable[float]) -> MomentState:
    raw = np.asarray(tile).ravel()
    if raw.size == 0:
        raise NumericFaultError("Empty tile")
    if raw.dtype.kind == "f" and np.isnan(raw).any():
        raise NumericFaultError("NaN in tile")
    if raw.dtype.kind == "f" and np.isinf(raw).any():
        raise NumericFaultError("Infinite value in tile")
    return MomentState(
        sum=state.sum + raw.sum().item(),
        sqsum=state.sqsum + (raw * raw).sum().item(),
        n=state.n + raw.size,
    )


def merge_moments(a: MomentState, b: MomentState) -> MomentState:
    return MomentState(a.sum + b.sum, a.sqsum + b.sqsum, a.n + b.n)


def layernorm_finalize(state: MomentState) -> Tuple[float, float]:
    """Mean and variance from the running sums, variance clamped at zero."""
    if state.n == 0:
        raise NumericFaultError("Cannot finalize moments of an empty row")
    mean = state.sum / state.n
    var = state.sqsum / state.n - mean * mean
    if var < 0:
        logger.debug(f"Clamped variance {var:.3g} to zero over {state.n} elements")
    return mean, max(var, 0.0)


def layernorm_norm(x, mean: float, var: float, gamma=1.0, beta=0.0, eps: float = LAYERNORM_EPS):
    if var < 0:
        raise NumericFaultError(f"Negative variance {var}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return gamma * (np.asarray(x, dtype=np.float64) - mean) / math.sqrt(var + eps) + beta


def layernorm_streaming(row: Sequence[float], gamma=1.0, beta=0.0, eps: float = LAYERNORM_EPS,
                        tile_size: int = DEFAULT_TILE) -> np.ndarray:
    state = MomentState()
    for t in tiles(row, tile_size):
        state = layernorm_nca_update(state, t)
    mean, var = layernorm_finalize(state)
    return layernorm_norm(row, mean, var, gamma, beta, eps)


def moments_two_pass(row: Sequence[float]) -> Tuple[float, float]:
    x = np.asarray(row, dtype=np.float64)
    mean = x.mean()
    return float(mean), float(((x - mean) ** 2).mean())


# ---- GELU --------------------------------------------------------------------


def gelu_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return x * expit(GELU_ALPHA * x)


def gelu_erf(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
