# src/sdacc_sim/phase.py
"""
Phase-aware sampling.

Shift-score traces are averaged across images and min-max scaled per up
block. Blocks that keep changing late in the trajectory are outliers; the
mean curve of the rest is split into a sketching and a refinement phase at the
transition step D*. A sampling plan then runs the full U-Net on a sparse set
of sketch-phase steps and only the top blocks elsewhere.

Timesteps run forward: t = 0 is the first denoising step from pure noise.
Trace scores are recorded for t = 1 .. T-1 (the change from step t-1 to t).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, PlanError, TraceError
from .models import FULL_DEPTH, MAX_BLOCK_INDEX
from .utils import SCHEMA_VERSION, check_schema, dump_json, write_csv

logger = logging.getLogger(__name__)

TRACE_HEADER = ["image_id", "block_id", "timestep", "shift_score"]
PLAN_CSV_HEADER = ["T_complete", "T_sparse", "T_sketch", "L_sketch", "L_refine", "full_steps", "depth_total",
                   "mac_reduction"]
# block_id 0 carries the noise curve; it is kept in files but never analysed.
NOISE_BLOCK = 0
PLACEMENTS = ("aligned", "shifted")

CostFn = Union[Callable[[int], float], Mapping[int, float]]


@dataclass(frozen=True)
class PhaseConfig:
    late_fraction: float = 0.25
    outlier_threshold: float = 0.3
    placement: str = "aligned"

    def __post_init__(self) -> None:
        if not 0 < self.late_fraction <= 1:
            raise ConfigError(f"phase.late_fraction must be in (0, 1], got {self.late_fraction}")
        if self.outlier_threshold < 0:
            raise ConfigError(f"phase.outlier_threshold must be non-negative, got {self.outlier_threshold}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"phase.placement must be one of {PLACEMENTS}, got '{self.placement}'")


@dataclass
class Trace:
    """Dense shift-score grid, ``scores[image, block, t - 1]``."""

    scores: np.ndarray
    T: int
    image_ids: List[int]
    block_ids: List[int]
    scheduler_name: str = ""

    def __post_init__(self) -> None:
        expected = (len(self.image_ids), len(self.block_ids), self.T - 1)
        if self.scores.shape != expected:
            raise TraceError(f"Score grid has shape {self.scores.shape}, expected {expected}")
        if not np.isfinite(self.scores).all():
            raise TraceError("Trace contains non-finite scores")
        if (self.scores < 0).any():
            raise TraceError("Trace contains negative scores")


@dataclass
class ScoreMatrix:
    normalized: np.ndarray
    block_ids: List[int]
    T: int
    outliers: FrozenSet[int] = frozenset()
    mean_curve: Optional[np.ndarray] = None
    constant_blocks: FrozenSet[int] = frozenset()


@dataclass(frozen=True)
class PlanParams:
    T_sketch: int
    T_complete: int
    T_sparse: int
    L_sketch: int
    L_refine: int

    def key(self) -> Tuple[int, int, int, int, int]:
        return (self.T_complete, self.T_sparse, self.T_sketch, self.L_sketch, self.L_refine)


@dataclass
class SamplingPlan:
    params: PlanParams
    T: int
    depth_schedule: List[int]
    placement: str = "aligned"
    d_star: Optional[int] = None
    outliers: Tuple[int, ...] = ()

    @property
    def full_steps(self) -> List[int]:
        return [t for t, l in enumerate(self.depth_schedule) if l == FULL_DEPTH]


@dataclass(frozen=True)
class PlanCandidate:
    params: PlanParams
    full_steps: int
    depth_total: int
    reduction: float


@dataclass(frozen=True)
class SearchConstraints:
    min_reduction: Optional[float] = None
    # Upper bound on the summed block depth over all timesteps.
    max_depth_budget: Optional[int] = None
    min_refine_depth: Optional[int] = None

    def is_empty(self) -> bool:
        return self.min_reduction is None and self.max_depth_budget is None and self.min_refine_depth is None


# Table-style presets for sd14 at 50 steps: (T_sketch, T_complete, T_sparse, L_sketch, L_refine).
PAS_PRESETS: Dict[str, PlanParams] = {
    f"PAS-25/{s}": PlanParams(T_sketch=25, T_complete=4, T_sparse=s, L_sketch=2, L_refine=2) for s in (2, 3, 4, 5)
}
PRESET_STEPS = 50


# ---- traces ------------------------------------------------------------------


def _parse_row(row: Dict[str, str], line: int, source: str) -> Tuple[int, int, int, float]:
    try:
        return int(row["image_id"]), int(row["block_id"]), int(row["timestep"]), float(row["shift_score"])
    except (TypeError, ValueError) as e:
        raise TraceError(f"{source}:{line}: malformed record {row}: {e}") from e


def load_trace(path: Union[str, Path], scheduler_name: str = "") -> Trace:
    """Read a trace CSV and check that every (image, block, timestep) cell is present exactly once."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != TRACE_HEADER:
                raise TraceError(f"{path}: header {reader.fieldnames} does not match {TRACE_HEADER}")
            cells: Dict[Tuple[int, int, int], float] = {}
            for line, row in enumerate(reader, start=2):
                image, block, t, score = _parse_row(row, line, str(path))
                if not math.isfinite(score) or score < 0:
                    raise TraceError(f"{path}:{line}: shift_score must be finite and non-negative, got {score}")
                if block == NOISE_BLOCK:
                    continue
                if not 1 <= block <= MAX_BLOCK_INDEX:
                    raise TraceError(f"{path}:{line}: block_id {block} outside [0, {MAX_BLOCK_INDEX}]")
                if t < 1:
                    raise TraceError(f"{path}:{line}: timestep {t} must be >= 1")
                if (image, block, t) in cells:
                    raise TraceError(f"{path}:{line}: duplicate record for image {image} block {block} timestep {t}")
                cells[(image, block, t)] = score
    except OSError as e:
        raise TraceError(f"Cannot read trace {path}: {e}") from e

    if not cells:
        raise TraceError(f"{path}: no up-block records")
    images = sorted({k[0] for k in cells})
    blocks = sorted({k[1] for k in cells})
    T = max(k[2] for k in cells) + 1
    if T < 3:
        raise TraceError(f"{path}: need at least 3 timesteps, got T={T}")
    absent = sorted(set(range(1, MAX_BLOCK_INDEX + 1)) - set(blocks))
    if absent:
        raise TraceError(f"{path}: no records for up blocks {absent}; all {MAX_BLOCK_INDEX} are required")
    scores = np.empty((len(images), len(blocks), T - 1))
    for i, image in enumerate(images):
        for b, block in enumerate(blocks):
            for t in range(1, T):
                try:
                    scores[i, b, t - 1] = cells[(image, block, t)]
                except KeyError:
                    raise TraceError(f"{path}: missing cell image {image} block {block} timestep {t}") from None
    logger.info(f"Loaded trace {path}: {len(images)} images, {len(blocks)} blocks, T={T}")
    return Trace(scores, T, images, blocks, scheduler_name or path.stem)


def save_trace(trace: Trace, path: Union[str, Path]) -> None:
    rows = (
        (image, block, t, float(trace.scores[i, b, t - 1]))
        for i, image in enumerate(trace.image_ids)
        for b, block in enumerate(trace.block_ids)
        for t in range(1, trace.T)
    )
    write_csv(Path(path), TRACE_HEADER, rows)


def shift_score(prev: np.ndarray, curr: np.ndarray) -> float:
    """Relative L2 change of an activation between adjacent timesteps."""
    prev = np.asarray(prev, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if prev.shape != curr.shape:
        raise ValueError(f"Activation shapes differ: {prev.shape} vs {curr.shape}")
    base = float(np.linalg.norm(prev))
    if base == 0.0:
        raise ValueError("Previous activation is all zeros")
    return float(np.linalg.norm(curr - prev)) / base


def synth_trace(
    T: int = 50,
    outlier_blocks: Iterable[int] = (1, 2),
    D_true: int = 20,
    noise_sigma: float = 0.0,
    n_images: int = 2,
    rng_seed: int = 0,
    blocks: int = MAX_BLOCK_INDEX,
) -> Trace:
    """
    Synthetic trace with a known transition and outlier set.

    Regular blocks hold a high plateau up to ``D_true`` and drop to a low floor
    after it. Outlier blocks oscillate for the whole trajectory.
    """
    if T < 3 or not 1 <= D_true <= T - 2:
        raise ValueError(f"Need T >= 3 and D_true in [1, T-2], got T={T} D_true={D_true}")
    if n_images < 1 or blocks < 1 or noise_sigma < 0:
        raise ValueError("n_images and blocks must be positive and noise_sigma non-negative")
    outliers = set(outlier_blocks)
    rng = np.random.default_rng(rng_seed)
    t = np.arange(1, T, dtype=np.float64)
    scores = np.empty((n_images, blocks, T - 1))
    for b in range(blocks):
        scale = 1.0 + 0.1 * b
        if b + 1 in outliers:
            curve = scale * (1.0 + np.cos(2.0 * math.pi * t / 7.0))
        else:
            curve = np.where(t <= D_true, scale, 0.02 * scale)
        scores[:, b, :] = curve
    if noise_sigma:
        scores = np.clip(scores + rng.normal(0.0, noise_sigma, scores.shape), 0.0, None)
    return Trace(scores, T, list(range(n_images)), list(range(1, blocks + 1)), "synthetic")


# ---- analysis ----------------------------------------------------------------


def detect_outliers(matrix: ScoreMatrix, late_fraction: float = 0.25, threshold: float = 0.3) -> FrozenSet[int]:
    """Blocks whose mean normalized score over the last ceil(late_fraction * T) steps exceeds ``threshold``."""
    window = min(math.ceil(late_fraction * matrix.T), matrix.normalized.shape[1])
    late = matrix.normalized[:, -window:].mean(axis=1)
    return frozenset(block for block, score in zip(matrix.block_ids, late) if score > threshold)


def normalize_scores(trace: Trace, config: Optional[PhaseConfig] = None) -> ScoreMatrix:
    """Average over images, min-max scale each block, then find outliers and the mean curve."""
    config = config or PhaseConfig()
    avg = trace.scores.mean(axis=0)
    lo = avg.min(axis=1, keepdims=True)
    span = avg.max(axis=1, keepdims=True) - lo
    constant = span[:, 0] == 0
    normalized = np.where(constant[:, None], 0.0, (avg - lo) / np.where(constant[:, None], 1.0, span))
    constant_ids = frozenset(b for b, c in zip(trace.block_ids, constant) if c)
    if constant_ids:
        logger.warning(f"Constant shift-score curves for blocks {sorted(constant_ids)}; scaled to zero")

    matrix = ScoreMatrix(normalized, list(trace.block_ids), trace.T, constant_blocks=constant_ids)
    matrix.outliers = detect_outliers(matrix, config.late_fraction, config.outlier_threshold)
    keep = [i for i, b in enumerate(matrix.block_ids) if b not in matrix.outliers]
    if keep:
        matrix.mean_curve = normalized[keep].mean(axis=0)
    else:
        logger.warning("Every block is an outlier; no mean curve available")
    return matrix


def _segment_sse(curve: np.ndarray) -> np.ndarray:
    """SSE of the two-segment split for every D in [1, T-2]."""
    n = curve.size
    sse = np.empty(n - 1)
    for d in range(1, n):
        left, right = curve[:d], curve[d:]
        sse[d - 1] = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
    return sse


def find_transition(matrix: Union[ScoreMatrix, Sequence[float]]) -> int:
    """
    Transition step D* minimizing the within-phase squared error of the mean curve.

    The sweep is exhaustive; ties (within float noise) go to the smallest D.
    """
    if isinstance(matrix, ScoreMatrix):
        if matrix.mean_curve is None:
            raise TraceError("Score matrix has no mean curve (all blocks are outliers)")
        curve = np.asarray(matrix.mean_curve, dtype=np.float64)
    else:
        curve = np.asarray(matrix, dtype=np.float64)
    T = curve.size + 1
    if T < 3:
        raise TraceError(f"Transition search needs T >= 3, got T={T}")
    sse = _segment_sse(curve)
    best = sse.min()
    tol = 1e-12 * max(1.0, float(np.abs(curve).max()) ** 2 * curve.size)
    return int(np.flatnonzero(sse <= best + tol)[0]) + 1


@dataclass
class PhaseAnalysis:
    matrix: ScoreMatrix
    d_star: int

    @property
    def outliers(self) -> FrozenSet[int]:
        return self.matrix.outliers


def analyze_trace(trace: Trace, config: Optional[PhaseConfig] = None) -> PhaseAnalysis:
    matrix = normalize_scores(trace, config)
    d_star = find_transition(matrix)
    logger.info(f"Trace {trace.scheduler_name}: D*={d_star}, outliers={sorted(matrix.outliers)}")
    return PhaseAnalysis(matrix, d_star)


# ---- sampling plans ----------------------------------------------------------


def validate_params(
    params: PlanParams,
    T: int,
    d_star: Optional[int] = None,
    outliers: Iterable[int] = (),
) -> None:
    """Raise PlanError naming the first violated plan invariant."""
    p = params
    if T < 1:
        raise PlanError(f"T must be >= 1, got {T}")
    if p.T_sparse < 1:
        raise PlanError(f"T_sparse must be >= 1, got {p.T_sparse}")
    if not 0 <= p.T_complete <= p.T_sketch <= T:
        raise PlanError(f"Need 0 <= T_complete <= T_sketch <= T, got {p.T_complete}, {p.T_sketch}, {T}")
    if d_star is not None and p.T_sketch < d_star:
        raise PlanError(f"T_sketch {p.T_sketch} is below the transition step D*={d_star}")
    for name, depth in (("L_sketch", p.L_sketch), ("L_refine", p.L_refine)):
        if not 1 <= depth <= FULL_DEPTH:
            raise PlanError(f"{name} must be in [1, {FULL_DEPTH}], got {depth}")
    if p.L_sketch < p.L_refine:
        raise PlanError(f"L_sketch {p.L_sketch} is below L_refine {p.L_refine}")
    n_out = len(set(outliers))
    if p.L_refine < n_out:
        raise PlanError(f"L_refine {p.L_refine} is below the number of outlier blocks ({n_out})")


def _is_full(t: int, p: PlanParams, placement: str) -> bool:
    offset = t - p.T_complete + (1 if placement == "shifted" else 0)
    return offset % p.T_sparse == 0


def build_schedule(
    params: PlanParams,
    T: int,
    placement: str = "aligned",
    d_star: Optional[int] = None,
    outliers: Iterable[int] = (),
) -> SamplingPlan:
    """Per-timestep depth l_t: full warm-up, sparse full steps while sketching, top blocks while refining."""
    if placement not in PLACEMENTS:
        raise PlanError(f"Unknown placement '{placement}', expected one of {PLACEMENTS}")
    outliers = tuple(sorted(set(outliers)))
    validate_params(params, T, d_star, outliers)
    schedule = []
    for t in range(T):
        if t < params.T_complete:
            schedule.append(FULL_DEPTH)
        elif t < params.T_sketch:
            schedule.append(FULL_DEPTH if _is_full(t, params, placement) else params.L_sketch)
        else:
            schedule.append(params.L_refine)
    return SamplingPlan(params, T, schedule, placement, d_star, outliers)


def full_step_count(params: PlanParams, placement: str = "aligned") -> int:
    window = params.T_sketch - params.T_complete
    if placement == "shifted":
        return params.T_complete + window // params.T_sparse
    return params.T_complete + -(-window // params.T_sparse)


def _cost(f: CostFn, l: int) -> float:
    return f[l] if isinstance(f, Mapping) else f(l)


def mac_reduction(plan: SamplingPlan, f: CostFn) -> float:
    """T over the summed per-step cost fraction f(l_t)."""
    spent = sum(_cost(f, l) for l in plan.depth_schedule)
    if spent <= 0:
        raise PlanError("Schedule has zero cost under the given cost function")
    return plan.T / spent


def _row_candidates(
    T_complete: int,
    f: CostFn,
    d_star: int,
    T: int,
    depths: Sequence[int],
    constraints: SearchConstraints,
    placement: str,
) -> List[PlanCandidate]:
    found = []
    for T_sparse in range(1, 9):
        for T_sketch in range(max(d_star, T_complete), T + 1):
            for L_sketch in depths:
                for L_refine in depths:
                    if L_refine > L_sketch:
                        break
                    p = PlanParams(T_sketch, T_complete, T_sparse, L_sketch, L_refine)
                    n_full = full_step_count(p, placement)
                    n_sketch = T_sketch - T_complete - (n_full - T_complete)
                    n_refine = T - T_sketch
                    spent = n_full + n_sketch * _cost(f, L_sketch) + n_refine * _cost(f, L_refine)
                    reduction = T / spent
                    depth_total = n_full * FULL_DEPTH + n_sketch * L_sketch + n_refine * L_refine
                    if constraints.min_reduction is not None and reduction < constraints.min_reduction:
                        continue
                    if constraints.max_depth_budget is not None and depth_total > constraints.max_depth_budget:
                        continue
                    if constraints.min_refine_depth is not None and L_refine < constraints.min_refine_depth:
                        continue
                    found.append(PlanCandidate(p, n_full, depth_total, reduction))
    return found


def search_plan(
    constraints: SearchConstraints,
    f: CostFn,
    d_star: int,
    outliers: Iterable[int],
    T: int,
    placement: str = "aligned",
    limit: Optional[int] = None,
    max_workers: int = 4,
) -> List[PlanCandidate]:
    """
    Exhaustive grid search over sampling plans, best MAC reduction first.

    The grid is T_complete and T_sparse in [1, 8], T_sketch in [D*, T], and
    L_refine <= L_sketch in [max(|outliers|, 1), 12]. An empty list means no
    plan meets the constraints. Ties are ordered by parameters, so the ranking
    does not depend on evaluation order.
    """
    if constraints.is_empty():
        raise PlanError("search_plan needs at least one constraint")
    if not 1 <= d_star <= T:
        raise PlanError(f"D*={d_star} outside [1, {T}]")
    depths = list(range(max(len(set(outliers)), 1), MAX_BLOCK_INDEX + 1))

    def row(tc: int) -> List[PlanCandidate]:
        return _row_candidates(tc, f, d_star, T, depths, constraints, placement)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        rows = list(pool.map(row, range(1, min(8, T) + 1)))
    ranked = sorted((c for r in rows for c in r), key=lambda c: (-c.reduction, c.params.key()))
    logger.info(f"Plan search: {len(ranked)} feasible plans (T={T}, D*={d_star})")
    return ranked[:limit] if limit is not None else ranked


def candidate_plan(candidate: PlanCandidate, T: int, placement: str = "aligned",
                   d_star: Optional[int] = None, outliers: Iterable[int] = ()) -> SamplingPlan:
    return build_schedule(candidate.params, T, placement, d_star, outliers)


def preset_plan(name: str, T: int = PRESET_STEPS, placement: str = "aligned") -> SamplingPlan:
    try:
        params = PAS_PRESETS[name]
    except KeyError:
        raise PlanError(f"Unknown preset '{name}', expected one of {sorted(PAS_PRESETS)}") from None
    return build_schedule(params, T, placement)


# ---- plan files --------------------------------------------------------------


def save_plan(plan: SamplingPlan, path: Union[str, Path]) -> None:
    dump_json({"schema_version": SCHEMA_VERSION, **_plan_doc(plan)}, Path(path))


def _plan_doc(plan: SamplingPlan) -> Dict:
    return {
        "T": plan.T,
        "params": plan.params,
        "placement": plan.placement,
        "d_star": plan.d_star,
        "outliers": list(plan.outliers),
        "depth_schedule": plan.depth_schedule,
    }


def load_plan(path: Union[str, Path]) -> SamplingPlan:
    """Read a plan file and rebuild its schedule; a stored schedule that disagrees is rejected."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise PlanError(f"Cannot read plan {path}: {e}") from e
    check_schema(data, str(path))
    try:
        params = PlanParams(**data["params"])
        plan = build_schedule(params, int(data["T"]), data.get("placement", "aligned"),
                              data.get("d_star"), data.get("outliers", ()))
    except (KeyError, TypeError) as e:
        raise PlanError(f"{path}: malformed plan: {e}") from e
    stored = data.get("depth_schedule")
    if stored is not None and list(stored) != plan.depth_schedule:
        raise PlanError(f"{path}: stored depth_schedule does not match the plan parameters")
    return plan


def write_plans_csv(candidates: Sequence[PlanCandidate], path: Union[str, Path]) -> None:
    rows = (
        (*c.params.key(), c.full_steps, c.depth_total, c.reduction)
        for c in candidates
    )
    write_csv(Path(path), PLAN_CSV_HEADER, rows)
