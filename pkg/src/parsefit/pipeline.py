"""End-to-end decomposition: embed, cluster, classify, fit and refine."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bspline import (
    STANDARD_GRID,
    BSplineError,
    BSplinePatch,
    fit_patch,
    init_parametrization,
    standardize,
)
from .clustering import estimate_bandwidth, extract_clusters, mean_shift
from .embedding import EmbeddingError, geometric_embedding, load_embeddings, normalize_rows
from .postprocess import FitToleranceConfig, postprocess_patch, refine_to_tolerance
from .primitives import (
    BASIC_KINDS,
    KIND_ORDER,
    MIN_POINTS,
    FitError,
    PrimitiveKind,
    PrimitivePatch,
    estimate_normals,
    fit_cylinder,
    fit_primitive,
    parameter_count,
    patch_kind,
    primitive_distance,
)

log = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6
GRID_FALLBACK = (20, 16, 12, 8, 6, 4)


class PipelineError(ValueError):
    pass


class DecompositionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) < 1:
            raise PipelineError("positions must be a non-empty (N, 3) array")
        if not np.all(np.isfinite(p)):
            raise PipelineError("positions must be finite")
        object.__setattr__(self, "positions", p)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float)
            if n.shape != p.shape:
                raise PipelineError("normals must match positions")
            if np.any(np.abs(np.linalg.norm(n, axis=1) - 1) > UNIT_TOLERANCE):
                raise PipelineError("normals must be unit vectors")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for :func:`decompose`; defaults follow the reference constants."""

    embedding: str = "geometric"
    bandwidth_rank: int = 150
    mean_shift_iterations: int = 50
    mean_shift_tolerance: float = 1e-5
    scale_position: float = 1.0
    scale_normal: float = 1.0
    spline_grid: int = STANDARD_GRID
    refine: bool = True
    arap: bool = False
    refinement_tolerance: float = 5e-4
    min_segment_size: int = 20
    complexity_penalty: float = 1e-5
    seam_ratio: float = 0.02
    cd_samples: int = 10000
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("bandwidth_rank", "mean_shift_iterations", "spline_grid", "min_segment_size",
                     "cd_samples", "workers"):
            if int(getattr(self, name)) < 1:
                raise PipelineError(f"{name} must be positive")
        if self.spline_grid < 4:
            raise PipelineError("spline_grid must be at least 4")
        if not self.refinement_tolerance > 0 or not self.mean_shift_tolerance > 0:
            raise PipelineError("tolerances must be positive")
        if self.scale_position < 0 or self.scale_normal < 0 or self.complexity_penalty < 0:
            raise PipelineError("scales and penalty must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise PipelineError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise PipelineError("config file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Settings that separate the synthetic test scenes: positions dominate and
# normals only break ties between touching surfaces.
SCENE_PRESET = {"scale_position": 1.0, "scale_normal": 0.1, "bandwidth_rank": 400}


@dataclass
class FittedPatch:
    patch: PrimitivePatch
    indices: np.ndarray
    kind: PrimitiveKind
    residual: float = float("nan")
    refined: bool = False


@dataclass
class SurfacePatchSet:
    patches: list[FittedPatch]
    labels: np.ndarray
    config: dict
    timings: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def membership(self) -> np.ndarray:
        w = np.zeros((len(self.labels), len(self.patches)))
        ok = self.labels >= 0
        w[np.flatnonzero(ok), self.labels[ok]] = 1.0
        return w

    @property
    def kinds(self) -> list[PrimitiveKind]:
        return [p.kind for p in self.patches]


# ---------------------------------------------------------------------------
# classification and fitting


def normalize_positions(points):
    """Center on the bounding box and divide by its diagonal; returns (points, center, scale)."""
    p = np.asarray(points, dtype=float)
    lo, hi = p.min(axis=0), p.max(axis=0)
    scale = float(np.linalg.norm(hi - lo))
    center = 0.5 * (lo + hi)
    scale = scale if scale > 0 else 1.0
    return (p - center) / scale, center, scale


def majority_kind(labels) -> PrimitiveKind:
    """Most frequent kind; ties go to the earlier kind in the fixed order."""
    counts = Counter(PrimitiveKind(k) for k in labels)
    if not counts:
        raise PipelineError("empty segment")
    top = max(counts.values())
    return next(k for k in KIND_ORDER if counts.get(k) == top)


def cylindrical_parametrization(points, normals=None):
    """uv = (angle / 2pi, normalized height) about the best-fit cylinder axis."""
    cyl = fit_cylinder(points, normals)
    d = points - cyl.center
    h = d @ cyl.direction
    w = d - np.outer(h, cyl.direction)
    e1 = np.cross(cyl.direction, [1.0, 0, 0] if abs(cyl.direction[0]) < 0.9 else [0, 1.0, 0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(cyl.direction, e1)
    u = np.mod(np.arctan2(w @ e2, w @ e1) / (2 * np.pi), 1.0)
    span = np.ptp(h)
    if span <= 0:
        raise BSplineError("segment has no extent along the cylinder axis")
    return np.column_stack([u, (h - h.min()) / span])


def _fit_grid(uv, points, size: int, closed_u: bool) -> BSplinePatch:
    last = None
    # shrink the grid until the segment's uv coverage supports it
    for g in [size] + [s for s in GRID_FALLBACK if s < size]:
        try:
            return fit_patch(uv, points, g, g, closed_u)
        except BSplineError as exc:
            last = exc
    raise last or BSplineError("no control grid fits the segment")


def _seam_gap(patch: BSplinePatch, n: int = 40) -> float:
    v = np.linspace(0, 1, n)
    a = patch.evaluate_many(np.zeros(n), v)
    b = patch.evaluate_many(np.ones(n), v)
    return float(np.linalg.norm(a - b, axis=1).mean())


def fit_bspline(points, normals=None, size: int = STANDARD_GRID, seam_ratio: float = 0.02) -> BSplinePatch:
    """Open spline over a planar parametrization, or closed when a wrap-around fit seals its seam.

    The closed candidate uses an angle/height parametrization about the best
    cylinder axis; it wins when its open fit's u = 0 and u = 1 boundaries are
    closer than ``seam_ratio`` of the patch diagonal.
    """
    pts = np.asarray(points, dtype=float)
    diag = float(np.linalg.norm(np.ptp(pts, axis=0)))
    try:
        uv = cylindrical_parametrization(pts, normals)
        # a tube covers the whole angle range
        if np.histogram(uv[:, 0], bins=8, range=(0, 1))[0].min() > 0:
            trial = _fit_grid(uv, pts, size, closed_u=False)
            if _seam_gap(trial) < seam_ratio * diag:
                return standardize(_fit_grid(uv, pts, size, closed_u=True), size=size)
    except (BSplineError, FitError, np.linalg.LinAlgError):
        pass
    patch = _fit_grid(init_parametrization(pts), pts, size, closed_u=False)
    return standardize(patch, size=size)


def _mean_residual(points, patch) -> float:
    return float(np.mean(primitive_distance(points, patch, project=True)))


def candidate_fits(points, normals=None, spline_grid: int = STANDARD_GRID, seam_ratio: float = 0.02,
                   include_spline: bool = True):
    """Every kind that fits the segment, as {kind: (patch, mean residual)}."""
    pts = np.asarray(points, dtype=float)
    out = {}
    for kind in BASIC_KINDS:
        if len(pts) < MIN_POINTS[kind]:
            continue
        try:
            patch = fit_primitive(kind, pts, normals)
        except (FitError, np.linalg.LinAlgError):
            continue
        out[kind] = (patch, _mean_residual(pts, patch))
    if include_spline and len(pts) >= 16:
        try:
            patch = fit_bspline(pts, normals, spline_grid, seam_ratio)
            out[patch_kind(patch)] = (patch, _mean_residual(pts, patch))
        except (BSplineError, FitError, np.linalg.LinAlgError) as exc:
            log.info("spline candidate failed: %s", exc)
    return out


def select_kind(fits: dict, penalty: float = 1e-5) -> PrimitiveKind:
    """Smallest mean residual plus ``penalty`` per parameter; ties by kind order."""
    if not fits:
        raise PipelineError("no kind could be fit to the segment")
    scores = {k: res + penalty * parameter_count(p) for k, (p, res) in fits.items()}
    return min(scores, key=lambda k: (scores[k], KIND_ORDER.index(k)))


def classify_segment(points, normals=None, labels=None, penalty: float = 1e-5,
                     seam_ratio: float = 0.02, spline_grid: int = STANDARD_GRID) -> PrimitiveKind:
    """Majority vote over provided labels, else residual-based model selection.

    Residuals are compared in the units of ``points``; callers wanting a
    scale-free choice pass normalized coordinates.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise PipelineError("empty segment")
    if labels is not None:
        return majority_kind(labels)
    return select_kind(candidate_fits(pts, normals, spline_grid, seam_ratio), penalty)


# ---------------------------------------------------------------------------
# decomposition


def _merge_small(z, labels, min_size):
    """Reassign points of clusters below ``min_size`` to the nearest large cluster mean."""
    counts = np.bincount(labels)
    big = np.flatnonzero(counts >= min_size)
    if len(big) == 0:
        big = np.array([int(np.argmax(counts))])
    centers = normalize_rows(np.vstack([z[labels == k].mean(axis=0) for k in big]))
    small = ~np.isin(labels, big)
    out = labels.copy()
    if np.any(small):
        out[small] = big[np.argmax(z[small] @ centers.T, axis=1)]
    # relabel 0..K-1 by decreasing size, ties by first occurrence
    ids, first, sizes = np.unique(out, return_index=True, return_counts=True)
    order = ids[np.lexsort((first, -sizes))]
    remap = np.empty(out.max() + 1, dtype=int)
    remap[order] = np.arange(len(order))
    return remap[out]


def _fit_segment(k, idx, cloud: PointCloud, normalized, scale, normals, labels, config: PipelineConfig):
    msgs = []
    pts = cloud.positions[idx]
    nrm = normals[idx] if normals is not None else None
    npts = normalized[idx]
    try:
        if labels is not None:
            kind = majority_kind(np.asarray(labels, dtype=object)[idx])
            fits = None
        else:
            fits = candidate_fits(npts, nrm, config.spline_grid, config.seam_ratio)
            kind = select_kind(fits, config.complexity_penalty)
    except PipelineError as exc:
        msgs.append(f"segment {k}: classification failed ({exc})")
        return None, msgs

    patch = None
    try:
        if kind.is_bspline:
            patch = fit_bspline(pts, nrm, config.spline_grid, config.seam_ratio)
            kind = patch_kind(patch)
        else:
            patch = fit_primitive(kind, pts, nrm)
    except (BSplineError, FitError, np.linalg.LinAlgError) as exc:
        msgs.append(f"segment {k}: {kind.value} fit failed ({exc}); using best basic primitive")
        patch, kind = _best_basic(pts, nrm)
        if patch is None:
            msgs.append(f"segment {k}: no basic primitive fits either")
            return None, msgs
    residual = float(np.mean(primitive_distance(pts, patch, project=True)))
    result = FittedPatch(patch, idx, kind, residual)

    if kind.is_bspline and config.refine:
        # the tolerance is a squared distance on the normalized cloud
        tol = FitToleranceConfig(tolerance=config.refinement_tolerance * scale**2)
        try:
            ref = (postprocess_patch if config.arap else refine_to_tolerance)(patch, pts, tol)
        except (BSplineError, ValueError) as exc:
            msgs.append(f"segment {k}: refinement skipped ({exc})")
        else:
            new_res = float(np.mean(primitive_distance(pts, ref.patch, project=True)))
            if ref.success and new_res <= residual:
                result = FittedPatch(ref.patch, idx, kind, new_res, refined=True)
    return result, msgs


def _best_basic(points, normals):
    best = (None, None, np.inf)
    for kind in BASIC_KINDS:
        if len(points) < MIN_POINTS[kind]:
            continue
        try:
            p = fit_primitive(kind, points, normals)
        except (FitError, np.linalg.LinAlgError):
            continue
        r = float(np.mean(primitive_distance(points, p)))
        if r < best[2]:
            best = (p, kind, r)
    return best[0], best[1]


def _embeddings(cloud: PointCloud, normalized, normals, config: PipelineConfig):
    if config.embedding == "geometric":
        return geometric_embedding(normalized, normals, config.scale_position, config.scale_normal)
    y = load_embeddings(config.embedding)
    if len(y) != len(cloud):
        raise EmbeddingError(f"{len(y)} embeddings for {len(cloud)} points")
    return y


def decompose(cloud: PointCloud, config: PipelineConfig | None = None, labels=None) -> SurfacePatchSet:
    """Segment ``cloud`` and fit one surface patch per segment.

    ``labels`` optionally gives a per-point kind used for majority-vote
    classification. Segments that cannot be fit are reported in ``warnings``.
    """
    config = config or PipelineConfig()
    timings = {}
    msgs = []
    n = len(cloud)
    t0 = time.perf_counter()
    if n < 2:
        msg = f"cloud has {n} point; cannot estimate a bandwidth or fit a surface"
        warnings.warn(msg, DecompositionWarning, stacklevel=2)
        return SurfacePatchSet([], np.zeros(n, dtype=int), config.to_dict(), {}, [msg])

    normalized, _, scale = normalize_positions(cloud.positions)
    normals = cloud.normals
    if normals is None and config.embedding == "geometric" and config.scale_normal > 0:
        normals = estimate_normals(cloud.positions, k=min(16, n))
    y = _embeddings(cloud, normalized, normals, config)
    timings["embed"] = time.perf_counter() - t0

    t = time.perf_counter()
    beta = estimate_bandwidth(y, config.bandwidth_rank)
    z, iters = mean_shift(y, beta, config.mean_shift_iterations, config.mean_shift_tolerance,
                          return_iterations=True)
    clusters = extract_clusters(z, y, beta, iters)
    seg = _merge_small(z, clusters.hard_labels, config.min_segment_size)
    timings["cluster"] = time.perf_counter() - t

    t = time.perf_counter()
    groups = [np.flatnonzero(seg == k) for k in range(seg.max() + 1)]
    jobs = [(k, idx, cloud, normalized, scale, normals, labels, config) for k, idx in enumerate(groups)]
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(lambda a: _fit_segment(*a), jobs))
    else:
        results = [_fit_segment(*a) for a in jobs]
    timings["fit"] = time.perf_counter() - t

    patches = []
    out_labels = np.full(n, -1, dtype=int)
    for fitted, m in results:
        msgs.extend(m)
        if fitted is not None:
            out_labels[fitted.indices] = len(patches)
            patches.append(fitted)
    for m in msgs:
        warnings.warn(m, DecompositionWarning, stacklevel=2)
    timings["total"] = time.perf_counter() - t0
    return SurfacePatchSet(patches, out_labels, config.to_dict(), timings, msgs)
