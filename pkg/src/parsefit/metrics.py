"""Evaluation: segment matching, mIOU scores, residual, coverage and Chamfer distance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .assignment import solve_assignment
from .primitives import PrimitiveKind, primitive_distance, sample_surface, trim_inlier_mask

COVERAGE_EPSILON = 0.01
TRIM_EPSILON = 0.1
CD_SAMPLES = 10000
SPLINE_SAMPLES = 2000


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentLabeling:
    """Hard point-to-segment labels plus one primitive kind per segment."""

    labels: np.ndarray
    types: tuple

    def __init__(self, labels, types):
        labels = np.asarray(labels).ravel()
        types = tuple(PrimitiveKind(t) for t in types)
        if len(types) == 0:
            raise MetricsError("need at least one segment")
        if len(labels) and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0
                            or labels.max() >= len(types)):
            raise MetricsError(f"labels must be integers in [0, {len(types)})")
        object.__setattr__(self, "labels", labels.astype(int))
        object.__setattr__(self, "types", types)

    @classmethod
    def from_membership(cls, membership, types):
        w = np.asarray(membership)
        if w.ndim != 2 or np.any(w.sum(axis=1) != 1) or np.any((w != 0) & (w != 1)):
            raise MetricsError("membership must be one-hot rows")
        return cls(np.argmax(w, axis=1), types)

    @property
    def n_points(self) -> int:
        return len(self.labels)

    @property
    def k(self) -> int:
        return len(self.types)

    @property
    def membership(self) -> np.ndarray:
        w = np.zeros((self.n_points, self.k))
        w[np.arange(self.n_points), self.labels] = 1.0
        return w


def iou_matrix(predicted: SegmentLabeling, truth: SegmentLabeling) -> np.ndarray:
    """IOU[k, j] between predicted segment k and ground-truth segment j."""
    if predicted.n_points != truth.n_points:
        raise MetricsError(f"{predicted.n_points} predicted labels but {truth.n_points} true labels")
    kp, kt = predicted.k, truth.k
    inter = np.bincount(predicted.labels * kt + truth.labels, minlength=kp * kt).reshape(kp, kt)
    sp = np.bincount(predicted.labels, minlength=kp)
    st = np.bincount(truth.labels, minlength=kt)
    union = sp[:, None] + st[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def match_segments(predicted: SegmentLabeling, truth: SegmentLabeling) -> list[tuple[int, int]]:
    """(predicted, truth) pairs maximizing total IOU, sorted by truth index."""
    iou = iou_matrix(predicted, truth)
    a = solve_assignment(1.0 - iou)
    return sorted(zip(a.rows.tolist(), a.cols.tolist()), key=lambda p: p[1])


def seg_miou(predicted: SegmentLabeling, truth: SegmentLabeling, pairs=None) -> float:
    """Mean matched IOU over ground-truth segments; unmatched ones count as 0."""
    iou = iou_matrix(predicted, truth)
    pairs = match_segments(predicted, truth) if pairs is None else pairs
    return float(sum(iou[k, j] for k, j in pairs) / truth.k)


def label_miou(predicted: SegmentLabeling, truth: SegmentLabeling, pairs=None) -> float:
    """Fraction of ground-truth segments whose match has the right kind."""
    pairs = match_segments(predicted, truth) if pairs is None else pairs
    return float(sum(predicted.types[k] == truth.types[j] for k, j in pairs) / truth.k)


def residual_error(predicted_patches, gt_samples, project: bool = True) -> float:
    """Mean over paired segments of the mean unsquared distance of samples to the patch."""
    predicted_patches = list(predicted_patches)
    gt_samples = list(gt_samples)
    if len(predicted_patches) != len(gt_samples):
        raise MetricsError(f"{len(predicted_patches)} patches but {len(gt_samples)} sample sets")
    if not predicted_patches:
        raise MetricsError("no matched segments")
    per = []
    for patch, pts in zip(predicted_patches, gt_samples):
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise MetricsError("empty sample set")
        per.append(float(np.mean(primitive_distance(pts, patch, SPLINE_SAMPLES, project=project))))
    return float(np.mean(per))


def nearest_patch_distance(points, patches, project: bool = True) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    d = np.full(len(pts), np.inf)
    for patch in patches:
        d = np.minimum(d, primitive_distance(pts, patch, SPLINE_SAMPLES, project=project))
    return d


def p_coverage(points, patches, epsilon: float = COVERAGE_EPSILON, project: bool = True) -> float:
    """Fraction of input points strictly closer than ``epsilon`` to some patch."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    patches = list(patches)
    if len(pts) == 0 or not patches:
        return 0.0
    return float(np.mean(nearest_patch_distance(pts, patches, project) < epsilon))


def chamfer_distance(reconstructed, inputs) -> tuple[float, float, float]:
    """(p_cover, s_cover, CD): mean squared nearest-neighbor distance each way and their mean."""
    r = np.asarray(reconstructed, dtype=float).reshape(-1, 3)
    x = np.asarray(inputs, dtype=float).reshape(-1, 3)
    if len(r) == 0 or len(x) == 0:
        raise MetricsError("Chamfer distance needs two non-empty point sets")
    p_cover = float(np.mean(cKDTree(x).query(r)[0] ** 2))
    s_cover = float(np.mean(cKDTree(r).query(x)[0] ** 2))
    return p_cover, s_cover, 0.5 * (p_cover + s_cover)


def reconstruct_samples(patches, segments, n_total: int = CD_SAMPLES, rng=None,
                        epsilon: float = TRIM_EPSILON, max_rounds: int = 8) -> np.ndarray:
    """Random samples spread evenly over patches, each trimmed to its segment."""
    rng = np.random.default_rng(rng)
    patches = list(patches)
    segments = list(segments)
    if not patches:
        raise MetricsError("no patches to sample")
    per = math.ceil(n_total / len(patches))
    out = []
    for patch, seg in zip(patches, segments):
        seg = np.asarray(seg, dtype=float).reshape(-1, 3)
        kept, have = [], 0
        for _ in range(max_rounds):
            s = sample_surface(patch, 2 * per, rng, support=seg)
            s = s[trim_inlier_mask(seg, s, epsilon)]
            kept.append(s)
            have += len(s)
            if have >= per:
                break
        kept = np.vstack(kept)[:per]
        out.append(kept)
    samples = np.vstack(out)
    return samples[:n_total]


@dataclass
class MetricsReport:
    seg_miou: float
    label_miou: float
    residual: float
    p_coverage: float
    p_cover: float
    s_cover: float
    chamfer: float
    matched_pairs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["matched_pairs"] = [list(map(int, p)) for p in self.matched_pairs]
        return d


def evaluate(points, predicted: SegmentLabeling, predicted_patches, truth: SegmentLabeling,
             truth_patches=None, seed: int = 0, cd_samples: int = CD_SAMPLES,
             epsilon: float = COVERAGE_EPSILON) -> MetricsReport:
    """Full report for one shape.

    A ``None`` entry in ``predicted_patches`` marks a segment without a
    surface (for example points a detector left unassigned).

    Residual samples come from the ground-truth patches (trimmed to their
    segments) when given, otherwise from the ground-truth segment points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) != truth.n_points:
        raise MetricsError(f"{len(pts)} points but {truth.n_points} labels")
    rng = np.random.default_rng(seed)
    predicted_patches = list(predicted_patches)
    pairs = match_segments(predicted, truth)
    iou = iou_matrix(predicted, truth)
    gt_seg = [pts[truth.labels == j] for j in range(truth.k)]
    res_patches, res_samples = [], []
    for k, j in pairs:
        if predicted_patches[k] is None:
            continue
        if truth_patches is not None:
            s = sample_surface(truth_patches[j], SPLINE_SAMPLES, rng, support=gt_seg[j])
            s = s[trim_inlier_mask(gt_seg[j], s, TRIM_EPSILON)]
            s = s if len(s) else gt_seg[j]
        else:
            s = gt_seg[j]
        if len(s):
            res_patches.append(predicted_patches[k])
            res_samples.append(s)
    residual = residual_error(res_patches, res_samples) if res_patches else float("nan")
    segs = [pts[predicted.labels == k] for k in range(predicted.k)]
    usable = [(p, s) for p, s in zip(predicted_patches, segs) if p is not None and len(s)]
    recon = reconstruct_samples([p for p, _ in usable], [s for _, s in usable], cd_samples, rng)
    inputs = pts if len(pts) <= cd_samples else pts[rng.choice(len(pts), cd_samples, replace=False)]
    pc, sc, cd = chamfer_distance(recon, inputs)
    return MetricsReport(
        seg_miou=float(sum(iou[k, j] for k, j in pairs) / truth.k),
        label_miou=label_miou(predicted, truth, pairs),
        residual=residual,
        p_coverage=p_coverage(pts, [p for p in predicted_patches if p is not None], epsilon),
        p_cover=pc,
        s_cover=sc,
        chamfer=cd,
        matched_pairs=pairs,
    )
