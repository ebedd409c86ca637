"""Reference values for the training objectives.

These are plain numpy evaluations meant for parity checks and as quality
functionals; nothing here is differentiable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import cdist

from .assignment import solve_assignment
from .bspline import BSplinePatch, sample_uniform
from .primitives import primitive_distance

UNIT_TOLERANCE = 1e-6
PROB_FLOOR = 1e-12
LAPLACIAN_GRID = 40
N_KINDS = 6


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.9

    def __post_init__(self):
        if not self.margin >= 0:
            raise LossError("margin must be non-negative")


def _check_unit(x, name):
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1) > UNIT_TOLERANCE):
        raise LossError(f"{name} must be unit vectors")
    return x


def triplet_loss(anchor, positive, negative, config: TripletConfig | None = None):
    """max(|a - b| - |a - c| + margin, 0) for one triplet or row-wise for (T, D) arrays."""
    config = config or TripletConfig()
    a = _check_unit(anchor, "anchor")
    b = _check_unit(positive, "positive")
    c = _check_unit(negative, "negative")
    if not a.shape == b.shape == c.shape:
        raise LossError("triplet members differ in shape")
    d_pos = np.linalg.norm(a - b, axis=-1)
    d_neg = np.linalg.norm(a - c, axis=-1)
    out = np.maximum(d_pos - d_neg + config.margin, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def embedding_loss(triplet_sets, config: TripletConfig | None = None) -> float:
    """Sum over shapes of the mean triplet loss of each shape's triplet set.

    ``triplet_sets`` holds one (anchors, positives, negatives) tuple per shape.
    """
    total = 0.0
    for a, b, c in triplet_sets:
        values = np.atleast_1d(triplet_loss(a, b, c, config))
        if values.size == 0:
            raise LossError("empty triplet set")
        total += float(values.mean())
    return total


def classification_loss(probabilities, true_types) -> float:
    """Mean cross entropy of the true type under each row's distribution."""
    p = np.atleast_2d(np.asarray(probabilities, dtype=float))
    t = np.asarray(true_types).ravel()
    if len(p) != len(t):
        raise LossError(f"{len(p)} rows but {len(t)} labels")
    if len(t) == 0:
        raise LossError("no points")
    if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= p.shape[1]:
        raise LossError(f"labels must be integers in [0, {p.shape[1]})")
    picked = np.maximum(p[np.arange(len(t)), t], PROB_FLOOR)
    return float(-np.log(picked).mean())


# ---------------------------------------------------------------------------
# control points


def _grid_ops(n: int, closed: bool):
    idx = np.arange(n * n).reshape(n, n)
    shifts = range(n) if closed else [0]
    for s, ru, rv, tr in itertools.product(shifts, (False, True), (False, True), (False, True)):
        g = np.roll(idx, s, axis=0)
        if ru:
            g = g[::-1]
        if rv:
            g = g[:, ::-1]
        if tr:
            g = g.T
        yield g.ravel()


@lru_cache(maxsize=None)
def _permutations(n: int, closed: bool) -> np.ndarray:
    perms = np.unique(np.array(list(_grid_ops(n, closed))), axis=0)
    ident = np.arange(n * n)
    # identity first, the rest in a fixed order
    rest = perms[~np.all(perms == ident, axis=1)]
    return np.vstack([ident, rest])


def grid_permutations(n: int = 20, closed: bool = False) -> np.ndarray:
    """Flat index permutations of an ``n x n`` grid that leave the surface unchanged.

    Open grids: u/v reversals and transpose (8). Closed grids add every
    cyclic shift along u (8n; 160 for n = 20).
    """
    out = _permutations(int(n), bool(closed))
    out.flags.writeable = False
    return out


def control_point_loss(predicted, ground_truth, closed: bool = False) -> float:
    """Mean squared control-point error, minimized over grid permutations."""
    c = np.asarray(predicted, dtype=float)
    g = np.asarray(ground_truth, dtype=float)
    if c.shape != g.shape or c.ndim != 3 or c.shape[0] != c.shape[1] or c.shape[2] != 3:
        raise LossError(f"need two equal square grids, got {c.shape} and {g.shape}")
    n = c.shape[0]
    flat_c, flat_g = c.reshape(-1, 3), g.reshape(-1, 3)
    perms = grid_permutations(n, closed)
    err = ((flat_c[None] - flat_g[perms]) ** 2).sum(axis=(1, 2))
    return float(err.min() / (n * n))


# ---------------------------------------------------------------------------
# Laplacian


def grid_laplacian(samples, n: int = LAPLACIAN_GRID, closed_u: bool = False, closed_v: bool = False):
    """5-point Laplacian of an ``n x n`` row-major sample grid.

    Returns (laplacian (n*n, 3), interior mask); rows on an open boundary are
    not interior and their Laplacian is left at zero.
    """
    x = np.asarray(samples, dtype=float)
    if x.shape != (n * n, 3):
        raise LossError(f"expected a {n}x{n} grid of 3D samples, got shape {x.shape}")
    g = x.reshape(n, n, 3)
    lap = 4 * g - np.roll(g, 1, 0) - np.roll(g, -1, 0) - np.roll(g, 1, 1) - np.roll(g, -1, 1)
    interior = np.ones((n, n), dtype=bool)
    if not closed_u:
        interior[[0, -1], :] = False
    if not closed_v:
        interior[:, [0, -1]] = False
    lap[~interior] = 0.0
    return lap.reshape(-1, 3), interior.ravel()


def laplacian_loss(predicted_patch: BSplinePatch, gt_samples, gt_closed_u: bool | None = None,
                   gt_closed_v: bool | None = None, n: int = LAPLACIAN_GRID) -> float:
    """Mean squared difference of grid Laplacians over matched interior samples.

    The predicted patch is sampled on an ``n x n`` uv grid; samples are paired
    with ground-truth samples by minimum-cost assignment on squared distance.
    """
    _, pred = sample_uniform(predicted_patch, n, n)
    cu = predicted_patch.closed_u if gt_closed_u is None else gt_closed_u
    cv = predicted_patch.closed_v if gt_closed_v is None else gt_closed_v
    lap_p, in_p = grid_laplacian(pred, n, predicted_patch.closed_u, predicted_patch.closed_v)
    lap_g, in_g = grid_laplacian(gt_samples, n, cu, cv)
    m = solve_assignment(cdist(pred, np.asarray(gt_samples, float), "sqeuclidean"))
    keep = in_p[m.rows] & in_g[m.cols]
    if not np.any(keep):
        raise LossError("no matched interior samples")
    diff = lap_p[m.rows[keep]] - lap_g[m.cols[keep]]
    return float((diff**2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# patch distance


def patch_distance_loss(patches, gt_samples, n_samples: int = 2500) -> float:
    """Mean over patches of the mean squared distance from its samples to the patch."""
    patches = list(patches)
    gt_samples = list(gt_samples)
    if not patches:
        raise LossError("no patches")
    if len(patches) != len(gt_samples):
        raise LossError(f"{len(patches)} patches but {len(gt_samples)} sample sets")
    total = 0.0
    for patch, pts in zip(patches, gt_samples):
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise LossError("empty sample set")
        d = primitive_distance(pts, patch, n_samples)
        total += float(np.mean(d**2))
    return total / len(patches)
