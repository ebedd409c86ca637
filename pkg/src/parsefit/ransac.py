"""Sequential RANSAC baseline for planes, spheres, cylinders and cones.

A simplified take on efficient RANSAC: minimal sets are drawn from a local
neighborhood, candidates are scored on a subsample by inlier count with a
normal check, and the winner is refit by least squares on its inliers before
its points are removed. Tori are not supported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .primitives import (
    BASIC_KINDS,
    Cone,
    Cylinder,
    FitError,
    Plane,
    PrimitiveKind,
    Sphere,
    _radial,
    _unit,
    fit_cylinder,
    fit_primitive,
    primitive_distance,
)

log = logging.getLogger(__name__)

MINIMAL_SET = {
    PrimitiveKind.PLANE: 3,
    PrimitiveKind.SPHERE: 4,
    PrimitiveKind.CYLINDER: 2,
    PrimitiveKind.CONE: 3,
}


class RansacError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    inlier_epsilon: float = 0.01
    normal_epsilon: float = np.radians(20.0)
    min_inliers: int = 6
    min_fraction: float = 0.01
    max_candidates_per_round: int = 1000
    restarts: int = 3
    seed: int = 0
    neighborhood: int = 64
    score_subsample: int = 2000
    refit_rounds: int = 10
    simpler_ratio: float = 0.99

    def __post_init__(self):
        if not self.inlier_epsilon > 0:
            raise RansacError("inlier_epsilon must be positive")
        if self.min_inliers < 6:
            raise RansacError("min_inliers must be at least 6")
        if self.restarts < 1 or self.max_candidates_per_round < 1:
            raise RansacError("restarts and candidate budget must be positive")


@dataclass
class Detection:
    patch: object
    inliers: np.ndarray

    @property
    def kind(self) -> PrimitiveKind:
        return self.patch.kind


# ---------------------------------------------------------------------------
# minimal-set solvers


def _plane_from(p, n):
    normal = np.cross(p[1] - p[0], p[2] - p[0])
    if np.linalg.norm(normal) < 1e-12:
        return None
    normal = _unit(normal)
    return Plane(normal, float(normal @ p[0]))


def _sphere_from(p, n):
    a = np.column_stack([2 * p, np.ones(4)])
    b = (p**2).sum(axis=1)
    if abs(np.linalg.det(a)) < 1e-12:
        return None
    sol = np.linalg.solve(a, b)
    c = sol[:3]
    r2 = sol[3] + c @ c
    return Sphere(c, float(np.sqrt(r2))) if r2 > 0 else None


def _cylinder_from(p, n):
    axis = np.cross(n[0], n[1])
    if np.linalg.norm(axis) < 1e-6:
        return None
    axis = _unit(axis)
    # closest approach of the two normal lines, projected off the axis
    proj = np.eye(3) - np.outer(axis, axis)
    q, m = p @ proj, n @ proj
    a = np.column_stack([m[0], -m[1]])
    t, *_ = np.linalg.lstsq(a, q[1] - q[0], rcond=None)
    center = 0.5 * (q[0] + t[0] * m[0] + q[1] + t[1] * m[1])
    r = np.linalg.norm(q - center, axis=1).mean()
    return Cylinder(center, axis, float(r)) if r > 0 else None


def _cone_from(p, n):
    if abs(np.linalg.det(n)) < 1e-9:
        return None
    apex = np.linalg.solve(n, (n * p).sum(axis=1))
    d = p - apex
    if np.any(np.linalg.norm(d, axis=1) < 1e-9):
        return None
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    axis = np.cross(d[1] - d[0], d[2] - d[0])
    if np.linalg.norm(axis) < 1e-12:
        return None
    axis = _unit(axis)
    if (d @ axis).mean() < 0:
        axis = -axis
    theta = float(np.arccos(np.clip(d @ axis, -1, 1)).mean())
    if not 1e-3 < theta < np.pi / 2 - 1e-3:
        return None
    return Cone(apex, axis, theta)


_SOLVERS = {
    PrimitiveKind.PLANE: _plane_from,
    PrimitiveKind.SPHERE: _sphere_from,
    PrimitiveKind.CYLINDER: _cylinder_from,
    PrimitiveKind.CONE: _cone_from,
}


def surface_normals(points, patch) -> np.ndarray:
    """Unit surface normals of a basic primitive at the points' foot positions (sign-free)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if isinstance(patch, Plane):
        return np.tile(patch.normal, (len(pts), 1))
    if isinstance(patch, Sphere):
        d = pts - patch.center
        return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    if isinstance(patch, Cylinder):
        _, _, radial, rho = _radial(pts, patch.center, patch.direction)
        return radial / np.maximum(rho, 1e-300)[:, None]
    if isinstance(patch, Cone):
        _, h, radial, rho = _radial(pts, patch.apex, patch.direction)
        ring = radial / np.maximum(rho, 1e-300)[:, None]
        return np.cos(patch.half_angle) * ring - np.sin(patch.half_angle) * patch.direction
    raise TypeError(f"not a basic primitive: {type(patch).__name__}")


def inlier_mask(points, normals, patch, config: RansacConfig) -> np.ndarray:
    ok = primitive_distance(points, patch) < config.inlier_epsilon
    if np.any(ok):
        agree = np.abs(np.einsum("ij,ij->i", surface_normals(points[ok], patch), normals[ok]))
        ok[np.flatnonzero(ok)] = agree >= np.cos(config.normal_epsilon)
    return ok


# ---------------------------------------------------------------------------
# detection


def _refit(kind, points, normals, mask, patch, config):
    for _ in range(config.refit_rounds):
        if mask.sum() < max(config.min_inliers, MINIMAL_SET[kind] + 3):
            break
        try:
            if isinstance(patch, Cylinder):
                # warm start; the multi-start search is not needed near a fit
                new = fit_cylinder(points[mask], axis=patch.direction)
            else:
                new = fit_primitive(kind, points[mask], normals[mask])
        except (FitError, np.linalg.LinAlgError):
            break
        new_mask = inlier_mask(points, normals, new, config)
        if new_mask.sum() < mask.sum():
            break
        patch, mask = new, new_mask
    return patch, mask


def _prefer_simpler(kind, points, normals, patch, mask, config):
    # A huge sphere or cylinder can pass for a plane; keep the simplest kind
    # that explains nearly as many points.
    count = mask.sum()
    for simpler in BASIC_KINDS[: BASIC_KINDS.index(kind)]:
        if count < MINIMAL_SET[simpler] + 3:
            continue
        try:
            cand = fit_primitive(simpler, points[mask], normals[mask])
        except (FitError, np.linalg.LinAlgError):
            continue
        cand_mask = inlier_mask(points, normals, cand, config)
        cand, cand_mask = _refit(simpler, points, normals, cand_mask, cand, config)
        if cand_mask.sum() >= config.simpler_ratio * count:
            return cand, cand_mask
    return patch, mask


def _round(points, normals, tree, rng, config, min_count):
    n = len(points)
    sub = rng.choice(n, min(n, config.score_subsample), replace=False)
    k = min(config.neighborhood, n)
    candidates = []
    for kind in BASIC_KINDS:
        m = MINIMAL_SET[kind]
        if n < m:
            continue
        for _ in range(config.max_candidates_per_round // len(BASIC_KINDS)):
            seed = rng.integers(n)
            _, nbrs = tree.query(points[seed], k=k)
            nbrs = np.atleast_1d(nbrs)
            nbrs = nbrs[nbrs != seed]
            if len(nbrs) < m - 1:
                continue
            idx = np.concatenate([[seed], rng.choice(nbrs, m - 1, replace=False)])
            patch = _SOLVERS[kind](points[idx], normals[idx])
            if patch is None:
                continue
            score = int(inlier_mask(points[sub], normals[sub], patch, config).sum())
            candidates.append((score, kind, patch))
    if not candidates:
        return None
    order = np.argsort([-c[0] for c in candidates], kind="stable")
    best = None
    for i in order[:5]:
        _, kind, patch = candidates[i]
        mask = inlier_mask(points, normals, patch, config)
        patch, mask = _refit(kind, points, normals, mask, patch, config)
        count = int(mask.sum())
        if count >= min_count and (best is None or count > best[3]):
            best = (kind, patch, mask, count)
    if best is None:
        return None
    kind, patch, mask, _ = best
    patch, mask = _prefer_simpler(kind, points, normals, patch, mask, config)
    return patch, mask, int(mask.sum())


def _run(points, normals, rng, config) -> list[Detection]:
    remaining = np.arange(len(points))
    min_count = max(config.min_inliers, int(np.ceil(config.min_fraction * len(points))))
    found = []
    while len(remaining) >= min_count:
        pts, nrm = points[remaining], normals[remaining]
        best = _round(pts, nrm, cKDTree(pts), rng, config, min_count)
        if best is None:
            break
        patch, mask, _ = best
        found.append(Detection(patch, remaining[mask]))
        remaining = remaining[~mask]
    return found


def coverage(detections, n_points: int) -> float:
    return sum(len(d.inliers) for d in detections) / max(n_points, 1)


def detect_primitives(points, normals, config: RansacConfig | None = None) -> list[Detection]:
    """Best-coverage run out of ``config.restarts`` sequential RANSAC runs."""
    config = config or RansacConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise RansacError("empty point cloud")
    if normals is None:
        raise RansacError("RANSAC needs per-point normals")
    nrm = np.asarray(normals, dtype=float).reshape(-1, 3)
    if nrm.shape != pts.shape:
        raise RansacError("normals must match points")
    best, best_cov = [], -1.0
    for r in range(config.restarts):
        rng = np.random.default_rng([config.seed, r])
        found = _run(pts, nrm, rng, config)
        cov = coverage(found, len(pts))
        log.info("ransac run %d: %d primitives, coverage %.3f", r, len(found), cov)
        if cov > best_cov:
            best, best_cov = found, cov
    return best
