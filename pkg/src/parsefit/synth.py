"""Synthetic point-cloud scenes with known segments, kinds and patches.

Noise follows the training-data augmentation: uniform offsets in
[-0.01, 0.01] along the normal and normal perturbations up to 3 degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bspline import BSplinePatch, greville_abscissae
from .primitives import Cone, Cylinder, Plane, PrimitiveKind, PrimitivePatch, Sphere, _tangent_basis

POSITION_NOISE = 0.01
NORMAL_NOISE_DEG = 3.0


@dataclass
class Scene:
    points: np.ndarray
    normals: np.ndarray
    labels: np.ndarray
    kinds: list[PrimitiveKind]
    patches: list[PrimitivePatch]
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def segment(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def perturb(points, normals, rng, position_noise=POSITION_NOISE, normal_noise_deg=NORMAL_NOISE_DEG):
    """Offset points along their normals and tilt normals by a bounded angle."""
    points = points + rng.uniform(-position_noise, position_noise, (len(points), 1)) * normals
    if normal_noise_deg > 0:
        angle = np.radians(rng.uniform(-normal_noise_deg, normal_noise_deg, len(normals)))
        tangent = np.cross(normals, rng.normal(size=normals.shape))
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        normals = np.cos(angle)[:, None] * normals + np.sin(angle)[:, None] * tangent
    return points, normals


def sample_plane(rng, n, origin, normal, size):
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    e1, e2 = _tangent_basis(normal)
    s = rng.uniform(-size / 2, size / 2, (n, 2))
    pts = np.asarray(origin) + s[:, :1] * e1 + s[:, 1:] * e2
    return pts, np.tile(normal, (n, 1)), Plane(normal, normal @ origin)


def sample_sphere(rng, n, center, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d, d, Sphere(center, radius)


def sample_cylinder(rng, n, center, direction, radius, height):
    a = np.asarray(direction, float) / np.linalg.norm(direction)
    e1, e2 = _tangent_basis(a)
    phi = rng.uniform(0, 2 * np.pi, n)
    h = rng.uniform(-height / 2, height / 2, n)
    nrm = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    return np.asarray(center) + h[:, None] * a + radius * nrm, nrm, Cylinder(center, a, radius)


def sample_cone(rng, n, apex, direction, half_angle, h_min, h_max):
    a = np.asarray(direction, float) / np.linalg.norm(direction)
    e1, e2 = _tangent_basis(a)
    phi = rng.uniform(0, 2 * np.pi, n)
    h = np.sqrt(rng.uniform(h_min**2, h_max**2, n))
    ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    pts = np.asarray(apex) + h[:, None] * a + (h * np.tan(half_angle))[:, None] * ring
    nrm = np.cos(half_angle) * ring - np.sin(half_angle) * a
    return pts, nrm, Cone(apex, a, half_angle)


def bspline_normals(patch: BSplinePatch, uv, h=1e-6):
    u, v = uv[:, 0], uv[:, 1]
    su = patch.evaluate_many(np.clip(u + h, 0, 1), v) - patch.evaluate_many(np.clip(u - h, 0, 1), v)
    sv = patch.evaluate_many(u, np.clip(v + h, 0, 1)) - patch.evaluate_many(u, np.clip(v - h, 0, 1))
    n = np.cross(su, sv)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def sample_bspline(rng, n, patch: BSplinePatch):
    """Approximately area-uniform samples by rejection on the area element."""
    uv = rng.random((4 * n, 2))
    u, v = uv[:, 0], uv[:, 1]
    h = 1e-6
    su = patch.evaluate_many(np.clip(u + h, 0, 1), v) - patch.evaluate_many(np.clip(u - h, 0, 1), v)
    sv = patch.evaluate_many(u, np.clip(v + h, 0, 1)) - patch.evaluate_many(u, np.clip(v - h, 0, 1))
    area = np.linalg.norm(np.cross(su, sv), axis=1)
    keep = rng.random(len(uv)) * area.max() <= area
    uv = uv[keep][:n]
    if len(uv) < n:
        uv = np.vstack([uv, rng.random((n - len(uv), 2))])
    return patch.evaluate_many(uv[:, 0], uv[:, 1]), bspline_normals(patch, uv), uv


def smooth_field(rng, s, t, amplitude, modes=4, max_freq=2, periodic_s=False):
    out = np.zeros_like(s)
    for _ in range(modes):
        fs, ft = rng.integers(0, max_freq + 1, 2)
        ps, pt = rng.uniform(0, 2 * np.pi, 2)
        ks = 2 * np.pi * fs if periodic_s else np.pi * fs
        out += amplitude / modes * rng.uniform(-1, 1) * np.cos(ks * s + ps) * np.cos(np.pi * ft * t + pt)
    return out


def random_smooth_patch(rng, p, q, closed_u=False, amplitude=0.2, scale=1.0) -> BSplinePatch:
    """Control grid sampled from a smooth random displacement of a sheet or tube."""
    s, t = np.meshgrid(greville_abscissae(p, closed_u), greville_abscissae(q), indexing="ij")
    if closed_u:
        th = 2 * np.pi * s
        r = 0.3 + smooth_field(rng, s, t, amplitude / 2, periodic_s=True)
        z = t + smooth_field(rng, s, t, amplitude / 2, periodic_s=True)
        pts = np.stack([r * np.cos(th), r * np.sin(th), z], axis=-1)
    else:
        pts = np.stack(
            [s + smooth_field(rng, s, t, amplitude / 2), t + smooth_field(rng, s, t, amplitude / 2),
             smooth_field(rng, s, t, amplitude)],
            axis=-1,
        )
    return BSplinePatch.from_points(scale * pts, closed_u=closed_u)


def saddle_patch(center, size, height, grid=8) -> BSplinePatch:
    """Doubly curved open patch that no basic primitive approximates well."""
    g = greville_abscissae(grid)
    s, t = np.meshgrid(g - 0.5, g - 0.5, indexing="ij")
    z = height * (4 * s * t + 1.5 * np.sin(2 * np.pi * s) * (t + 0.5) ** 2)
    pts = np.stack([size * s, size * t, z], axis=-1) + np.asarray(center)
    return BSplinePatch.from_points(pts)


def wavy_segment(rng, n=8000, frequency=11.0, amplitude=0.1, size=1.0):
    """Points on z = a sin(2 pi f x) sin(2 pi f y) over a square; too detailed for 20x20 controls."""
    xy = rng.random((n, 2))
    z = amplitude * np.sin(2 * np.pi * frequency * xy[:, 0]) * np.sin(2 * np.pi * frequency * xy[:, 1])
    return np.column_stack([size * xy, z])


def _assemble(parts, rng, noise, name):
    pts, nrm, labels, kinds, patches = [], [], [], [], []
    for k, (p, n, patch, kind) in enumerate(parts):
        pts.append(p)
        nrm.append(n)
        labels.append(np.full(len(p), k))
        kinds.append(kind)
        patches.append(patch)
    points, normals = np.vstack(pts), np.vstack(nrm)
    if noise:
        points, normals = perturb(points, normals, rng)
    return Scene(points, normals, np.concatenate(labels), kinds, patches, name)


def scene_plane(rng, n=1000, noise=False):
    p, nrm, pl = sample_plane(rng, n, (0.0, 0.0, 0.0), (0, 0, 1), 1.0)
    return _assemble([(p, nrm, pl, PrimitiveKind.PLANE)], rng, noise, "plane")


def scene_two_planes(rng, n=200, gap=0.5, noise=False):
    a = sample_plane(rng, n, (0.0, 0.0, 0.0), (0, 0, 1), 1.0)
    b = sample_plane(rng, n, (0.0, 0.0, gap), (0, 0, 1), 1.0)
    return _assemble(
        [(a[0], a[1], a[2], PrimitiveKind.PLANE), (b[0], b[1], b[2], PrimitiveKind.PLANE)],
        rng, noise, "two_planes",
    )


def scene_two_spheres(rng, n=500, noise=False):
    a = sample_sphere(rng, n, (-0.3, 0.0, 0.0), 0.2)
    b = sample_sphere(rng, n, (0.35, 0.1, 0.0), 0.15)
    return _assemble(
        [(a[0], a[1], a[2], PrimitiveKind.SPHERE), (b[0], b[1], b[2], PrimitiveKind.SPHERE)],
        rng, noise, "two_spheres",
    )


def scene_primitives(rng, n_per=2500, noise=True, with_spline=False, spacing=0.3, size=0.3):
    """Plane, cylinder and sphere (and optionally a saddle B-spline) on a 2x2 layout."""
    d, sz = spacing, size
    parts = []
    p, nrm, pl = sample_plane(rng, n_per, (-d, -d, -0.05), (0, 0, 1), sz)
    parts.append((p, nrm, pl, PrimitiveKind.PLANE))
    p, nrm, cy = sample_cylinder(rng, n_per, (-d, d, 0.0), (0, 0, 1), 0.35 * sz, sz)
    parts.append((p, nrm, cy, PrimitiveKind.CYLINDER))
    p, nrm, sp = sample_sphere(rng, n_per, (d, -d, 0.0), 0.45 * sz)
    parts.append((p, nrm, sp, PrimitiveKind.SPHERE))
    if with_spline:
        patch = saddle_patch((d, d, 0.0), sz, 0.3 * sz)
        p, nrm, _ = sample_bspline(rng, n_per, patch)
        parts.append((p, nrm, patch, PrimitiveKind.OPEN_BSPLINE))
    return _assemble(parts, rng, noise, "mixed" if with_spline else "primitives")


def scene_mixed(rng, n_per=2500, noise=True):
    return scene_primitives(rng, n_per, noise, with_spline=True)


SCENES = {
    "plane": scene_plane,
    "two_planes": scene_two_planes,
    "two_spheres": scene_two_spheres,
    "primitives": scene_primitives,
    "mixed": scene_mixed,
}


def make_scene(name: str, seed: int = 0, **kwargs) -> Scene:
    if name not in SCENES:
        raise KeyError(f"unknown scene {name!r}; choose from {sorted(SCENES)}")
    return SCENES[name](np.random.default_rng(seed), **kwargs)
