"""Point text files, patch-set JSON and OBJ mesh export."""

from __future__ import annotations

import json

import numpy as np

from .bspline import BSplinePatch, ControlGrid, KnotVector, sample_uniform
from .postprocess import grid_quads
from .primitives import (
    Cone,
    Cylinder,
    Plane,
    PrimitiveKind,
    Sphere,
    _frame_extent,
    _tangent_basis,
    patch_kind,
    trim_inlier_mask,
)

MESH_GRID = 40
TRIM_EPSILON = 0.1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# points


def read_points(path):
    """Read "x y z" or "x y z nx ny nz" rows; '#' lines are comments.

    Returns (positions, normals or None).
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals = [float(t) for t in line.split()]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value") from None
            if len(vals) not in (3, 6):
                raise FormatError(f"{path}:{lineno}: expected 3 or 6 values, got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise FormatError(f"{path}: rows mix 3 and 6 columns")
    data = np.array(rows)
    if data.shape[1] == 3:
        return data, None
    normals = data[:, 3:]
    return data[:, :3], normals / np.linalg.norm(normals, axis=1, keepdims=True)


def write_points(path, positions, normals=None) -> None:
    data = np.asarray(positions, dtype=float)
    if normals is not None:
        data = np.hstack([data, np.asarray(normals, dtype=float)])
    np.savetxt(path, data, fmt="%.10g")


# ---------------------------------------------------------------------------
# patches


def patch_to_dict(patch) -> dict:
    kind = patch_kind(patch)
    if isinstance(patch, Plane):
        params = {"normal": patch.normal.tolist(), "offset": patch.offset}
    elif isinstance(patch, Sphere):
        params = {"center": patch.center.tolist(), "radius": patch.radius}
    elif isinstance(patch, Cylinder):
        params = {"center": patch.center.tolist(), "direction": patch.direction.tolist(), "radius": patch.radius}
    elif isinstance(patch, Cone):
        params = {"apex": patch.apex.tolist(), "direction": patch.direction.tolist(),
                  "half_angle": patch.half_angle}
    elif isinstance(patch, BSplinePatch):
        p, q = patch.shape
        params = {
            "grid_rows": p,
            "grid_cols": q,
            "closed_u": patch.closed_u,
            "closed_v": patch.closed_v,
            "control_points": patch.control_points.reshape(-1, 3).tolist(),
            "knots_u": np.asarray(patch.knots_u.values).tolist(),
            "knots_v": np.asarray(patch.knots_v.values).tolist(),
        }
    else:
        raise TypeError(f"not a patch: {type(patch).__name__}")
    return {"kind": kind.value, "params": params}


def patch_from_dict(d: dict):
    try:
        kind = PrimitiveKind(d["kind"])
        p = d["params"]
        if kind == PrimitiveKind.PLANE:
            return Plane(np.array(p["normal"], float), p["offset"])
        if kind == PrimitiveKind.SPHERE:
            return Sphere(np.array(p["center"], float), p["radius"])
        if kind == PrimitiveKind.CYLINDER:
            return Cylinder(np.array(p["center"], float), np.array(p["direction"], float), p["radius"])
        if kind == PrimitiveKind.CONE:
            return Cone(np.array(p["apex"], float), np.array(p["direction"], float), p["half_angle"])
        rows, cols = int(p["grid_rows"]), int(p["grid_cols"])
        cu, cv = bool(p["closed_u"]), bool(p["closed_v"])
        pts = np.array(p["control_points"], float).reshape(rows, cols, 3)
        patch = BSplinePatch(ControlGrid(pts, cu, cv), KnotVector(np.array(p["knots_u"], float), cu),
                             KnotVector(np.array(p["knots_v"], float), cv))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad patch record: {exc}") from exc
    if patch_kind(patch) != kind:
        raise FormatError(f"kind {kind.value} does not match the spline's closure flags")
    return patch


def write_patch_set(path, patches, indices, config=None, metrics=None) -> None:
    """``patches`` and ``indices`` are parallel lists."""
    doc = {
        "patches": [
            {**patch_to_dict(p), "point_indices": np.asarray(i, dtype=int).tolist()}
            for p, i in zip(patches, indices)
        ],
        "config": config or {},
    }
    if metrics is not None:
        doc["metrics"] = metrics
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_patch_set(path):
    """Returns (patches, point index arrays, config dict)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "patches" not in doc:
        raise FormatError(f"{path}: missing 'patches'")
    patches, indices = [], []
    for rec in doc["patches"]:
        patches.append(patch_from_dict(rec))
        indices.append(np.asarray(rec.get("point_indices", []), dtype=int))
    return patches, indices, doc.get("config", {})


def labels_from_indices(indices, n_points: int) -> np.ndarray:
    """Per-point segment ids; points in no segment get -1."""
    labels = np.full(n_points, -1, dtype=int)
    for k, idx in enumerate(indices):
        if len(idx) and (np.min(idx) < 0 or np.max(idx) >= n_points):
            raise FormatError(f"segment {k} indexes outside the point cloud")
        labels[idx] = k
    return labels


# ---------------------------------------------------------------------------
# meshes


def surface_grid(patch, support=None, n: int = MESH_GRID, margin: float = 0.0):
    """(n*n, 3) row-major grid samples plus (closed_u, closed_v) for meshing.

    Unbounded kinds are bounded by the extent of ``support`` points.
    """
    if isinstance(patch, BSplinePatch):
        return sample_uniform(patch, n, n)[1], (patch.closed_u, patch.closed_v)
    s, t = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    s, t = s.ravel(), t.ravel()
    if isinstance(patch, Sphere):
        phi = 2 * np.pi * s * (n - 1) / n
        theta = np.pi * t
        d = np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
        return patch.center + patch.radius * d, (True, False)
    if support is None:
        raise ValueError(f"{patch.kind.value} meshes need support points")
    support = np.asarray(support, dtype=float)
    if isinstance(patch, Plane):
        e1, e2 = _tangent_basis(patch.normal)
        origin = patch.offset * patch.normal
        a, b = (support - origin) @ e1, (support - origin) @ e2
        x = a.min() - margin + s * (np.ptp(a) + 2 * margin)
        y = b.min() - margin + t * (np.ptp(b) + 2 * margin)
        return origin + x[:, None] * e1 + y[:, None] * e2, (False, False)
    axis = patch.direction
    origin = patch.center if isinstance(patch, Cylinder) else patch.apex
    e1, e2 = _tangent_basis(axis)
    lo, hi = _frame_extent(support, origin, axis)
    h = lo - margin + t * (hi - lo + 2 * margin)
    phi = 2 * np.pi * s * (n - 1) / n
    ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    if isinstance(patch, Cylinder):
        r = np.full_like(h, patch.radius)
    else:
        h = np.maximum(h, 0.0)
        r = h * np.tan(patch.half_angle)
    return origin + h[:, None] * axis + r[:, None] * ring, (True, False)


def write_obj(path, patches, supports, n: int = MESH_GRID, epsilon: float = TRIM_EPSILON) -> None:
    """One object per patch with quad faces; faces with a vertex farther than
    ``epsilon`` from the patch's support points are trimmed."""
    lines = []
    base = 1
    for k, (patch, support) in enumerate(zip(patches, supports)):
        verts, (cu, cv) = surface_grid(patch, support, n)
        quads = grid_quads(n, n, cu, cv)
        if support is not None and len(support):
            keep = trim_inlier_mask(support, verts, epsilon)
            quads = quads[keep[quads].all(axis=1)]
        lines.append(f"o patch_{k}_{patch_kind(patch).value}")
        lines.extend(f"v {x:.8g} {y:.8g} {z:.8g}" for x, y, z in verts)
        lines.extend("f " + " ".join(str(base + i) for i in q) for q in quads)
        base += len(verts)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
