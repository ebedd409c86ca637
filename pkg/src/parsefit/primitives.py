"""Basic primitives: least-squares fitting, distances and trimming."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from .bspline import BSplinePatch, sample_uniform

HALF_ANGLE_MIN = 1e-4
HALF_ANGLE_MAX = np.pi / 2 - 1e-4


class FitError(ValueError):
    pass


class PrimitiveKind(str, enum.Enum):
    PLANE = "plane"
    SPHERE = "sphere"
    CYLINDER = "cylinder"
    CONE = "cone"
    OPEN_BSPLINE = "open_bspline"
    CLOSED_BSPLINE = "closed_bspline"

    @property
    def is_bspline(self) -> bool:
        return self in (PrimitiveKind.OPEN_BSPLINE, PrimitiveKind.CLOSED_BSPLINE)


# Tie-break order for majority votes.
KIND_ORDER = list(PrimitiveKind)
BASIC_KINDS = KIND_ORDER[:4]
MIN_POINTS = {
    PrimitiveKind.PLANE: 3,
    PrimitiveKind.SPHERE: 4,
    PrimitiveKind.CYLINDER: 6,
    PrimitiveKind.CONE: 6,
}


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise FitError("zero-length direction")
    return v / n


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "normal", _unit(self.normal))
        object.__setattr__(self, "offset", float(self.offset))

    kind = PrimitiveKind.PLANE
    n_params = 3


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise FitError("sphere radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    kind = PrimitiveKind.SPHERE
    n_params = 4


@dataclass(frozen=True)
class Cylinder:
    center: np.ndarray
    direction: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "direction", _unit(self.direction))
        if not self.radius > 0:
            raise FitError("cylinder radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    kind = PrimitiveKind.CYLINDER
    n_params = 5


@dataclass(frozen=True)
class Cone:
    """Single-nappe cone opening along ``direction``; ``half_angle`` in radians."""

    apex: np.ndarray
    direction: np.ndarray
    half_angle: float

    def __post_init__(self):
        object.__setattr__(self, "apex", np.asarray(self.apex, dtype=float))
        object.__setattr__(self, "direction", _unit(self.direction))
        if not 0 < self.half_angle < np.pi / 2:
            raise FitError("cone half-angle must lie in (0, pi/2)")
        object.__setattr__(self, "half_angle", float(self.half_angle))

    kind = PrimitiveKind.CONE
    n_params = 6


Primitive = Union[Plane, Sphere, Cylinder, Cone]
PrimitivePatch = Union[Plane, Sphere, Cylinder, Cone, BSplinePatch]


def patch_kind(patch: PrimitivePatch) -> PrimitiveKind:
    if isinstance(patch, BSplinePatch):
        closed = patch.closed_u or patch.closed_v
        return PrimitiveKind.CLOSED_BSPLINE if closed else PrimitiveKind.OPEN_BSPLINE
    return patch.kind


def parameter_count(patch: PrimitivePatch) -> int:
    if isinstance(patch, BSplinePatch):
        p, q = patch.shape
        return 3 * p * q
    return patch.n_params


# ---------------------------------------------------------------------------
# distances


def _cross(a, b):
    # np.cross is slow on single vectors and this sits in inner loops
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _tangent_basis(a: np.ndarray):
    helper = np.eye(3)[np.argmin(np.abs(a))]
    e1 = _cross(a, helper)
    e1 /= np.sqrt(e1 @ e1)
    return e1, _cross(a, e1)


def _radial(points, origin, axis):
    d = points - origin
    h = d @ axis
    w = d - h[:, None] * axis
    rho = np.linalg.norm(w, axis=1)
    return d, h, w, rho


def cone_distance(points, cone: Cone) -> np.ndarray:
    d, h, _, rho = _radial(np.atleast_2d(points), cone.apex, cone.direction)
    c, s = np.cos(cone.half_angle), np.sin(cone.half_angle)
    along = h * c + rho * s
    return np.where(along >= 0, np.abs(rho * c - h * s), np.linalg.norm(d, axis=1))


def bspline_samples(patch: BSplinePatch, n_samples: int = 2500):
    n = max(2, int(round(np.sqrt(n_samples))))
    return sample_uniform(patch, n, n)


def _surface_frame(patch: BSplinePatch, uv, h=1e-6):
    up, um = np.clip(uv + [h, 0], 0, 1), np.clip(uv - [h, 0], 0, 1)
    vp, vm = np.clip(uv + [0, h], 0, 1), np.clip(uv - [0, h], 0, 1)
    su = patch.evaluate_many(up[:, 0], up[:, 1]) - patch.evaluate_many(um[:, 0], um[:, 1])
    sv = patch.evaluate_many(vp[:, 0], vp[:, 1]) - patch.evaluate_many(vm[:, 0], vm[:, 1])
    return su / (up[:, :1] - um[:, :1]), sv / (vp[:, 1:] - vm[:, 1:])


def _newton_project(points, patch: BSplinePatch, uv, iterations: int):
    uv = uv.copy()
    best = np.linalg.norm(points - patch.evaluate_many(uv[:, 0], uv[:, 1]), axis=1)
    best_uv = uv.copy()
    for _ in range(iterations):
        su, sv = _surface_frame(patch, uv)
        r = points - patch.evaluate_many(uv[:, 0], uv[:, 1])
        a11, a12, a22 = (su * su).sum(1), (su * sv).sum(1), (sv * sv).sum(1)
        b1, b2 = (su * r).sum(1), (sv * r).sum(1)
        det = a11 * a22 - a12**2
        ok = np.abs(det) > 1e-18
        safe = np.where(ok, det, 1.0)
        step = np.column_stack([(a22 * b1 - a12 * b2) / safe, (a11 * b2 - a12 * b1) / safe])
        uv = uv + np.where(ok[:, None], step, 0.0)
        if patch.closed_u:
            uv[:, 0] = np.mod(uv[:, 0], 1.0)
        if patch.closed_v:
            uv[:, 1] = np.mod(uv[:, 1], 1.0)
        uv = np.clip(uv, 0.0, 1.0)
        d = np.linalg.norm(points - patch.evaluate_many(uv[:, 0], uv[:, 1]), axis=1)
        better = d < best
        best[better], best_uv[better] = d[better], uv[better]
    return best_uv, best


def project_to_bspline(points, patch: BSplinePatch, n_samples: int = 2500, iterations: int = 8, seeds=None):
    """Closest-point parameters by Gauss-Newton from the nearest dense sample.

    Optional ``seeds`` give a second starting uv per point; the closer of the
    two results wins. Returns ``(uv, distances)``; distances never exceed
    the dense-sample ones.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    uv_s, pts_s = bspline_samples(patch, n_samples)
    _, idx = cKDTree(pts_s).query(points)
    uv, dist = _newton_project(points, patch, uv_s[idx], iterations)
    if seeds is not None:
        uv2, dist2 = _newton_project(points, patch, np.asarray(seeds, dtype=float), iterations)
        closer = dist2 <= dist
        uv[closer], dist[closer] = uv2[closer], dist2[closer]
    return uv, dist


def primitive_distance(points, patch: PrimitivePatch, n_samples: int = 2500, project: bool = False):
    """Unsigned distance from each point to the patch surface.

    Analytic for basic primitives. For B-splines, the distance to the nearest
    of ``n_samples`` uniform samples, optionally refined by projection.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if isinstance(patch, Plane):
        d = np.abs(pts @ patch.normal - patch.offset)
    elif isinstance(patch, Sphere):
        d = np.abs(np.linalg.norm(pts - patch.center, axis=1) - patch.radius)
    elif isinstance(patch, Cylinder):
        _, _, _, rho = _radial(pts, patch.center, patch.direction)
        d = np.abs(rho - patch.radius)
    elif isinstance(patch, Cone):
        d = cone_distance(pts, patch)
    elif isinstance(patch, BSplinePatch):
        if project:
            d = project_to_bspline(pts, patch, n_samples)[1]
        else:
            d = cKDTree(bspline_samples(patch, n_samples)[1]).query(pts)[0]
    else:
        raise TypeError(f"not a patch: {type(patch).__name__}")
    return float(d[0]) if single else d


# ---------------------------------------------------------------------------
# fitting


def estimate_normals(points, k: int = 16) -> np.ndarray:
    """Unoriented normals from local PCA over ``k`` nearest neighbors."""
    points = np.asarray(points, dtype=float)
    k = min(k, len(points))
    _, nbr = cKDTree(points).query(points, k=k)
    nb = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _gauss_newton(residual_jac, retract, state, max_iter=100, grad_tol=1e-10, cost_rtol=1e-12):
    """Damped Gauss-Newton over a manifold state; never increases the cost.

    Stops on a small gradient or when a step lowers the cost by less than
    ``cost_rtol`` relative.
    """
    r, jac = residual_jac(state)
    cost = r @ r
    lam = 1e-9
    for _ in range(max_iter):
        g = jac.T @ r
        if np.linalg.norm(g) < grad_tol:
            break
        jtj = jac.T @ jac
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = retract(state, step)
            if cand is None:
                lam *= 10
                continue
            r_new, jac_new = residual_jac(cand)
            c_new = r_new @ r_new
            if c_new <= cost:
                improved = c_new < cost * (1 - cost_rtol)
                state, r, jac, cost = cand, r_new, jac_new, c_new
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not improved:
            break
    return state, cost


def _check_points(points, kind: PrimitiveKind) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise FitError("points must have shape (N, 3)")
    if len(pts) < MIN_POINTS[kind]:
        raise FitError(f"{kind.value} needs at least {MIN_POINTS[kind]} points, got {len(pts)}")
    if np.ptp(pts, axis=0).max() == 0:
        raise FitError("all points coincide")
    return pts


def fit_plane(points) -> Plane:
    pts = _check_points(points, PrimitiveKind.PLANE)
    c = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - c, full_matrices=False)
    if s[1] <= 1e-12 * s[0]:
        raise FitError("points are collinear")
    n = vt[2]
    return Plane(n, n @ c)


def fit_sphere(points) -> Sphere:
    pts = _check_points(points, PrimitiveKind.SPHERE)
    shift = pts.mean(axis=0)
    x = pts - shift
    a = np.column_stack([2 * x, np.ones(len(x))])
    b = np.einsum("ij,ij->i", x, x)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    center = sol[:3]
    r2 = sol[3] + center @ center
    if not r2 > 0:
        raise FitError("degenerate sphere configuration")
    state = np.append(center, np.sqrt(r2))

    def res_jac(s):
        d = x - s[:3]
        dist = np.linalg.norm(d, axis=1)
        unit = d / np.maximum(dist, 1e-300)[:, None]
        return dist - s[3], np.column_stack([-unit, -np.ones(len(x))])

    state, _ = _gauss_newton(res_jac, lambda s, step: s + step, state)
    if not state[3] > 0:
        raise FitError("degenerate sphere configuration")
    return Sphere(state[:3] + shift, state[3])


def _fit_circle_2d(xy):
    a = np.column_stack([2 * xy, np.ones(len(xy))])
    b = np.einsum("ij,ij->i", xy, xy)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    r2 = sol[2] + sol[:2] @ sol[:2]
    return sol[:2], np.sqrt(max(r2, 1e-300))


def _cylinder_from_axis(x, axis):
    e1, e2 = _tangent_basis(axis)
    center2, radius = _fit_circle_2d(np.column_stack([x @ e1, x @ e2]))
    return center2[0] * e1 + center2[1] * e2, radius


def _refine_cylinder(x, center, axis, radius):
    def res_jac(state):
        c, a, r = state
        e1, e2 = _tangent_basis(a)
        d, h, w, rho = _radial(x, c, a)
        wh = w / np.maximum(rho, 1e-300)[:, None]
        we1, we2 = wh @ e1, wh @ e2
        jac = np.column_stack([-we1, -we2, -h * we1, -h * we2, -np.ones(len(x))])
        return rho - r, jac

    def retract(state, step):
        c, a, r = state
        e1, e2 = _tangent_basis(a)
        a_new = a + step[2] * e1 + step[3] * e2
        r_new = r + step[4]
        if r_new <= 0:
            return None
        return (c + step[0] * e1 + step[1] * e2, a_new / np.linalg.norm(a_new), r_new)

    return _gauss_newton(res_jac, retract, (center, axis, radius))


def _normal_axis(normals):
    # Axis of a surface of revolution of zero slope: orthogonal to all normals.
    _, vecs = np.linalg.eigh(normals.T @ normals)
    return vecs[:, 0]


def fit_cylinder(points, normals=None, axis=None) -> Cylinder:
    """Least-squares cylinder.

    Gauss-Newton is started from the normal-derived axis and each principal
    direction, keeping the best; a given ``axis`` is used as the only start.
    """
    pts = _check_points(points, PrimitiveKind.CYLINDER)
    shift = pts.mean(axis=0)
    x = pts - shift
    if axis is not None:
        candidates = [_unit(axis)]
    else:
        if normals is None:
            normals = estimate_normals(pts)
        normals = np.asarray(normals, dtype=float)
        candidates = [_normal_axis(normals)]
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        candidates += list(vt[::-1])
    best = None
    for axis in candidates:
        center, radius = _cylinder_from_axis(x, axis)
        (c, a, r), cost = _refine_cylinder(x, center, axis, radius)
        if best is None or cost < best[1]:
            best = ((c, a, r), cost)
    (c, a, r), _ = best
    # Store the axis point nearest the data centroid.
    c = c - (c @ a) * a
    return Cylinder(c + shift, a, r)


def _cone_init(x, normals):
    # normals of a cone make a constant angle with the axis
    a = _normal_axis(normals - normals.mean(axis=0))
    # each tangent plane passes through the apex
    rhs = np.einsum("ij,ij->i", normals, x)
    apex, *_ = np.linalg.lstsq(normals, rhs, rcond=None)
    if np.mean((x - apex) @ a) < 0:
        a = -a
    sin_t = np.clip(np.abs(np.mean(normals @ a)), np.sin(HALF_ANGLE_MIN), np.sin(HALF_ANGLE_MAX))
    return apex, a, float(np.arcsin(sin_t))


def _refine_cone(x, apex, axis, theta):
    def res_jac(state):
        v, a, t = state
        e1, e2 = _tangent_basis(a)
        d, h, w, rho = _radial(x, v, a)
        wh = w / np.maximum(rho, 1e-300)[:, None]
        c, s = np.cos(t), np.sin(t)
        jv = -c * wh + s * a[None, :]
        ja1 = -c * h * (wh @ e1) - s * (d @ e1)
        ja2 = -c * h * (wh @ e2) - s * (d @ e2)
        jt = -rho * s - h * c
        return rho * c - h * s, np.column_stack([jv, ja1, ja2, jt])

    def retract(state, step):
        v, a, t = state
        e1, e2 = _tangent_basis(a)
        a_new = a + step[3] * e1 + step[4] * e2
        t_new = float(np.clip(t + step[5], HALF_ANGLE_MIN, HALF_ANGLE_MAX))
        return (v + step[:3], a_new / np.linalg.norm(a_new), t_new)

    return _gauss_newton(res_jac, retract, (apex, axis, theta))


def fit_cone(points, normals=None) -> Cone:
    pts = _check_points(points, PrimitiveKind.CONE)
    shift = pts.mean(axis=0)
    x = pts - shift
    if normals is None:
        normals = estimate_normals(pts)
    normals = np.asarray(normals, dtype=float)
    apex, a, t = _cone_init(x, normals)
    (v, a, t), _ = _refine_cone(x, apex, a, t)
    return Cone(v + shift, a, t)


def fit_primitive(kind, points, normals=None) -> Primitive:
    """Least-squares fit of a basic primitive of the given kind."""
    kind = PrimitiveKind(kind)
    if kind == PrimitiveKind.PLANE:
        return fit_plane(points)
    if kind == PrimitiveKind.SPHERE:
        return fit_sphere(points)
    if kind == PrimitiveKind.CYLINDER:
        return fit_cylinder(points, normals)
    if kind == PrimitiveKind.CONE:
        return fit_cone(points, normals)
    raise FitError(f"{kind.value} is not a basic primitive")


def trim_inlier_mask(segment_points, sample_points, epsilon: float = 0.1) -> np.ndarray:
    """Keep samples lying within ``epsilon`` of some segment point."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    seg = np.asarray(segment_points, dtype=float).reshape(-1, 3)
    if len(seg) == 0:
        raise ValueError("empty segment")
    d, _ = cKDTree(seg).query(np.asarray(sample_points, dtype=float).reshape(-1, 3))
    return d <= epsilon


# ---------------------------------------------------------------------------
# surface sampling


def _frame_extent(points, origin, axis):
    h = (np.asarray(points) - origin) @ axis
    return h.min(), h.max()


def sample_surface(patch: PrimitivePatch, n: int, rng: np.random.Generator, support=None, margin: float = 0.1):
    """Random surface samples; unbounded kinds are bounded by ``support`` points."""
    if isinstance(patch, BSplinePatch):
        uv = rng.random((n, 2))
        return patch.evaluate_many(uv[:, 0], uv[:, 1])
    if isinstance(patch, Sphere):
        d = rng.normal(size=(n, 3))
        return patch.center + patch.radius * d / np.linalg.norm(d, axis=1, keepdims=True)
    if support is None:
        raise ValueError(f"{patch.kind.value} samples need support points")
    support = np.asarray(support, dtype=float)
    if isinstance(patch, Plane):
        e1, e2 = _tangent_basis(patch.normal)
        origin = patch.offset * patch.normal
        a = (support - origin) @ e1
        b = (support - origin) @ e2
        s = rng.uniform(a.min() - margin, a.max() + margin, n)
        t = rng.uniform(b.min() - margin, b.max() + margin, n)
        return origin + s[:, None] * e1 + t[:, None] * e2
    if isinstance(patch, Cylinder):
        e1, e2 = _tangent_basis(patch.direction)
        lo, hi = _frame_extent(support, patch.center, patch.direction)
        h = rng.uniform(lo - margin, hi + margin, n)
        phi = rng.uniform(0, 2 * np.pi, n)
        ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        return patch.center + h[:, None] * patch.direction + patch.radius * ring
    if isinstance(patch, Cone):
        e1, e2 = _tangent_basis(patch.direction)
        lo, hi = _frame_extent(support, patch.apex, patch.direction)
        lo, hi = max(lo - margin, 0.0), max(hi + margin, 0.0)
        # area grows linearly with height
        h = np.sqrt(rng.uniform(lo**2, hi**2, n))
        phi = rng.uniform(0, 2 * np.pi, n)
        ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        r = h * np.tan(patch.half_angle)
        return patch.apex + h[:, None] * patch.direction + r[:, None] * ring
    raise TypeError(f"not a patch: {type(patch).__name__}")
