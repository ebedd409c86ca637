"""Cubic tensor-product B-spline patches.

Open directions use clamped uniform knots on [0, 1]; closed directions use
periodic uniform knots with the control grid wrapped by index, seam at u=0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.linalg import lapack
from scipy.spatial import ConvexHull, QhullError

DEGREE = 3
STANDARD_GRID = 20


class BSplineError(ValueError):
    """Base class for B-spline construction and fitting errors."""


class InsufficientSamplesError(BSplineError):
    pass


class RankDeficientError(BSplineError):
    pass


class DegenerateParametrizationError(BSplineError):
    pass


@dataclass(frozen=True)
class KnotVector:
    """Knot values on [0, 1].

    Open vectors have ``count + 4`` entries with both ends repeated four
    times. Periodic vectors hold the ``count + 1`` uniform span boundaries.
    """

    values: np.ndarray
    periodic: bool = False

    @classmethod
    def clamped(cls, count: int) -> "KnotVector":
        if count < DEGREE + 1:
            raise BSplineError(f"need at least {DEGREE + 1} control points, got {count}")
        interior = np.arange(1, count - DEGREE) / (count - DEGREE)
        values = np.concatenate([np.zeros(DEGREE + 1), interior, np.ones(DEGREE + 1)])
        return cls(values, periodic=False)

    @classmethod
    def uniform_periodic(cls, count: int) -> "KnotVector":
        if count < DEGREE + 1:
            raise BSplineError(f"need at least {DEGREE + 1} control points, got {count}")
        return cls(np.linspace(0.0, 1.0, count + 1), periodic=True)

    @classmethod
    def for_count(cls, count: int, closed: bool) -> "KnotVector":
        return cls.uniform_periodic(count) if closed else cls.clamped(count)

    def control_count(self) -> int:
        n = len(self.values)
        return n - 1 if self.periodic else n - DEGREE - 1

    def validate(self, count: int) -> None:
        v = np.asarray(self.values, dtype=float)
        if np.any(np.diff(v) < 0):
            raise BSplineError("knot vector must be non-decreasing")
        if self.control_count() != count:
            raise BSplineError(
                f"knot vector of length {len(v)} does not match {count} control points"
            )
        if not self.periodic:
            if np.any(v[: DEGREE + 1] != v[0]) or np.any(v[-DEGREE - 1 :] != v[-1]):
                raise BSplineError("open knot vector must be clamped")


def greville_abscissae(count: int, closed: bool = False) -> np.ndarray:
    """Parameter sites of linear precision for the standard knot vectors."""
    if closed:
        # Control j of a periodic grid peaks at (j - 1) / count.
        return np.mod((np.arange(count) - 1.0) / count, 1.0)
    t = KnotVector.clamped(count).values
    return np.array([t[i + 1 : i + DEGREE + 1].mean() for i in range(count)])


def _check_params(u: np.ndarray) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(~np.isfinite(u)) or np.any(u < 0.0) or np.any(u > 1.0):
        raise BSplineError("parameter outside [0, 1]")
    return u


def _open_local(u: np.ndarray, knots: np.ndarray, count: int):
    """Nonzero cubic basis values by the Cox-de Boor triangle.

    Returns (first, values) with values[:, k] belonging to control first + k.
    """
    span = np.searchsorted(knots, u, side="right") - 1
    span = np.clip(span, DEGREE, count - 1)
    m = len(u)
    n = np.zeros((m, DEGREE + 1))
    n[:, 0] = 1.0
    left = np.zeros((m, DEGREE + 1))
    right = np.zeros((m, DEGREE + 1))
    for j in range(1, DEGREE + 1):
        left[:, j] = u - knots[span + 1 - j]
        right[:, j] = knots[span + j] - u
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(n[:, r], denom, out=np.zeros(m), where=denom != 0)
            n[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        n[:, j] = saved
    return span - DEGREE, n


def _periodic_local(u: np.ndarray, count: int):
    x = u * count
    span = np.minimum(np.floor(x), count).astype(int)
    t = x - span
    s = 1.0 - t
    values = np.stack(
        [s**3, 3 * t**3 - 6 * t**2 + 4, -3 * t**3 + 3 * t**2 + 3 * t + 1, t**3], axis=1
    ) / 6.0
    return span % count, values


def local_basis(u, knots: KnotVector, count: int):
    """Return ``(indices, values)``, both shaped (M, 4), for parameters ``u``."""
    u = _check_params(u)
    knots.validate(count)
    if knots.periodic:
        first, values = _periodic_local(u, count)
        idx = (first[:, None] + np.arange(DEGREE + 1)) % count
    else:
        first, values = _open_local(u, np.asarray(knots.values, float), count)
        idx = first[:, None] + np.arange(DEGREE + 1)
    return idx, values


def basis_matrix(u, knots: KnotVector, count: int) -> np.ndarray:
    idx, values = local_basis(u, knots, count)
    out = np.zeros((len(idx), count))
    np.add.at(out, (np.repeat(np.arange(len(idx)), DEGREE + 1), idx.ravel()), values.ravel())
    return out


def basis_functions(u: float, knots: KnotVector, count: int) -> np.ndarray:
    """All ``count`` basis values at a single parameter ``u``."""
    return basis_matrix([u], knots, count)[0]


@dataclass(frozen=True)
class ControlGrid:
    points: np.ndarray
    closed_u: bool = False
    closed_v: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise BSplineError("control grid must have shape (P, Q, 3)")
        if pts.shape[0] < DEGREE + 1 or pts.shape[1] < DEGREE + 1:
            raise BSplineError("control grid must be at least 4x4")
        object.__setattr__(self, "points", pts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[0], self.points.shape[1]


@dataclass(frozen=True)
class BSplinePatch:
    grid: ControlGrid
    knots_u: KnotVector = field(default=None)
    knots_v: KnotVector = field(default=None)

    def __post_init__(self):
        p, q = self.grid.shape
        if self.knots_u is None:
            object.__setattr__(self, "knots_u", KnotVector.for_count(p, self.grid.closed_u))
        if self.knots_v is None:
            object.__setattr__(self, "knots_v", KnotVector.for_count(q, self.grid.closed_v))
        if self.knots_u.periodic != self.grid.closed_u or self.knots_v.periodic != self.grid.closed_v:
            raise BSplineError("knot periodicity does not match grid closure flags")
        self.knots_u.validate(p)
        self.knots_v.validate(q)

    @classmethod
    def from_points(cls, points, closed_u: bool = False, closed_v: bool = False) -> "BSplinePatch":
        return cls(ControlGrid(np.asarray(points, float), closed_u, closed_v))

    @property
    def degree(self) -> int:
        return DEGREE

    @property
    def closed_u(self) -> bool:
        return self.grid.closed_u

    @property
    def closed_v(self) -> bool:
        return self.grid.closed_v

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def control_points(self) -> np.ndarray:
        return self.grid.points

    def evaluate_many(self, u, v) -> np.ndarray:
        """Surface points at paired parameter arrays ``u`` and ``v``."""
        u = _check_params(u)
        v = _check_params(v)
        if u.shape != v.shape:
            raise BSplineError("u and v must have the same length")
        p, q = self.shape
        iu, bu = local_basis(u, self.knots_u, p)
        iv, bv = local_basis(v, self.knots_v, q)
        c = self.grid.points[iu[:, :, None], iv[:, None, :]]  # (M, 4, 4, 3)
        return np.einsum("mi,mj,mijk->mk", bu, bv, c)

    def evaluate_grid(self, u, v) -> np.ndarray:
        """Surface points on the tensor grid ``u x v``, shape (len(u), len(v), 3)."""
        bu = basis_matrix(u, self.knots_u, self.shape[0])
        bv = basis_matrix(v, self.knots_v, self.shape[1])
        return np.einsum("ip,jq,pqk->ijk", bu, bv, self.grid.points)


def evaluate(patch: BSplinePatch, u: float, v: float) -> np.ndarray:
    return patch.evaluate_many([u], [v])[0]


def uniform_params(n: int, closed: bool) -> np.ndarray:
    # Closed directions drop the seam duplicate at 1.
    return np.linspace(0.0, 1.0, n, endpoint=not closed)


def sample_uniform(patch: BSplinePatch, nu: int, nv: int):
    """Sample the patch on a uniform ``nu x nv`` parameter grid.

    Returns ``(uv, points)`` with shapes (nu*nv, 2) and (nu*nv, 3); row
    ``i * nv + j`` holds the i-th u value and the j-th v value.
    """
    if nu < 2 or nv < 2:
        raise BSplineError("need at least 2 samples per direction")
    us = uniform_params(nu, patch.closed_u)
    vs = uniform_params(nv, patch.closed_v)
    pts = patch.evaluate_grid(us, vs).reshape(-1, 3)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    return np.column_stack([uu.ravel(), vv.ravel()]), pts


def collocation_matrix(uv, p: int, q: int, closed_u: bool = False, closed_v: bool = False):
    """Sparse (M, p*q) matrix mapping row-major control points to surface points."""
    uv = np.asarray(uv, dtype=float)
    iu, bu = local_basis(uv[:, 0], KnotVector.for_count(p, closed_u), p)
    iv, bv = local_basis(uv[:, 1], KnotVector.for_count(q, closed_v), q)
    m = len(uv)
    cols = (iu[:, :, None] * q + iv[:, None, :]).reshape(m, -1)
    vals = (bu[:, :, None] * bv[:, None, :]).reshape(m, -1)
    rows = np.repeat(np.arange(m), cols.shape[1])
    return scipy.sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(m, p * q))


_LSTSQ_COND = 1e-6
_REACH = 100.0
_DENSE_LIMIT = 2500
_RCOND_MIN = 1e-13


def _solve_normal_equations(a, b: np.ndarray) -> np.ndarray:
    n = a.shape[1]
    ata = (a.T @ a).tocsc()
    atb = a.T @ b
    # Every control point needs data in its support.
    support = np.asarray(ata.diagonal())
    if np.any(support <= 0):
        raise RankDeficientError(
            f"{int(np.sum(support <= 0))} control points have no samples in their support"
        )
    if n <= _DENSE_LIMIT:
        dense = ata.toarray()
        try:
            c, low = scipy.linalg.cho_factor(dense, lower=False, check_finite=False)
            anorm = np.abs(dense).sum(axis=0).max()
            rcond, info = lapack.dpocon(c, anorm)
            if info == 0 and rcond > _RCOND_MIN:
                return scipy.linalg.cho_solve((c, low), atb, check_finite=False)
        except np.linalg.LinAlgError:
            pass
        # Singular values below this fraction of the largest count as rank loss.
        x, _, rank, _ = scipy.linalg.lstsq(a.toarray(), b, cond=_LSTSQ_COND, lapack_driver="gelsd")
        if rank < n:
            raise RankDeficientError(f"design matrix rank {rank} < {n} unknowns")
        return x
    x = scipy.sparse.linalg.spsolve(ata, atb)
    # No condition estimate here; a near-singular system shows up as controls
    # flung far outside the data.
    lo, hi = b.min(axis=0), b.max(axis=0)
    reach = _REACH * max(float(np.max(hi - lo)), 1e-12)
    if not np.all(np.isfinite(x)) or np.any(np.abs(x - 0.5 * (lo + hi)) > reach):
        raise RankDeficientError("sparse normal equations are singular")
    return np.asarray(x).reshape(atb.shape)


def _second_difference(n: int, closed: bool):
    rows = n if closed else n - 2
    i = np.arange(rows)
    cols = np.stack([i, i + 1, i + 2], axis=1) % n
    vals = np.tile([1.0, -2.0, 1.0], (rows, 1))
    return scipy.sparse.csr_matrix((vals.ravel(), (np.repeat(i, 3), cols.ravel())), shape=(rows, n))


def smoothness_matrix(p: int, q: int, closed_u: bool = False, closed_v: bool = False):
    """Sum of squared second differences of the control grid along u and v."""
    du = _second_difference(p, closed_u)
    dv = _second_difference(q, closed_v)
    return (scipy.sparse.kron(du.T @ du, scipy.sparse.identity(q))
            + scipy.sparse.kron(scipy.sparse.identity(p), dv.T @ dv)).tocsc()


def _solve_smoothed(a, b, reg, smoothing: float) -> np.ndarray:
    ata = (a.T @ a).tocsc()
    weight = smoothing * float(ata.diagonal().mean())
    x = scipy.sparse.linalg.spsolve((ata + weight * reg).tocsc(), a.T @ b)
    x = np.asarray(x).reshape(a.shape[1], -1)
    if not np.all(np.isfinite(x)):
        raise RankDeficientError("smoothed normal equations are singular")
    return x


def fit_control_grid(uv, targets, p: int, q: int, closed_u: bool = False, closed_v: bool = False,
                     smoothing: float = 0.0) -> ControlGrid:
    """Least-squares control grid for the given (uv, target) samples.

    ``smoothing > 0`` adds a second-difference penalty on the controls,
    weighted relative to the mean diagonal of the normal matrix; it keeps
    controls over sparsely covered uv regions from overshooting.
    """
    uv = np.asarray(uv, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if uv.ndim != 2 or uv.shape[1] != 2 or targets.shape != (len(uv), 3):
        raise BSplineError("uv must be (M, 2) and targets (M, 3)")
    if len(uv) < p * q:
        raise InsufficientSamplesError(f"{len(uv)} samples for {p * q} control points")
    if smoothing < 0:
        raise BSplineError("smoothing must be non-negative")
    a = collocation_matrix(uv, p, q, closed_u, closed_v)
    if smoothing > 0:
        x = _solve_smoothed(a, targets, smoothness_matrix(p, q, closed_u, closed_v), smoothing)
    else:
        x = _solve_normal_equations(a, targets)
    return ControlGrid(x.reshape(p, q, 3), closed_u, closed_v)


def fit_patch(uv, targets, p: int, q: int, closed_u: bool = False, closed_v: bool = False,
              smoothing: float = 0.0) -> BSplinePatch:
    return BSplinePatch(fit_control_grid(uv, targets, p, q, closed_u, closed_v, smoothing))


def standardize_patch(
    uv, points, closed_u: bool = False, closed_v: bool = False, size: int = STANDARD_GRID
) -> BSplinePatch:
    """Refit dense samples of any patch onto a ``size x size`` control grid."""
    return fit_patch(uv, points, size, size, closed_u, closed_v)


def standardize(patch: BSplinePatch, samples: int = 3600, size: int = STANDARD_GRID) -> BSplinePatch:
    """Resample ``patch`` on a uniform grid of ``samples`` points and refit."""
    n = int(round(np.sqrt(samples)))
    uv, pts = sample_uniform(patch, n, n)
    return standardize_patch(uv, pts, patch.closed_u, patch.closed_v, size)


def _min_area_rotation(xy: np.ndarray) -> np.ndarray:
    """Rotation aligning the minimum-area bounding rectangle with the axes."""
    try:
        hull = xy[ConvexHull(xy).vertices]
    except QhullError:
        return np.eye(2)
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    best, best_area = np.eye(2), np.inf
    for a in angles:
        rot = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
        r = hull @ rot.T
        area = np.prod(np.ptp(r, axis=0))
        if area < best_area * (1 - 1e-12):
            best, best_area = rot, area
    return best


def init_parametrization(points) -> np.ndarray:
    """Planar parameters for an unorganized point set, min-max scaled to [0, 1].

    Points are projected onto their two principal directions; the in-plane
    axes are then turned to the minimum-area bounding rectangle so that
    near-isotropic segments (squares, disks) do not come out rotated.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateParametrizationError("need at least 3 points")
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = max(s[0], 1e-300)
    if s[1] <= 1e-9 * scale:
        raise DegenerateParametrizationError("points are collinear")
    proj = centered @ vt[:2].T
    proj = proj @ _min_area_rotation(proj).T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    return (proj - lo) / (hi - lo)
