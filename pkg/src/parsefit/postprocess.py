"""Post-fit refinement of B-spline patches against their segment points.

The flow is: sample the patch on a 40x40 grid, tessellate into quads, match
grid vertices to segment points, deform the mesh as-rigidly-as-possible with
boundary pivots pulled to their matches, refit the control grid, then adjust
grid resolution until a Chamfer tolerance is met.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .assignment import solve_assignment
from .bspline import BSplineError, BSplinePatch, RankDeficientError, fit_patch, sample_uniform
from .primitives import project_to_bspline

log = logging.getLogger(__name__)

MATCH_GRID = 40
DEFAULT_TOLERANCE = 5e-4
ARAP_ITERATIONS = 10
CLOSED_SOFT_WEIGHT = 0.1
REFIT_SMOOTHING = 1e-3  # relative second-difference weight in tolerance refits
CD_GRID = 100  # per-direction patch samples when measuring refinement tolerance


@dataclass(frozen=True)
class QuadMesh:
    vertices: np.ndarray
    quads: np.ndarray
    boundary_mask: np.ndarray
    uv: np.ndarray | None = None
    grid_shape: tuple[int, int] | None = None

    def triangles(self) -> np.ndarray:
        q = self.quads
        return np.vstack([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])

    def edges(self) -> np.ndarray:
        t = self.triangles()
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


@dataclass(frozen=True)
class FitToleranceConfig:
    tolerance: float = DEFAULT_TOLERANCE
    min_grid: int = 4
    max_grid: int = 160
    cd_grid: int = CD_GRID
    smoothing: float = REFIT_SMOOTHING

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.min_grid < 4 or self.max_grid < self.min_grid:
            raise ValueError("need 4 <= min_grid <= max_grid")
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")
        if self.cd_grid < 2:
            raise ValueError("cd_grid must be at least 2")


def grid_quads(nu: int, nv: int, closed_u: bool = False, closed_v: bool = False) -> np.ndarray:
    """Quads over a row-major ``nu x nv`` vertex grid, wrapping closed axes."""
    iu = np.arange(nu if closed_u else nu - 1)
    iv = np.arange(nv if closed_v else nv - 1)
    i, j = np.meshgrid(iu, iv, indexing="ij")
    i, j = i.ravel(), j.ravel()
    i1, j1 = (i + 1) % nu, (j + 1) % nv
    return np.column_stack([i * nv + j, i1 * nv + j, i1 * nv + j1, i * nv + j1])


def tessellate(patch: BSplinePatch, n: int = MATCH_GRID) -> QuadMesh:
    uv, pts = sample_uniform(patch, n, n)
    i, j = np.divmod(np.arange(n * n), n)
    boundary = np.zeros(n * n, dtype=bool)
    if not patch.closed_u:
        boundary |= (i == 0) | (i == n - 1)
    if not patch.closed_v:
        boundary |= (j == 0) | (j == n - 1)
    quads = grid_quads(n, n, patch.closed_u, patch.closed_v)
    return QuadMesh(pts, quads, boundary, uv, (n, n))


# ---------------------------------------------------------------------------
# matching


@dataclass(frozen=True)
class UVMatches:
    point_indices: np.ndarray
    sample_indices: np.ndarray
    points: np.ndarray
    uv: np.ndarray
    total_cost: float

    def __len__(self) -> int:
        return len(self.point_indices)


def match_uv_by_assignment(patch: BSplinePatch, segment, n: int = MATCH_GRID) -> UVMatches:
    """Give segment points the uv of their assigned ``n x n`` patch sample."""
    seg = np.asarray(segment, dtype=float).reshape(-1, 3)
    if len(seg) == 0:
        raise ValueError("empty segment")
    uv, samples = sample_uniform(patch, n, n)
    a = solve_assignment(cdist(samples, seg, "sqeuclidean"))
    order = np.argsort(a.cols)
    cols, rows = a.cols[order], a.rows[order]
    return UVMatches(cols, rows, seg[cols], uv[rows], a.total_cost)


def refit_from_matches(matches: UVMatches, p: int, q: int, closed_u=False, closed_v=False) -> BSplinePatch:
    return fit_patch(matches.uv, matches.points, p, q, closed_u, closed_v)


# ---------------------------------------------------------------------------
# ARAP


class ArapError(ValueError):
    pass


def _best_rotations(cov: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(cov)
    r = np.einsum("nij,njk->nik", vt.transpose(0, 2, 1), u.transpose(0, 2, 1))
    flip = np.linalg.det(r) < 0
    if np.any(flip):
        vt[flip, -1, :] *= -1
        r[flip] = np.einsum("nij,njk->nik", vt[flip].transpose(0, 2, 1), u[flip].transpose(0, 2, 1))
    return r


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    if len(src) < 3:
        return np.eye(3)
    a = src - src.mean(axis=0)
    b = dst - dst.mean(axis=0)
    if np.linalg.matrix_rank(a, tol=1e-9 * max(np.abs(a).max(), 1e-300)) < 2:
        return np.eye(3)
    return _best_rotations((a.T @ b)[None])[0]


class _ArapSystem:
    def __init__(self, rest: np.ndarray, edges: np.ndarray):
        self.rest = rest
        self.n = len(rest)
        # both directions of every undirected edge
        self.src = np.concatenate([edges[:, 0], edges[:, 1]])
        self.dst = np.concatenate([edges[:, 1], edges[:, 0]])
        self.rest_e = rest[self.src] - rest[self.dst]
        deg = np.bincount(self.src, minlength=self.n).astype(float)
        adj = scipy.sparse.csr_matrix((np.ones(len(self.src)), (self.src, self.dst)), shape=(self.n, self.n))
        self.lap = (scipy.sparse.diags(deg) - adj).tocsc()

    def rotations(self, x):
        cur = x[self.src] - x[self.dst]
        outer = self.rest_e[:, :, None] * cur[:, None, :]
        cov = np.zeros((self.n, 3, 3))
        np.add.at(cov, self.src, outer)
        return _best_rotations(cov)

    def energy(self, x, rot) -> float:
        cur = x[self.src] - x[self.dst]
        pred = np.einsum("nij,nj->ni", rot[self.src], self.rest_e)
        return float(np.sum((cur - pred) ** 2))

    def rhs(self, rot) -> np.ndarray:
        rsum = rot[self.src] + rot[self.dst]
        contrib = 0.5 * np.einsum("nij,nj->ni", rsum, self.rest_e)
        b = np.zeros((self.n, 3))
        np.add.at(b, self.src, contrib)
        return b


def arap_deform(
    mesh: QuadMesh,
    pivots,
    targets,
    iterations: int = ARAP_ITERATIONS,
    soft_weight: float | None = None,
    return_energies: bool = False,
):
    """As-rigid-as-possible deformation with pivots moved to ``targets``.

    Pivots are hard constraints unless ``soft_weight`` is given, in which case
    they are pulled toward their targets with that weight. Uniform edge
    weights over the triangulated quads. ``energies[k]`` is the ARAP energy
    with optimal rotations after the k-th global solve; it never increases.
    """
    rest = np.asarray(mesh.vertices, dtype=float)
    pivots = np.asarray(pivots, dtype=int).ravel()
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    if len(pivots) != len(targets):
        raise ArapError(f"{len(pivots)} pivots but {len(targets)} targets")
    if len(pivots) and (pivots.min() < 0 or pivots.max() >= len(rest)):
        raise ArapError("pivot index out of range")
    if len(np.unique(pivots)) != len(pivots):
        raise ArapError("duplicate pivot indices")
    system = _ArapSystem(rest, mesh.edges())
    n = system.n

    if soft_weight is None:
        fixed = np.zeros(n, dtype=bool)
        fixed[pivots] = True
        free = np.flatnonzero(~fixed)
        x = rest.copy()
        x[pivots] = targets
        if len(free) == 0:
            return (x, [0.0]) if return_energies else x
        l_ff = system.lap[free][:, free].tocsc()
        l_fc = system.lap[free][:, pivots]
        solve = scipy.sparse.linalg.factorized(l_ff)
        offset = l_fc @ targets

        def global_step(rot):
            b = system.rhs(rot)[free] - offset
            out = x.copy()
            out[free] = np.column_stack([solve(b[:, k]) for k in range(3)])
            return out
    else:
        sel = scipy.sparse.csr_matrix((np.full(len(pivots), soft_weight), (pivots, pivots)), shape=(n, n))
        solve = scipy.sparse.linalg.factorized((system.lap + sel).tocsc())
        pull = np.zeros((n, 3))
        pull[pivots] = soft_weight * targets
        # the Laplacian alone is singular; soft terms must pin the translation
        if len(pivots) == 0:
            raise ArapError("soft ARAP needs at least one target")

        def global_step(rot):
            b = system.rhs(rot) + pull
            return np.column_stack([solve(b[:, k]) for k in range(3)])

        def soft_energy(y):
            # matches the factor-of-two edge double counting in the ARAP term
            return 2.0 * soft_weight * float(np.sum((y[pivots] - targets) ** 2))

    # start from the best rigid fit of the pivots to their targets
    start = np.broadcast_to(_kabsch(rest[pivots], targets), (n, 3, 3))
    x = global_step(start)
    energies = []
    for it in range(iterations + 1):
        rot = system.rotations(x)
        e = system.energy(x, rot)
        if soft_weight is not None:
            e += soft_energy(x)
        if energies and e > energies[-1] * (1 + 1e-9) + 1e-15:
            raise ArapError(f"ARAP energy increased at iteration {it}: {energies[-1]} -> {e}")
        energies.append(e)
        if it == iterations:
            break
        x = global_step(rot)
    return (x, energies) if return_energies else x


# ---------------------------------------------------------------------------
# refinement


def chamfer(a, b) -> float:
    """Symmetric mean of squared nearest-neighbor distances."""
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(da**2)) + float(np.mean(db**2)))


def patch_chamfer(patch: BSplinePatch, segment, n: int = MATCH_GRID) -> float:
    return chamfer(np.asarray(segment, float), sample_uniform(patch, n, n)[1])


def arap_optimize(patch: BSplinePatch, segment, iterations: int = ARAP_ITERATIONS, n: int = MATCH_GRID) -> BSplinePatch:
    """Pull the patch boundary onto matched segment points, then refit the grid."""
    seg = np.asarray(segment, dtype=float)
    mesh = tessellate(patch, n)
    m = match_uv_by_assignment(patch, seg, n)
    target_of = dict(zip(m.sample_indices.tolist(), m.points))
    if patch.closed_u and patch.closed_v:
        piv = m.sample_indices
        tgt = m.points
        deformed = arap_deform(mesh, piv, tgt, iterations, soft_weight=CLOSED_SOFT_WEIGHT)
    else:
        piv = np.array([i for i in np.flatnonzero(mesh.boundary_mask) if i in target_of], dtype=int)
        tgt = np.array([target_of[i] for i in piv]).reshape(-1, 3)
        deformed = arap_deform(mesh, piv, tgt, iterations)
    p, q = patch.shape
    return fit_patch(mesh.uv, deformed, p, q, patch.closed_u, patch.closed_v)


def estimate_uv(patch: BSplinePatch, segment, n: int = MATCH_GRID) -> np.ndarray:
    """Assignment-matched uv for every segment point, refined by projection.

    Matched points are seeded with their sample's uv as well as the nearest
    sample; each point ends at the closer of the two projections.
    """
    seg = np.asarray(segment, dtype=float)
    m = match_uv_by_assignment(patch, seg, n)
    seeds = np.full((len(seg), 2), np.nan)
    seeds[m.point_indices] = m.uv
    uv, _ = project_to_bspline(seg, patch, n * n)
    seeds[np.isnan(seeds[:, 0])] = uv[np.isnan(seeds[:, 0])]
    uv, _ = project_to_bspline(seg, patch, n * n, seeds=seeds)
    return uv


@dataclass
class RefinementResult:
    patch: BSplinePatch
    chamfer: float
    success: bool
    initial_chamfer: float
    history: list[tuple[tuple[int, int], float]] = field(default_factory=list)

    @property
    def grid_sizes(self) -> list[tuple[int, int]]:
        return [g for g, _ in self.history]


def refine_to_tolerance(patch: BSplinePatch, segment, config: FitToleranceConfig | None = None) -> RefinementResult:
    """Double (or halve) the control grid until the Chamfer tolerance is met.

    Each step refits at the new grid size from uv matched to the input patch
    (or to the latest refit when that is closer) and measures Chamfer distance
    to ``cd_grid x cd_grid`` patch samples.
    Upsampling stops at ``max_grid`` or when the data cannot support a
    larger grid; the best patch found is returned with ``success=False``.
    """
    config = config or FitToleranceConfig()
    seg = np.asarray(segment, dtype=float).reshape(-1, 3)
    if len(seg) == 0:
        raise ValueError("empty segment")
    cu, cv = patch.closed_u, patch.closed_v
    ncd = config.cd_grid
    initial = patch_chamfer(patch, seg, ncd)

    base_uv = estimate_uv(patch, seg)

    def attempt(current, shape):
        # Re-projecting onto every refit lets uv errors compound, so the
        # uv matched to the input patch is kept unless a fresh one does better.
        best = None
        for uv in (base_uv, None):
            if uv is None:
                if current is patch:
                    continue
                uv = estimate_uv(current, seg)
            try:
                fitted = fit_patch(uv, seg, shape[0], shape[1], cu, cv, config.smoothing)
            except BSplineError:
                continue
            cd = patch_chamfer(fitted, seg, ncd)
            if best is None or cd < best[1]:
                best = (fitted, cd)
        if best is None:
            raise RankDeficientError(f"no uv estimate supports a {shape[0]}x{shape[1]} grid")
        return best

    shape = patch.shape
    history = []
    try:
        current, cd = attempt(patch, shape)
    except BSplineError as exc:
        log.warning("refit at %s failed: %s", shape, exc)
        return RefinementResult(patch, initial, initial <= config.tolerance, initial, [(shape, initial)])
    history.append((shape, cd))
    tol = config.tolerance

    if cd <= tol:
        while min(shape) > config.min_grid:
            smaller = tuple(max(config.min_grid, s // 2) for s in shape)
            try:
                cand, cand_cd = attempt(current, smaller)
            except BSplineError:
                break
            history.append((smaller, cand_cd))
            if cand_cd > tol:
                break
            current, cd, shape = cand, cand_cd, smaller
        return RefinementResult(current, cd, True, initial, history)

    best, best_cd = current, cd
    while cd > tol and max(shape) < config.max_grid:
        shape = tuple(min(config.max_grid, 2 * s) for s in shape)
        try:
            current, cd = attempt(current, shape)
        except BSplineError as exc:
            log.info("stopping upsampling at %s: %s", shape, exc)
            break
        history.append((shape, cd))
        if cd < best_cd:
            best, best_cd = current, cd
    return RefinementResult(best, best_cd, best_cd <= tol, initial, history)


def postprocess_patch(patch: BSplinePatch, segment, config: FitToleranceConfig | None = None,
                      arap_iterations: int = ARAP_ITERATIONS) -> RefinementResult:
    """ARAP boundary optimization followed by tolerance-driven refinement."""
    try:
        optimized = arap_optimize(patch, segment, arap_iterations)
    except (BSplineError, ArapError) as exc:
        log.warning("ARAP optimization skipped: %s", exc)
        optimized = patch
    return refine_to_tolerance(optimized, segment, config)
