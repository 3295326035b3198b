"""Training-style objectives with hand-derived gradients.

Includes the hole-filling regularizer over directed grid edges, the cubic
collision penalty between an outer and a fixed inner mesh, the image-space
mask/normal/depth/semantic terms, a finite-difference gradient checker, and
a collision-resolving vertex optimizer.

Gradients treat discrete selections (active edge sets, nearest-neighbor
assignments) as constants; the checker excludes and reports coordinates
whose perturbation flips a selection, since central differences straddle a
kink there.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse as _sparse
from scipy.special import expit as _expit

from .extract import Mesh
from .field import Array, InvalidInputError
from .proposal import DenseScalarGrid

_STOP_LOSS = 1e-12
_DIVERGE_AFTER = 10
_REL_ERR_GUARD = 1e-8


class DivergenceError(RuntimeError):
    """Raised when collision resolution rejects too many steps in a row."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; refinement-stage weights default to 1 (unstated upstream).

    ``lambda_lpips`` and ``lambda_dev`` are carried for configuration
    completeness; their losses need a trained perceptual network and
    extractor internals and are not computed here.
    """

    lambda_lpips: float = 2.0
    lambda_mask: float = 1.0
    lambda_sem: float = 1.0
    lambda_depth: float = 0.5
    lambda_normal: float = 0.2
    lambda_dev: float = 0.5
    lambda_hole: float = 1e-4
    lambda_mask_refine: float = 1.0
    lambda_normal_refine: float = 1.0
    lambda_col: float = 1.0

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be a non-negative finite scalar")


# ---------------------------------------------------------------------------
# Hole filling


def _as_volume(grid) -> tuple[np.ndarray, bool]:
    if isinstance(grid, DenseScalarGrid):
        nx, ny, nz = grid.spec.resolution
        return grid.values.reshape((nx, ny, nz), order="F"), True
    vol = np.asarray(grid, dtype=np.float64)
    if vol.ndim != 3:
        raise InvalidInputError("hole loss expects a 3D scalar grid")
    return vol, False


def hole_loss(grid) -> tuple[float, Array]:
    """Sum of -log(1 - sigmoid(f_a)) over directed edges with f_a > 0 > f_b.

    Interior endpoints map to binary target 0, so each active edge
    contributes softplus(f_a) and pulls its positive endpoint downward.
    Returns (loss, gradient); the gradient matches the input layout (flat
    x-fastest for a grid object, 3D for a raw array).
    """
    vol, was_grid = _as_volume(grid)
    if not np.all(np.isfinite(vol)):
        raise InvalidInputError("grid values must be finite")
    loss = 0.0
    grad = np.zeros_like(vol)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        a, b = vol[tuple(lo)], vol[tuple(hi)]
        for fa, fb, sl in ((a, b, lo), (b, a, hi)):
            active = (fa > 0.0) & (fb < 0.0)
            if np.any(active):
                va = fa[active]
                loss += float(np.sum(np.logaddexp(0.0, va)))
                grad[tuple(sl)][active] += _expit(va)
    return loss, grad if not was_grid else grad.ravel(order="F")


def _hole_selection(vol: np.ndarray) -> np.ndarray:
    """Concatenated active-edge masks; changes exactly when the edge set does."""
    parts = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        a, b = vol[tuple(lo)], vol[tuple(hi)]
        parts.append(((a > 0.0) & (b < 0.0)).ravel())
        parts.append(((b > 0.0) & (a < 0.0)).ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Collision


class _VertexHash:
    """Uniform-cell exact nearest-vertex queries; ties break to the lowest index.

    The 27-cell neighborhood around each touched cell is cached, so repeated
    queries against a fixed point set (the inner mesh during resolution) cost
    one dictionary hit plus a short argmin.
    """

    def __init__(self, points: Array, cell: float):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or not len(self.points):
            raise InvalidInputError("need a non-empty (n, 3) point array")
        self.cell = float(cell)
        if not np.isfinite(self.cell) or self.cell <= 0:
            raise InvalidInputError("cell size must be positive")
        keys = np.floor(self.points / self.cell).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        splits = np.flatnonzero(np.any(np.diff(sk, axis=0) != 0, axis=1)) + 1
        self._buckets: dict[tuple, np.ndarray] = {}
        for group in np.split(order, splits):
            self._buckets[tuple(keys[group[0]])] = np.sort(group)
        self._hood_cache: dict[tuple, np.ndarray] = {}

    def _neighborhood(self, key: tuple) -> np.ndarray:
        hood = self._hood_cache.get(key)
        if hood is None:
            parts = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        b = self._buckets.get((key[0] + dx, key[1] + dy, key[2] + dz))
                        if b is not None:
                            parts.append(b)
            hood = np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
            self._hood_cache[key] = hood
        return hood

    def _full_scan(self, q: Array) -> tuple[int, float]:
        # Only reached when no point lies within one cell of q; a plain
        # vectorized pass is exact and bounded no matter how far q has
        # wandered (oversized optimizer steps can fling vertices anywhere).
        d2 = np.sum((self.points - q) ** 2, axis=1)
        m = float(d2.min())
        return int(np.flatnonzero(d2 == m).min()), m

    def query(self, queries: Array) -> tuple[Array, Array]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(q)
        out_i = np.empty(n, dtype=np.int64)
        out_d2 = np.empty(n)
        keys = np.floor(q / self.cell).astype(np.int64)
        for qi in range(n):
            key = tuple(keys[qi])
            hood = self._neighborhood(key)
            if hood.size:
                d2 = np.sum((self.points[hood] - q[qi]) ** 2, axis=1)
                m = float(d2.min())
                # Cells beyond the 27-neighborhood are at least one cell away.
                if m <= self.cell**2:
                    out_i[qi] = int(hood[d2 == m].min())
                    out_d2[qi] = m
                    continue
            out_i[qi], out_d2[qi] = self._full_scan(q[qi])
        return out_i, np.sqrt(out_d2)


def _median_edge_length(mesh: Mesh) -> float:
    if len(mesh.triangles):
        t = mesh.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        pairs = np.unique(pairs, axis=0)
        lengths = np.linalg.norm(
            mesh.vertices[pairs[:, 0]] - mesh.vertices[pairs[:, 1]], axis=1
        )
        med = float(np.median(lengths))
        if med > 0:
            return med
    span = np.ptp(mesh.vertices, axis=0).max() if len(mesh.vertices) > 1 else 0.0
    if span > 0:
        return float(span / max(np.cbrt(len(mesh.vertices)), 1.0))
    return 1.0


def inner_vertex_hash(inner: Mesh) -> _VertexHash:
    """Spatial hash over inner vertices, cell-sized to the median edge length."""
    return _VertexHash(inner.vertices, _median_edge_length(inner))


def _check_inner(inner: Mesh) -> None:
    if inner.normals is None or not len(inner.normals):
        raise InvalidInputError("inner mesh needs per-vertex normals")
    if not len(inner.vertices):
        raise InvalidInputError("inner mesh needs at least one vertex")


def _closest_surface_points(queries: Array, inner: Mesh) -> tuple[Array, Array]:
    """Exact nearest surface point and unit face normal per query (brute force).

    Ties break to the lowest triangle index.  O(queries x triangles): meant
    for the non-default nearest-surface mode on modest meshes.
    """
    if not len(inner.triangles):
        raise InvalidInputError("surface mode needs inner triangles")
    va = inner.vertices[inner.triangles[:, 0]]
    vb = inner.vertices[inner.triangles[:, 1]]
    vc = inner.vertices[inner.triangles[:, 2]]
    fn = np.cross(vb - va, vc - va)
    fn_len = np.linalg.norm(fn, axis=1, keepdims=True)
    fn = fn / np.where(fn_len > 0, fn_len, 1.0)
    out_p = np.empty((len(queries), 3))
    out_n = np.empty((len(queries), 3))
    for qi, p in enumerate(queries):
        cp = _point_triangle_closest(p, va, vb, vc)
        d2 = np.sum((cp - p) ** 2, axis=1)
        best = int(np.flatnonzero(d2 == d2.min()).min())
        out_p[qi] = cp[best]
        out_n[qi] = fn[best]
    return out_p, out_n


def _point_triangle_closest(p: Array, a: Array, b: Array, c: Array) -> Array:
    """Closest points of p on each triangle (a, b, c); standard region walk."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp_ = p - c
    d5 = np.einsum("ij,ij->i", ab, cp_)
    d6 = np.einsum("ij,ij->i", ac, cp_)
    va = d3 * d6 - d5 * d4
    vb_ = d5 * d2 - d1 * d6
    vc_ = d1 * d4 - d3 * d2
    denom = va + vb_ + vc_
    out = np.empty_like(a)
    cond_a = (d1 <= 0) & (d2 <= 0)
    cond_b = (d3 >= 0) & (d4 <= d3)
    cond_c = (d6 >= 0) & (d5 <= d6)
    v_ab = np.where(np.abs(d1 - d3) > 0, d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3), 0.0)
    cond_ab = (vc_ <= 0) & (d1 >= 0) & (d3 <= 0)
    w_ac = np.where(np.abs(d2 - d6) > 0, d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6), 0.0)
    cond_ac = (vb_ <= 0) & (d2 >= 0) & (d6 <= 0)
    w_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1.0, (d4 - d3) + (d5 - d6))
    cond_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    v = vb_ / np.where(denom == 0, 1.0, denom)
    w = vc_ / np.where(denom == 0, 1.0, denom)
    out[:] = a + v[:, None] * ab + w[:, None] * ac
    m = cond_bc
    out[m] = b[m] + w_bc[m, None] * (c[m] - b[m])
    m = cond_ac
    out[m] = a[m] + w_ac[m, None] * ac[m]
    m = cond_ab
    out[m] = a[m] + v_ab[m, None] * ab[m]
    m = cond_c
    out[m] = c[m]
    m = cond_b
    out[m] = b[m]
    m = cond_a
    out[m] = a[m]
    return out


def collision_loss(
    outer: Mesh,
    inner: Mesh,
    nearest: str = "vertex",
    hash_index: _VertexHash | None = None,
) -> tuple[float, Array]:
    """(1/n) sum of max((v_j - v_i) . n_j, 0)^3 and its outer-vertex gradient.

    v_j is the nearest inner vertex (default) or nearest inner surface point
    (``nearest="surface"``); n_j the matching inner normal.  The nearest
    assignment is held fixed for the gradient.
    """
    _check_inner(inner)
    if not len(outer.vertices):
        raise InvalidInputError("outer mesh needs at least one vertex")
    if nearest == "vertex":
        if hash_index is None:
            hash_index = inner_vertex_hash(inner)
        nn, _ = hash_index.query(outer.vertices)
        vj = inner.vertices[nn]
        njn = inner.normals[nn]
    elif nearest == "surface":
        vj, njn = _closest_surface_points(outer.vertices, inner)
    else:
        raise InvalidInputError(f"unknown nearest mode: {nearest!r}")
    n = len(outer.vertices)
    d = np.einsum("ij,ij->i", vj - outer.vertices, njn)
    c = np.maximum(d, 0.0)
    loss = float(np.sum(c**3) / n)
    grad = -(3.0 / n) * (c**2)[:, None] * njn
    return loss, grad


def penetration_depths(
    outer: Mesh, inner: Mesh, hash_index: _VertexHash | None = None
) -> Array:
    """Per-outer-vertex clipped penetration (v_j - v_i) . n_j against inner."""
    _check_inner(inner)
    if hash_index is None:
        hash_index = inner_vertex_hash(inner)
    nn, _ = hash_index.query(outer.vertices)
    d = np.einsum(
        "ij,ij->i", inner.vertices[nn] - outer.vertices, inner.normals[nn]
    )
    return np.maximum(d, 0.0)


def _uniform_laplacian(mesh: Mesh) -> _sparse.csr_matrix:
    n = len(mesh.vertices)
    if not len(mesh.triangles):
        return _sparse.csr_matrix((n, n))
    t = mesh.triangles
    pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    adj = _sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n, n)
    )
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.where(deg == 0, 1.0, deg), 0.0)
    avg = _sparse.diags(inv) @ adj
    eye = _sparse.diags((deg > 0).astype(np.float64))
    return (eye - avg).tocsr()


def smoothness_energy(lap: _sparse.csr_matrix, verts: Array) -> tuple[float, Array]:
    """||L v||^2 and gradient 2 L^T L v, with uniform Laplacian L."""
    lv = lap @ verts
    return float(np.sum(lv * lv)), 2.0 * (lap.T @ lv)


def resolve_collisions(
    outer: Mesh,
    inner: Mesh,
    step: float = 0.1,
    max_iters: int = 500,
    smooth_weight: float = 0.0,
    with_stats: bool = False,
):
    """Push outer vertices out of the inner mesh by adaptive gradient descent.

    Each iteration proposes v - step * grad(collision + smooth_weight *
    Laplacian energy) and accepts only if the collision term does not grow
    and the combined objective does not grow; accepted steps grow the step
    1.5x, rejected steps halve it.  Ten consecutive rejections raise
    DivergenceError with the iteration trace.  Inner is never modified.
    """
    if not np.isfinite(step) or step <= 0:
        raise InvalidInputError("step must be positive")
    if max_iters < 0:
        raise InvalidInputError("max_iters must be non-negative")
    _check_inner(inner)
    hash_index = inner_vertex_hash(inner)
    result = outer.copy()
    verts = result.vertices
    lap = _uniform_laplacian(outer) if smooth_weight > 0 else None

    def objective(v: Array) -> tuple[float, float, Array]:
        probe = Mesh(v, outer.triangles)
        col, g = collision_loss(probe, inner, hash_index=hash_index)
        total = col
        if lap is not None:
            sm, gs = smoothness_energy(lap, v)
            total = col + smooth_weight * sm
            g = g + smooth_weight * gs
        return col, total, g

    trace: list[dict] = []
    col, total, grad = objective(verts)
    rejects = 0
    for it in range(max_iters):
        if col < _STOP_LOSS:
            break
        trial = verts - step * grad
        t_col, t_total, t_grad = objective(trial)
        accepted = t_col <= col and t_total <= total
        trace.append(
            {
                "iteration": it,
                "collision": col,
                "total": total,
                "trial_collision": t_col,
                "step": step,
                "accepted": accepted,
            }
        )
        if accepted:
            verts, col, total, grad = trial, t_col, t_total, t_grad
            step *= 1.5
            rejects = 0
        else:
            step *= 0.5
            rejects += 1
            if rejects >= _DIVERGE_AFTER:
                raise DivergenceError(
                    f"collision resolution rejected {rejects} consecutive steps",
                    trace,
                )
    result.vertices = verts
    if with_stats:
        stats = {
            "iterations": len(trace),
            "final_collision": col,
            "final_total": total,
            "converged": col < _STOP_LOSS,
        }
        return result, trace, stats
    return result


# ---------------------------------------------------------------------------
# Image-space losses


def _check_same_shape(a: Array, b: Array, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shape {a.shape} vs {b.shape}")


def mask_loss(alpha: Array, ref_mask: Array) -> float:
    """Mean squared difference between rendered alpha and reference mask."""
    alpha = np.asarray(alpha, dtype=np.float64)
    ref_mask = np.asarray(ref_mask, dtype=np.float64)
    _check_same_shape(alpha, ref_mask, "mask loss")
    return float(np.mean((alpha - ref_mask) ** 2))


def normal_loss(normal: Array, ref_normal: Array, ref_mask: Array) -> float:
    """Mean (1 - n_hat . n_gt) over mask-positive pixels."""
    normal = np.asarray(normal, dtype=np.float64)
    ref_normal = np.asarray(ref_normal, dtype=np.float64)
    ref_mask = np.asarray(ref_mask, dtype=np.float64)
    _check_same_shape(normal, ref_normal, "normal loss")
    _check_same_shape(normal[..., 0], ref_mask, "normal loss mask")
    sel = ref_mask > 0.5
    if not np.any(sel):
        return 0.0
    dots = np.einsum("...i,...i->...", normal, ref_normal)
    return float(np.mean(1.0 - dots[sel]))


def depth_loss(depth: Array, ref_depth: Array, ref_mask: Array) -> float:
    """Mean absolute depth difference over mask-positive pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    ref_mask = np.asarray(ref_mask, dtype=np.float64)
    _check_same_shape(depth, ref_depth, "depth loss")
    _check_same_shape(depth, ref_mask, "depth loss mask")
    sel = ref_mask > 0.5
    if not np.any(sel):
        return 0.0
    return float(np.mean(np.abs(depth[sel] - ref_depth[sel])))


def semantic_ce_loss(semantic: Array, ref_labels: Array, ref_mask: Array) -> float:
    """Mean cross-entropy of renormalized accumulated semantics vs labels.

    Each pixel's accumulated vector is renormalized by its own mass (the
    layer alpha), guarded at 1e-8, before the log.
    """
    semantic = np.asarray(semantic, dtype=np.float64)
    ref_labels = np.asarray(ref_labels)
    ref_mask = np.asarray(ref_mask, dtype=np.float64)
    if semantic.ndim != 3:
        raise InvalidInputError("semantic buffer must be (H, W, K)")
    _check_same_shape(semantic[..., 0], ref_labels, "semantic loss labels")
    _check_same_shape(semantic[..., 0], ref_mask, "semantic loss mask")
    k = semantic.shape[-1]
    if ref_labels.size and (ref_labels.min() < 0 or ref_labels.max() >= k):
        raise InvalidInputError("reference label out of range")
    sel = ref_mask > 0.5
    if not np.any(sel):
        return 0.0
    vec = semantic[sel]
    mass = np.maximum(vec.sum(axis=1, keepdims=True), _REL_ERR_GUARD)
    probs = vec / mass
    picked = probs[np.arange(len(vec)), ref_labels[sel].astype(np.int64)]
    return float(np.mean(-np.log(np.maximum(picked, _REL_ERR_GUARD))))


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    loss_name: str
    max_rel_err: float
    excluded_coords: list = dc_field(default_factory=list)
    num_checked: int = 0

    def to_dict(self) -> dict:
        return {
            "loss_name": self.loss_name,
            "max_rel_err": self.max_rel_err,
            "excluded_coords": self.excluded_coords,
            "num_checked": self.num_checked,
        }


def _rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(max(abs(fd), abs(an)), _REL_ERR_GUARD)


def finite_diff_check_hole(grid, eps: float = 1e-5) -> GradCheckReport:
    """Central differences vs the analytic hole-loss gradient, per grid value."""
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    vol, _ = _as_volume(grid)
    vol = vol.copy()
    _, grad = hole_loss(vol)
    base_sel = _hole_selection(vol)
    max_err = 0.0
    excluded: list = []
    checked = 0
    it = np.nditer(vol, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = vol[idx]
        vol[idx] = orig + eps
        lp, _ = hole_loss(vol)
        sel_p = _hole_selection(vol)
        vol[idx] = orig - eps
        lm, _ = hole_loss(vol)
        sel_m = _hole_selection(vol)
        vol[idx] = orig
        if not (np.array_equal(sel_p, base_sel) and np.array_equal(sel_m, base_sel)):
            excluded.append(list(idx))
            continue
        fd = (lp - lm) / (2.0 * eps)
        max_err = max(max_err, _rel_err(fd, grad[idx]))
        checked += 1
    return GradCheckReport("hole_loss", max_err, excluded, checked)


def _collision_selection(outer_verts: Array, inner: Mesh, hash_index) -> tuple:
    nn, _ = hash_index.query(outer_verts)
    d = np.einsum("ij,ij->i", inner.vertices[nn] - outer_verts, inner.normals[nn])
    return nn, d > 0.0


def finite_diff_check_collision(
    outer: Mesh, inner: Mesh, eps: float = 1e-5
) -> GradCheckReport:
    """Central differences vs the analytic collision gradient, per coordinate."""
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    _check_inner(inner)
    hash_index = inner_vertex_hash(inner)
    verts = outer.vertices.copy()
    probe = Mesh(verts, outer.triangles)
    _, grad = collision_loss(probe, inner, hash_index=hash_index)
    base_nn, base_sign = _collision_selection(verts, inner, hash_index)
    max_err = 0.0
    excluded: list = []
    checked = 0
    for vi in range(len(verts)):
        for axis in range(3):
            orig = verts[vi, axis]
            verts[vi, axis] = orig + eps
            lp, _ = collision_loss(Mesh(verts, outer.triangles), inner, hash_index=hash_index)
            nn_p, sg_p = _collision_selection(verts, inner, hash_index)
            verts[vi, axis] = orig - eps
            lm, _ = collision_loss(Mesh(verts, outer.triangles), inner, hash_index=hash_index)
            nn_m, sg_m = _collision_selection(verts, inner, hash_index)
            verts[vi, axis] = orig
            stable = (
                np.array_equal(nn_p, base_nn)
                and np.array_equal(nn_m, base_nn)
                and np.array_equal(sg_p, base_sign)
                and np.array_equal(sg_m, base_sign)
            )
            if not stable:
                excluded.append([vi, axis])
                continue
            fd = (lp - lm) / (2.0 * eps)
            max_err = max(max_err, _rel_err(fd, grad[vi, axis]))
            checked += 1
    return GradCheckReport("collision_loss", max_err, excluded, checked)
