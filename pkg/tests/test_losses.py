from __future__ import annotations

import numpy as np
import pytest

from semsurf.extract import Mesh, icosphere
from semsurf.field import GridSpec, InvalidInputError
from semsurf.losses import (
    DivergenceError,
    GradCheckReport,
    LossWeights,
    _point_triangle_closest,
    _uniform_laplacian,
    _VertexHash,
    collision_loss,
    depth_loss,
    finite_diff_check_collision,
    finite_diff_check_hole,
    hole_loss,
    inner_vertex_hash,
    mask_loss,
    normal_loss,
    penetration_depths,
    resolve_collisions,
    semantic_ce_loss,
    smoothness_energy,
)
from semsurf.proposal import DenseScalarGrid

from ._toys import fib_hull_mesh, flat_patch, point_mesh

_SOFTPLUS_1 = 1.3132616875182228
_SIGMOID_1 = 0.7310585786300049


# ---------------------------------------------------------------------------
# Weights


def test_loss_weights_defaults():
    w = LossWeights()
    assert w.lambda_lpips == 2.0
    assert w.lambda_mask == 1.0
    assert w.lambda_sem == 1.0
    assert w.lambda_depth == 0.5
    assert w.lambda_normal == 0.2
    assert w.lambda_dev == 0.5
    assert w.lambda_hole == 1e-4
    assert w.lambda_col == 1.0


def test_loss_weights_validation():
    with pytest.raises(InvalidInputError):
        LossWeights(lambda_mask=-0.1)
    with pytest.raises(InvalidInputError):
        LossWeights(lambda_hole=float("nan"))
    LossWeights(lambda_col=0.0)  # zero is allowed


# ---------------------------------------------------------------------------
# Hole loss


def test_hole_loss_single_edge_oracle():
    vol = np.array([1.0, -0.5]).reshape(1, 1, 2)
    loss, grad = hole_loss(vol)
    assert loss == pytest.approx(_SOFTPLUS_1, rel=1e-15)
    np.testing.assert_allclose(grad.ravel(), [_SIGMOID_1, 0.0], rtol=1e-15)


def test_hole_loss_direction_symmetric():
    a, ga = hole_loss(np.array([1.0, -0.5]).reshape(1, 1, 2))
    b, gb = hole_loss(np.array([-0.5, 1.0]).reshape(1, 1, 2))
    assert a == b
    np.testing.assert_array_equal(gb.ravel(), ga.ravel()[::-1])


def test_hole_loss_uniform_sign_is_zero():
    for vol in (np.full((3, 3, 3), 0.7), np.full((3, 3, 3), -0.7), np.zeros((3, 3, 3))):
        loss, grad = hole_loss(vol)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)


def test_hole_loss_gradient_only_on_positive_endpoints():
    rng = np.random.default_rng(11)
    vol = rng.normal(0.0, 0.6, (4, 4, 4))
    _, grad = hole_loss(vol)
    assert np.all(grad >= 0.0)
    assert np.all(grad[vol <= 0.0] == 0.0)


def test_hole_loss_accepts_grid_objects():
    spec = GridSpec((3, 3, 3), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    rng = np.random.default_rng(12)
    flat = rng.normal(0.0, 0.6, spec.num_vertices)
    loss_g, grad_g = hole_loss(DenseScalarGrid(spec, flat))
    vol = flat.reshape((3, 3, 3), order="F")
    loss_v, grad_v = hole_loss(vol)
    assert loss_g == loss_v
    assert grad_g.shape == (27,)
    np.testing.assert_array_equal(grad_g, grad_v.ravel(order="F"))


def test_hole_loss_validation():
    with pytest.raises(InvalidInputError):
        hole_loss(np.array([[1.0, -1.0]]))
    with pytest.raises(InvalidInputError):
        hole_loss(np.full((2, 2, 2), np.nan))


# ---------------------------------------------------------------------------
# Vertex hash


def test_vertex_hash_matches_brute_force():
    rng = np.random.default_rng(21)
    pts = rng.uniform(-1.0, 1.0, (200, 3))
    h = _VertexHash(pts, 0.25)
    queries = np.concatenate(
        [
            rng.uniform(-1.2, 1.2, (100, 3)),
            rng.uniform(-1.0, 1.0, (5, 3)) + 1e6,  # far off the grid entirely
            pts[:5],  # exact hits
        ]
    )
    idx, dist = h.query(queries)
    d2 = np.sum((queries[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.testing.assert_array_equal(idx, np.argmin(d2, axis=1))
    np.testing.assert_allclose(dist, np.sqrt(d2.min(axis=1)), rtol=1e-12, atol=1e-12)


def test_vertex_hash_tie_breaks_to_lowest_index():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    h = _VertexHash(pts, 1.0)
    idx, dist = h.query(np.array([[0.5, 0.0, 0.0]]))
    assert idx[0] == 0
    assert dist[0] == pytest.approx(0.5)


def test_vertex_hash_validation():
    with pytest.raises(InvalidInputError):
        _VertexHash(np.empty((0, 3)), 1.0)
    with pytest.raises(InvalidInputError):
        _VertexHash(np.zeros((4, 2)), 1.0)
    with pytest.raises(InvalidInputError):
        _VertexHash(np.zeros((4, 3)), 0.0)


def test_inner_vertex_hash_uses_median_edge():
    mesh = icosphere(radius=0.5, subdivisions=1)
    t = mesh.triangles
    pairs = np.unique(np.sort(np.concatenate([t[:, :2], t[:, 1:], t[:, ::2]]), axis=1), axis=0)
    med = np.median(np.linalg.norm(mesh.vertices[pairs[:, 0]] - mesh.vertices[pairs[:, 1]], axis=1))
    assert inner_vertex_hash(mesh).cell == pytest.approx(med)


# ---------------------------------------------------------------------------
# Collision loss


def test_collision_point_under_patch_oracle():
    outer = point_mesh([0.4, 0.4, -0.1])
    loss, grad = collision_loss(outer, flat_patch())
    assert loss == pytest.approx(1e-3, rel=1e-12)
    np.testing.assert_allclose(grad, [[0.0, 0.0, -0.03]], atol=1e-18)


def test_collision_scales_cubically_with_depth():
    base, _ = collision_loss(point_mesh([0.4, 0.4, -0.1]), flat_patch())
    for t in (2.0, 3.0):
        loss, _ = collision_loss(point_mesh([0.4, 0.4, -0.1 * t]), flat_patch())
        assert loss == pytest.approx(t**3 * base, rel=1e-12)


def test_collision_zero_cases():
    patch = flat_patch()
    # Coincident with an inner vertex: clipped depth is exactly zero.
    loss, grad = collision_loss(point_mesh(patch.vertices[0]), patch)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)
    # Strictly on the outside of the oriented surface.
    loss, grad = collision_loss(point_mesh([0.2, -0.1, 0.3]), patch)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_collision_averages_over_outer_vertices():
    single, _ = collision_loss(point_mesh([0.4, 0.4, -0.1]), flat_patch())
    both, _ = collision_loss(
        point_mesh([[0.4, 0.4, -0.1], [0.2, -0.1, 0.3]]), flat_patch()
    )
    assert both == pytest.approx(single / 2.0, rel=1e-12)


def test_collision_surface_mode_agrees_on_flat_patch():
    # Every patch normal is +z, so nearest-vertex and nearest-surface depths
    # coincide and the two modes must produce the same loss.
    outer = point_mesh([[0.3, 0.0, -0.02], [0.4, 0.4, -0.1]])
    lv, gv = collision_loss(outer, flat_patch(), nearest="vertex")
    ls, gs = collision_loss(outer, flat_patch(), nearest="surface")
    assert lv == pytest.approx(ls, rel=1e-12)
    np.testing.assert_allclose(gv, gs, atol=1e-18)


def test_collision_validation():
    patch = flat_patch()
    with pytest.raises(InvalidInputError):
        collision_loss(point_mesh([0, 0, 0]), point_mesh([1, 1, 1]))  # no normals
    with pytest.raises(InvalidInputError):
        collision_loss(Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64)), patch)
    with pytest.raises(InvalidInputError):
        collision_loss(point_mesh([0, 0, 0]), patch, nearest="plane")
    with pytest.raises(InvalidInputError):
        collision_loss(point_mesh([0, 0, 0]), point_mesh([[0, 0, 0]]), nearest="surface")


def test_point_triangle_regions():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    c = np.array([[0.0, 1.0, 0.0]])
    cases = [
        ([0.25, 0.25, 1.0], [0.25, 0.25, 0.0]),  # face region
        ([-1.0, -1.0, 0.0], [0.0, 0.0, 0.0]),  # vertex a
        ([2.0, -0.5, 0.0], [1.0, 0.0, 0.0]),  # vertex b
        ([-0.5, 2.0, 0.0], [0.0, 1.0, 0.0]),  # vertex c
        ([0.5, -1.0, 0.0], [0.5, 0.0, 0.0]),  # edge ab
        ([-1.0, 0.5, 0.0], [0.0, 0.5, 0.0]),  # edge ac
        ([1.0, 1.0, 0.0], [0.5, 0.5, 0.0]),  # edge bc
    ]
    for p, expect in cases:
        got = _point_triangle_closest(np.asarray(p, dtype=np.float64), a, b, c)
        np.testing.assert_allclose(got[0], expect, atol=1e-15)


def test_penetration_depths_clip_at_zero():
    patch = flat_patch()
    outer = point_mesh([[0.4, 0.4, -0.1], [0.0, 0.0, 0.5], [0.2, 0.2, -0.25]])
    np.testing.assert_allclose(
        penetration_depths(outer, patch), [0.1, 0.0, 0.25], rtol=1e-12
    )


# ---------------------------------------------------------------------------
# Laplacian smoothing


def test_laplacian_annihilates_constants():
    mesh = icosphere(radius=0.4, subdivisions=1)
    lap = _uniform_laplacian(mesh)
    row_sums = np.asarray(lap @ np.ones(len(mesh.vertices)))
    np.testing.assert_allclose(row_sums, 0.0, atol=1e-12)
    e0, _ = smoothness_energy(lap, mesh.vertices)
    e1, _ = smoothness_energy(lap, mesh.vertices + np.array([3.0, -1.0, 0.5]))
    assert e1 == pytest.approx(e0, rel=1e-9)


def test_laplacian_empty_for_triangle_free_mesh():
    lap = _uniform_laplacian(point_mesh([[0, 0, 0], [1, 1, 1]]))
    assert lap.nnz == 0
    e, g = smoothness_energy(lap, np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
    assert e == 0.0
    np.testing.assert_array_equal(g, 0.0)


def test_smoothness_gradient_matches_finite_differences():
    mesh = flat_patch()
    lap = _uniform_laplacian(mesh)
    rng = np.random.default_rng(31)
    verts = rng.normal(size=(4, 3))
    _, grad = smoothness_energy(lap, verts)
    eps = 1e-6
    for vi in range(4):
        for axis in range(3):
            vp = verts.copy()
            vp[vi, axis] += eps
            vm = verts.copy()
            vm[vi, axis] -= eps
            fd = (smoothness_energy(lap, vp)[0] - smoothness_energy(lap, vm)[0]) / (2 * eps)
            assert fd == pytest.approx(grad[vi, axis], abs=1e-6)


# ---------------------------------------------------------------------------
# Collision resolution


def test_resolve_leaves_clean_mesh_untouched():
    outer = point_mesh([[0.2, 0.2, 0.3], [0.5, -0.1, 0.7]])
    result, trace, stats = resolve_collisions(outer, flat_patch(), with_stats=True)
    np.testing.assert_array_equal(result.vertices, outer.vertices)
    assert trace == []
    assert stats == {
        "iterations": 0,
        "final_collision": 0.0,
        "final_total": 0.0,
        "converged": True,
    }


def test_resolve_concentric_spheres():
    outer = icosphere(radius=0.28, subdivisions=1)
    inner = icosphere(radius=0.30, subdivisions=1)
    result, trace, stats = resolve_collisions(outer, inner, step=0.1, with_stats=True)
    assert stats["converged"]
    assert np.max(penetration_depths(result, inner)) < 1e-3
    accepted = [t["collision"] for t in trace if t["accepted"]]
    assert all(b <= a for a, b in zip(accepted, accepted[1:]))
    # The inner mesh is never modified and the outer topology is preserved.
    np.testing.assert_array_equal(result.triangles, outer.triangles)
    np.testing.assert_array_equal(inner.vertices, icosphere(radius=0.30, subdivisions=1).vertices)


def test_resolve_trace_records_every_iteration():
    outer = icosphere(radius=0.28, subdivisions=0)
    inner = icosphere(radius=0.30, subdivisions=0)
    _, trace, stats = resolve_collisions(outer, inner, step=0.05, with_stats=True)
    assert [t["iteration"] for t in trace] == list(range(len(trace)))
    assert stats["iterations"] == len(trace)
    for t in trace:
        assert set(t) == {"iteration", "collision", "total", "trial_collision", "step", "accepted"}
    # Accepted steps grow 1.5x, rejected halve.
    for prev, nxt in zip(trace, trace[1:]):
        factor = 1.5 if prev["accepted"] else 0.5
        assert nxt["step"] == pytest.approx(prev["step"] * factor)


def test_resolve_divergence_raises_with_trace():
    # A colossal step flings the trial vertices far away, so every proposal
    # is rejected and the step keeps halving until the divergence guard trips.
    outer = Mesh([[0.0, 0.0, -0.05], [0.3, 0.0, -0.1], [0.0, 0.3, -0.2]], [[0, 1, 2]])
    with pytest.raises(DivergenceError) as exc_info:
        resolve_collisions(outer, flat_patch(), step=1e12, smooth_weight=1.0)
    trace = exc_info.value.trace
    assert len(trace) == 10
    assert not any(t["accepted"] for t in trace)


def test_resolve_validation():
    outer = point_mesh([0, 0, -0.1])
    with pytest.raises(InvalidInputError):
        resolve_collisions(outer, flat_patch(), step=0.0)
    with pytest.raises(InvalidInputError):
        resolve_collisions(outer, flat_patch(), max_iters=-1)
    with pytest.raises(InvalidInputError):
        resolve_collisions(outer, point_mesh([0, 0, 0]))


def test_resolve_zero_iters_returns_input():
    outer = point_mesh([0.4, 0.4, -0.1])
    result = resolve_collisions(outer, flat_patch(), max_iters=0)
    np.testing.assert_array_equal(result.vertices, outer.vertices)


# ---------------------------------------------------------------------------
# Image-space losses


def test_mask_loss_values():
    a = np.zeros((4, 4))
    assert mask_loss(a, a) == 0.0
    ref = np.zeros((4, 4))
    ref[:2] = 1.0
    assert mask_loss(a, ref) == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        mask_loss(np.zeros((4, 4)), np.zeros((4, 5)))


def test_normal_loss_values():
    n = np.zeros((2, 2, 3))
    n[..., 2] = 1.0
    mask = np.ones((2, 2))
    assert normal_loss(n, n, mask) == 0.0
    perp = np.zeros((2, 2, 3))
    perp[..., 0] = 1.0
    assert normal_loss(n, perp, mask) == pytest.approx(1.0)
    assert normal_loss(n, -n, mask) == pytest.approx(2.0)
    assert normal_loss(n, perp, np.zeros((2, 2))) == 0.0
    with pytest.raises(InvalidInputError):
        normal_loss(n, perp, np.ones((3, 3)))


def test_depth_loss_values():
    d = np.array([[1.0, 2.0], [3.0, 4.0]])
    ref = np.array([[1.5, 2.0], [2.0, 4.0]])
    mask = np.array([[1.0, 1.0], [0.0, 1.0]])
    assert depth_loss(d, ref, mask) == pytest.approx((0.5 + 0.0 + 0.0) / 3.0)
    assert depth_loss(d, ref, np.zeros((2, 2))) == 0.0


def test_semantic_ce_loss_values():
    mask = np.ones((1, 2))
    labels = np.array([[0, 1]])
    one_hot = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert semantic_ce_loss(one_hot, labels, mask) == pytest.approx(0.0, abs=1e-12)
    uniform = np.full((1, 2, 3), 1.0 / 3.0)
    assert semantic_ce_loss(uniform, np.array([[0, 2]]), mask) == pytest.approx(np.log(3.0))
    # Accumulated mass below 1 renormalizes before the log.
    mixed = np.array([[[0.2, 0.6], [0.2, 0.6]]])
    expected = -np.log(0.75) / 2.0 - np.log(0.25) / 2.0
    assert semantic_ce_loss(mixed, np.array([[1, 0]]), mask) == pytest.approx(expected)


def test_semantic_ce_loss_validation():
    with pytest.raises(InvalidInputError):
        semantic_ce_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(InvalidInputError):
        semantic_ce_loss(np.zeros((1, 1, 2)), np.array([[5]]), np.ones((1, 1)))
    assert semantic_ce_loss(np.zeros((1, 1, 2)), np.array([[0]]), np.zeros((1, 1))) == 0.0


# ---------------------------------------------------------------------------
# Finite-difference gradient checks


def test_hole_gradcheck_on_random_grid():
    rng = np.random.Generator(np.random.Philox(7))
    vol = rng.normal(0.0, 0.5, (4, 4, 4))
    report = finite_diff_check_hole(vol)
    assert report.loss_name == "hole_loss"
    assert report.max_rel_err < 1e-4
    assert report.num_checked == 64
    assert report.excluded_coords == []


def test_collision_gradcheck_on_hull_pair():
    rng = np.random.Generator(np.random.Philox(7))
    outer = fib_hull_mesh(50, 0.29)
    outer.vertices = outer.vertices + rng.normal(0.0, 0.003, (50, 3))
    inner = fib_hull_mesh(50, 0.30)
    report = finite_diff_check_collision(outer, inner)
    assert report.loss_name == "collision_loss"
    assert report.max_rel_err < 1e-4
    assert report.num_checked == 150
    assert report.excluded_coords == []


def test_gradcheck_zero_gradient_is_exact():
    report = finite_diff_check_hole(np.full((3, 3, 3), 2.0))
    assert report.max_rel_err == 0.0
    assert report.num_checked == 27


def test_gradcheck_excludes_selection_flips():
    # The first endpoint sits within eps of the sign boundary: nudging it
    # changes the active-edge set, so that coordinate must be excluded.
    eps = 1e-5
    vol = np.array([eps / 2.0, -0.5]).reshape(1, 1, 2)
    report = finite_diff_check_hole(vol, eps=eps)
    assert [0, 0, 0] in report.excluded_coords
    assert report.num_checked == 1


def test_gradcheck_report_round_trip():
    rep = GradCheckReport("hole_loss", 1e-9, [[0, 1]], 5)
    assert rep.to_dict() == {
        "loss_name": "hole_loss",
        "max_rel_err": 1e-9,
        "excluded_coords": [[0, 1]],
        "num_checked": 5,
    }


def test_gradcheck_eps_validation():
    with pytest.raises(InvalidInputError):
        finite_diff_check_hole(np.zeros((2, 2, 2)), eps=0.0)
    with pytest.raises(InvalidInputError):
        finite_diff_check_collision(point_mesh([0, 0, 0]), flat_patch(), eps=-1.0)
