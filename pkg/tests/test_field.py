from __future__ import annotations

import math

import numpy as np
import pytest

from semsurf.field import (
    GridBackedField,
    GridSpec,
    ImplicitScene,
    InvalidInputError,
    MemoryBudgetError,
    OutOfDomainError,
    Primitive,
    SemanticLabel,
    primitive_sdf,
    sample,
    sample_grid_dense,
    sample_many,
    sdf_grid_dense,
    sdf_many,
)

from ._toys import single_sphere_scene, two_label_spheres


# ---------------------------------------------------------------------------
# Point sampling


def test_sphere_center_and_surface():
    scene = single_sphere_scene(0.5)
    assert sample(scene, (0.0, 0.0, 0.0)).sdf == -0.5
    assert sample(scene, (0.5, 0.0, 0.0)).sdf == 0.0


def test_sem_probs_on_simplex_everywhere():
    scene = two_label_spheres()
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2.0, 2.0, (500, 3))
    g = sample_many(scene, pts)
    assert np.all(g.sem_probs >= 0.0)
    np.testing.assert_allclose(g.sem_probs.sum(axis=1), 1.0, atol=1e-9)


def test_mirror_scene_midpoint_symmetry():
    scene = two_label_spheres()
    s = sample(scene, (0.0, 0.0, 0.0))
    np.testing.assert_allclose(s.sem_probs, [0.5, 0.5], atol=1e-15)


def test_mirror_scene_hand_softmax():
    # x=(0.2,0,0): body sdf = |0.2-0.3|-0.5 = -0.4, cloth sdf = |0.2+0.3|-0.5 = 0.
    # softmax(-d/beta) with beta=0.1 => weights (1, e^-4) after the shared shift.
    scene = two_label_spheres(beta_sem=0.1)
    s = sample(scene, (0.2, 0.0, 0.0))
    w_cloth = math.exp(-4.0)
    expect = np.array([1.0, w_cloth]) / (1.0 + w_cloth)
    np.testing.assert_allclose(s.sem_probs, expect, rtol=1e-14)
    assert s.sdf == pytest.approx(-0.4, abs=1e-15)


def test_color_is_nearest_primitive_lowest_index_ties():
    scene = two_label_spheres()
    # Equidistant at the origin: first primitive (body) wins.
    np.testing.assert_array_equal(sample(scene, (0.0, 0.0, 0.0)).color, [0.9, 0.25, 0.2])
    np.testing.assert_array_equal(sample(scene, (-0.4, 0.0, 0.0)).color, [0.2, 0.55, 0.85])


def test_density_law_and_tail_cutoff():
    scene = single_sphere_scene(0.5)
    near = sample(scene, (0.5, 0.0, 0.0))
    assert near.density == pytest.approx(scene.sigma_max * 0.5, rel=1e-15)
    # Deep free space: the logistic tail is clamped to exactly zero.
    assert sample(scene, (1.9, 1.9, 1.9)).density == 0.0
    # Monotone non-increasing in sdf along a radial walk.
    xs = np.linspace(0.0, 1.5, 80)
    dens = sample_many(scene, np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)).density
    assert np.all(np.diff(dens) <= 0.0)


def test_sample_is_pure():
    scene = two_label_spheres()
    a = sample(scene, (0.123, -0.456, 0.789))
    b = sample(scene, (0.123, -0.456, 0.789))
    assert a.sdf == b.sdf and a.density == b.density
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.sem_probs, b.sem_probs)


def test_sample_input_validation():
    scene = single_sphere_scene()
    with pytest.raises(InvalidInputError):
        sample(scene, (0.0, np.nan, 0.0))
    with pytest.raises(InvalidInputError):
        sample_many(scene, np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# Primitive closed forms


def _rot_matrix(q):
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def test_primitive_closed_forms_random_points():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-2.0, 2.0, (10_000, 3))
    center = np.array([0.2, -0.1, 0.3])
    local = pts - center

    sphere = Primitive("sphere", (0.6,), center, 0, (1, 0, 0))
    np.testing.assert_allclose(
        primitive_sdf(sphere, pts), np.linalg.norm(local, axis=1) - 0.6, atol=1e-12
    )

    box = Primitive("box", (0.4, 0.5, 0.6), center, 0, (1, 0, 0))
    q = np.abs(local) - np.array([0.4, 0.5, 0.6])
    expect = np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
    np.testing.assert_allclose(primitive_sdf(box, pts), expect, atol=1e-12)

    capsule = Primitive("capsule", (0.25, 0.5), center, 0, (1, 0, 0))
    seg = local.copy()
    seg[:, 2] -= np.clip(seg[:, 2], -0.5, 0.5)
    np.testing.assert_allclose(
        primitive_sdf(capsule, pts), np.linalg.norm(seg, axis=1) - 0.25, atol=1e-12
    )

    torus = Primitive("torus", (0.7, 0.2), center, 0, (1, 0, 0))
    ring = np.hypot(local[:, 0], local[:, 1]) - 0.7
    np.testing.assert_allclose(
        primitive_sdf(torus, pts), np.hypot(ring, local[:, 2]) - 0.2, atol=1e-12
    )


def test_rotated_primitive_matches_rotated_points():
    # Evaluating a rotated box must equal evaluating the unrotated box at
    # inverse-rotated points; rotation matrix built by hand from the quaternion.
    rng = np.random.default_rng(11)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    center = np.array([0.1, 0.2, -0.3])
    rotated = Primitive("box", (0.4, 0.3, 0.5), center, 0, (1, 0, 0), orientation=tuple(q))
    plain = Primitive("box", (0.4, 0.3, 0.5), (0.0, 0.0, 0.0), 0, (1, 0, 0))
    pts = rng.uniform(-1.5, 1.5, (2_000, 3))
    local = (pts - center) @ _rot_matrix(q)  # row-vector times R == R^T . v == R^-1 v
    np.testing.assert_allclose(primitive_sdf(rotated, pts), primitive_sdf(plain, local), atol=1e-12)


def test_grouped_sphere_path_matches_per_primitive_loop():
    # Scenes with >= 2 unrotated spheres take a batched distance path; it must
    # agree with the one-primitive-at-a-time reference to float precision,
    # both for all-sphere scenes and mixed scenes.
    rng = np.random.default_rng(3)
    labels = [SemanticLabel(0, "a"), SemanticLabel(1, "b")]
    spheres = [
        Primitive("sphere", (float(r),), tuple(c), i % 2, (0.5, 0.5, 0.5))
        for i, (r, c) in enumerate(zip(rng.uniform(0.1, 0.6, 5), rng.uniform(-0.8, 0.8, (5, 3))))
    ]
    box = Primitive("box", (0.3, 0.2, 0.4), (0.5, -0.5, 0.0), 1, (0.1, 0.2, 0.3))
    pts = rng.uniform(-1.5, 1.5, (3_000, 3))
    for prims in (spheres, spheres + [box]):
        scene = ImplicitScene(labels=labels, primitives=prims, name="t")
        assert scene._sphere_idx is not None
        expect = np.min(np.stack([primitive_sdf(p, pts) for p in prims]), axis=0)
        np.testing.assert_allclose(sdf_many(scene, pts), expect, atol=1e-12)


def test_sdf_many_matches_sample_many_bitwise():
    scene = two_label_spheres()
    pts = np.random.default_rng(5).uniform(-1.0, 1.0, (200, 3))
    np.testing.assert_array_equal(sdf_many(scene, pts), sample_many(scene, pts).sdf)


def test_primitive_validation():
    with pytest.raises(InvalidInputError):
        Primitive("cone", (0.5,), (0, 0, 0), 0, (1, 0, 0))
    with pytest.raises(InvalidInputError):
        Primitive("sphere", (0.5, 0.1), (0, 0, 0), 0, (1, 0, 0))
    with pytest.raises(InvalidInputError):
        Primitive("sphere", (-0.5,), (0, 0, 0), 0, (1, 0, 0))
    with pytest.raises(InvalidInputError):
        Primitive("sphere", (0.5,), (0, 0, 0), 0, (1.5, 0, 0))


def test_scene_validation():
    lab = [SemanticLabel(0, "a")]
    prim = Primitive("sphere", (0.5,), (0, 0, 0), 0, (1, 0, 0))
    with pytest.raises(InvalidInputError):
        ImplicitScene(labels=[], primitives=[prim])
    with pytest.raises(InvalidInputError):
        ImplicitScene(labels=lab, primitives=[])
    with pytest.raises(InvalidInputError):
        ImplicitScene(labels=lab, primitives=[prim], beta_sem=0.0)
    with pytest.raises(InvalidInputError):
        ImplicitScene(labels=[SemanticLabel(1, "a")], primitives=[prim])
    bad = Primitive("sphere", (0.5,), (0, 0, 0), 3, (1, 0, 0))
    with pytest.raises(InvalidInputError):
        ImplicitScene(labels=lab, primitives=[bad])


# ---------------------------------------------------------------------------
# Grid geometry


def test_grid_spec_geometry():
    spec = GridSpec((3, 5, 9), (-1.0, -1.0, -2.0), (1.0, 1.0, 2.0))
    np.testing.assert_allclose(spec.spacing, [1.0, 0.5, 0.5])
    assert spec.cell_diagonal == pytest.approx(math.sqrt(1.0 + 0.25 + 0.25))
    assert spec.num_vertices == 3 * 5 * 9
    lin = np.arange(spec.num_vertices)
    i, j, k = spec.linear_to_ijk(lin)
    np.testing.assert_array_equal(spec.ijk_to_linear(i, j, k), lin)
    # x is fastest: consecutive linear indices advance i first.
    assert i[1] == 1 and j[1] == 0 and k[1] == 0
    np.testing.assert_allclose(spec.vertex_positions(0), [-1.0, -1.0, -2.0])
    np.testing.assert_allclose(spec.vertex_positions(spec.num_vertices - 1), [1.0, 1.0, 2.0])


def test_grid_spec_validation():
    with pytest.raises(InvalidInputError):
        GridSpec((1, 4, 4), (0, 0, 0), (1, 1, 1))
    with pytest.raises(InvalidInputError):
        GridSpec((4, 4, 4), (0, 0, 0), (1, 1, 0))
    with pytest.raises(InvalidInputError):
        GridSpec((4, 4), (0, 0, 0), (1, 1, 1))


def test_dense_grid_corners_2x2x2():
    scene = single_sphere_scene(0.5)
    spec = GridSpec((2, 2, 2), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    g = sample_grid_dense(scene, spec)
    assert g.sdf.shape == (8,)
    # Every corner is at distance sqrt(3) from the center.
    np.testing.assert_allclose(g.sdf, math.sqrt(3.0) - 0.5, atol=1e-12)
    corner = spec.vertex_positions(np.arange(8))
    assert {tuple(c) for c in corner} == {
        (x, y, z) for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)
    }


def test_dense_grid_center_vertex():
    scene = single_sphere_scene(0.5)
    spec = GridSpec((3, 3, 3), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    g = sample_grid_dense(scene, spec)
    center_lin = spec.ijk_to_linear(1, 1, 1)
    assert g.sdf[center_lin] == -0.5


def test_dense_grid_negative_count_65():
    # Independent oracle: integer-lattice arithmetic, no field code involved.
    scene = single_sphere_scene(0.5)
    spec = GridSpec((65, 65, 65), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    g = sample_grid_dense(scene, spec)
    idx = np.arange(65) - 32
    ii, jj, kk = np.meshgrid(idx, idx, idx, indexing="ij")
    expect = int((ii**2 + jj**2 + kk**2 < 16**2).sum())
    assert int((g.sdf < 0).sum()) == expect == 17071


def test_dense_grid_matches_pointwise_sample():
    scene = two_label_spheres()
    spec = GridSpec((4, 3, 5), (-1.0, -1.0, -1.0), (1.0, 0.5, 1.0))
    g = sample_grid_dense(scene, spec)
    for lin in (0, 7, 31, spec.num_vertices - 1):
        s = sample(scene, spec.vertex_positions(lin))
        assert g.sdf[lin] == s.sdf
        assert g.density[lin] == s.density
        np.testing.assert_array_equal(g.sem_probs[lin], s.sem_probs)


def test_memory_budget_error_names_budget():
    scene = single_sphere_scene()
    spec = GridSpec((64, 64, 64), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    with pytest.raises(MemoryBudgetError, match="1000"):
        sample_grid_dense(scene, spec, memory_budget=1000)


def test_sdf_grid_dense_matches_joint_grid():
    scene = two_label_spheres()
    spec = GridSpec((6, 6, 6), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    np.testing.assert_array_equal(sdf_grid_dense(scene, spec), sample_grid_dense(scene, spec).sdf)


# ---------------------------------------------------------------------------
# Grid-backed interpolation


def _backed(scene, spec):
    return GridBackedField(sample_grid_dense(scene, spec))


def test_backed_lattice_vertex_identity():
    scene = two_label_spheres()
    spec = GridSpec((5, 5, 5), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    field = _backed(scene, spec)
    for lin in (0, 17, 63, 124):
        pos = field.grid.spec.vertex_positions(lin)
        got = field.sample(pos)
        assert got.sdf == pytest.approx(field.grid.sdf[lin], abs=1e-15)
        np.testing.assert_allclose(got.sem_probs, field.grid.sem_probs[lin], atol=1e-15)


def test_backed_edge_midpoint_linearity():
    # A 2-point lattice with sdf 0.2 / -0.2 on an edge interpolates to 0 at
    # the midpoint.  Build it directly instead of through a scene.
    from semsurf.field import FieldGrid

    spec = GridSpec((2, 2, 2), (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    sdf = np.zeros(8)
    sdf[spec.ijk_to_linear(0, 0, 0)] = 0.2
    sdf[spec.ijk_to_linear(1, 0, 0)] = -0.2
    grid = FieldGrid(
        spec=spec,
        sdf=sdf,
        density=np.zeros(8),
        color=np.zeros((8, 3)),
        sem_probs=np.full((8, 2), 0.5),
    )
    got = GridBackedField(grid).sample((0.5, 0.0, 0.0))
    assert got.sdf == pytest.approx(0.0, abs=1e-15)


def test_backed_cell_center_hand_trilinear():
    scene = two_label_spheres()
    spec = GridSpec((2, 2, 2), (-0.4, -0.3, -0.2), (0.2, 0.5, 0.6))
    field = _backed(scene, spec)
    center = (spec.bounds_min + spec.bounds_max) / 2.0
    got = field.sample(center)
    # At the cell center every corner weight is 1/8.
    assert got.sdf == pytest.approx(field.grid.sdf.mean(), rel=1e-14)
    assert got.density == pytest.approx(field.grid.density.mean(), rel=1e-14)
    sem = field.grid.sem_probs.mean(axis=0)
    np.testing.assert_allclose(got.sem_probs, sem / sem.sum(), rtol=1e-14)


def test_backed_sem_probs_renormalized():
    scene = two_label_spheres()
    spec = GridSpec((4, 4, 4), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    field = _backed(scene, spec)
    rng = np.random.default_rng(2)
    for p in rng.uniform(-1.0, 1.0, (50, 3)):
        assert field.sample(p).sem_probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_backed_out_of_domain():
    scene = single_sphere_scene()
    spec = GridSpec((3, 3, 3), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    field = _backed(scene, spec)
    with pytest.raises(OutOfDomainError):
        field.sample((1.0001, 0.0, 0.0))
    with pytest.raises(InvalidInputError):
        GridBackedField(sample_many(single_sphere_scene(), np.zeros((4, 3))))
