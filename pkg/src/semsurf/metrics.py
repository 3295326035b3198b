"""Layered geometric evaluation: Chamfer distance, voxel IoU, F-score, and
hollow-shell structure checks.

Conventions, documented because the upstream definitions leave them open:

  * chamfer: mean of squared nearest-point distances, averaged over the two
    directions (``squared=False`` switches to plain distances);
  * fscore: tau is a fraction of the union bounding-box diagonal;
  * voxel_iou: cell size is granularity times the union bounding box's
    largest extent; occupancy by parity ray casting along +x, with a fixed
    sub-cell origin offset so lattice-aligned geometry cannot sit exactly
    on a ray;
  * surface sampling: area-weighted, counter-based RNG (Philox), so a
    (mesh, seed) pair always yields the same cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .extract import LayeredCharacter, Mesh
from .field import Array, InvalidInputError

DEFAULT_SAMPLES = 100_000
DEFAULT_TAU = 0.005
DEFAULT_GRANULARITY = 1.0 / 32.0
_RAY_OFFSET = (1.37e-4, 2.71e-4)  # of one cell; breaks lattice alignment


class UndefinedMetricError(ValueError):
    """A metric was requested on inputs it is not defined for."""


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def sample_surface(mesh: Mesh, n_samples: int, seed: int = 0) -> Array:
    """n area-weighted uniform surface samples; deterministic in (mesh, seed)."""
    if mesh.is_empty or not len(mesh.triangles):
        raise UndefinedMetricError("cannot sample an empty mesh")
    if n_samples < 1:
        raise InvalidInputError("need at least one sample")
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise UndefinedMetricError("mesh has zero surface area")
    rng = _rng(seed)
    tri = rng.choice(len(areas), size=n_samples, p=areas / total)
    r1 = rng.random(n_samples)
    r2 = rng.random(n_samples)
    s = np.sqrt(r1)
    w0 = 1.0 - s
    w1 = s * (1.0 - r2)
    w2 = s * r2
    return w0[:, None] * a[tri] + w1[:, None] * b[tri] + w2[:, None] * c[tri]


def chamfer_points(a: Array, b: Array, squared: bool = True) -> float:
    """Symmetric Chamfer between two point clouds (mean per direction, averaged)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise UndefinedMetricError("chamfer needs non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    if squared:
        return 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def chamfer(
    a: Mesh, b: Mesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0, squared: bool = True
) -> float:
    """Chamfer distance between two meshes via surface sampling."""
    return chamfer_points(
        sample_surface(a, n_samples, seed), sample_surface(b, n_samples, seed), squared
    )


def _union_bbox(a: Mesh, b: Mesh) -> tuple[Array, Array]:
    if a.is_empty or b.is_empty:
        raise UndefinedMetricError("metric needs non-empty meshes")
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0))
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0))
    return lo, hi


def fscore(
    a: Mesh,
    b: Mesh,
    tau_fraction: float = DEFAULT_TAU,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
) -> float:
    """F1 of precision/recall at distance tau = fraction of union-bbox diagonal."""
    if tau_fraction <= 0:
        raise InvalidInputError("tau_fraction must be positive")
    lo, hi = _union_bbox(a, b)
    tau = tau_fraction * float(np.linalg.norm(hi - lo))
    pa = sample_surface(a, n_samples, seed)
    pb = sample_surface(b, n_samples, seed)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    precision = float(np.mean(d_ab <= tau))
    recall = float(np.mean(d_ba <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Parity ray casting


class _ProjectedMesh:
    """Triangles prepared for +x ray crossings at arbitrary (y, z) origins."""

    def __init__(self, mesh: Mesh):
        v = mesh.vertices
        t = mesh.triangles
        self.ayz = v[t[:, 0]][:, 1:]
        self.byz = v[t[:, 1]][:, 1:]
        self.cyz = v[t[:, 2]][:, 1:]
        self.ax = v[t[:, 0]][:, 0]
        self.bx = v[t[:, 1]][:, 0]
        self.cx = v[t[:, 2]][:, 0]
        e1 = self.byz - self.ayz
        e2 = self.cyz - self.ayz
        self.det = e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]
        self.valid = self.det != 0.0

    def crossings(self, origins_yz: Array) -> list[np.ndarray]:
        """Sorted crossing x-coordinates per (y, z) ray origin."""
        q = np.asarray(origins_yz, dtype=np.float64).reshape(-1, 2)
        out = []
        det = np.where(self.valid, self.det, 1.0)
        for oy, oz in q:
            py = oy - self.ayz[:, 0]
            pz = oz - self.ayz[:, 1]
            e2 = self.cyz - self.ayz
            e1 = self.byz - self.ayz
            alpha = (py * e2[:, 1] - pz * e2[:, 0]) / det
            beta = (pz * e1[:, 0] - py * e1[:, 1]) / det
            hit = (
                self.valid
                & (alpha > 0.0)
                & (beta > 0.0)
                & (alpha + beta < 1.0)
            )
            xs = (
                self.ax[hit]
                + alpha[hit] * (self.bx[hit] - self.ax[hit])
                + beta[hit] * (self.cx[hit] - self.ax[hit])
            )
            out.append(np.sort(xs))
        return out

    def contains(self, points: Array) -> np.ndarray:
        """Parity inside-test for points (crossings left of the point)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inside = np.zeros(len(pts), dtype=bool)
        for i, (x, y, z) in enumerate(pts):
            xs = self.crossings([(y, z)])[0]
            inside[i] = (np.searchsorted(xs, x) % 2) == 1
        return inside


def _occupancy(mesh: Mesh, lo: Array, hi: Array, cell: float) -> np.ndarray:
    """Boolean voxel-center occupancy on the [lo, hi] box at the given cell size."""
    counts = np.maximum(np.ceil((hi - lo) / cell).astype(int), 1)
    centers = [lo[d] + (np.arange(counts[d]) + 0.5) * cell for d in range(3)]
    proj = _ProjectedMesh(mesh)
    occ = np.zeros(tuple(counts), dtype=bool)
    off_y = _RAY_OFFSET[0] * cell
    off_z = _RAY_OFFSET[1] * cell
    for j, cy in enumerate(centers[1]):
        origins = [(cy + off_y, cz + off_z) for cz in centers[2]]
        for kk, xs in enumerate(proj.crossings(origins)):
            if xs.size:
                occ[:, j, kk] = (np.searchsorted(xs, centers[0]) % 2) == 1
    return occ


def _component_labels(mesh: Mesh) -> np.ndarray:
    """Connected-component id per vertex (vertices linked through triangles)."""
    n = len(mesh.vertices)
    parent = np.arange(n)

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for tri in mesh.triangles:
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        ra, rb, rc = find(a), find(b), find(c)
        parent[max(ra, rb)] = min(ra, rb)
        rb = find(b)
        parent[max(rb, rc)] = min(rb, rc)
    roots = np.array([find(i) for i in range(n)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def _closedness(mesh: Mesh, labels: np.ndarray) -> np.ndarray:
    """Per-component flag: every edge borders exactly two triangles."""
    ncomp = int(labels.max()) + 1 if labels.size else 0
    closed = np.ones(ncomp, dtype=bool)
    if not len(mesh.triangles):
        return np.zeros(ncomp, dtype=bool)
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    bad = uniq[counts != 2]
    if len(bad):
        closed[np.unique(labels[bad[:, 0]])] = False
    # Vertices with no triangles at all form trivially non-closed components.
    used = np.zeros(len(mesh.vertices), dtype=bool)
    used[t.ravel()] = True
    closed[np.unique(labels[~used])] = False
    return closed


def _submesh(mesh: Mesh, labels: np.ndarray, comp: int) -> Mesh:
    keep = labels[mesh.triangles[:, 0]] == comp
    tris = mesh.triangles[keep]
    used = np.unique(tris)
    remap = np.zeros(len(mesh.vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[tris])


def hollow_check(mesh: Mesh) -> dict:
    """Component count, closed-component count, and nested containment pairs.

    A pair (i, j) counts once when either component's centroid lies inside
    the other; only closed components act as containers.
    """
    if mesh.is_empty:
        raise InvalidInputError("hollow check needs a non-empty mesh")
    labels = _component_labels(mesh)
    ncomp = int(labels.max()) + 1
    closed = _closedness(mesh, labels)
    centroids = np.stack(
        [mesh.vertices[labels == c].mean(axis=0) for c in range(ncomp)]
    )
    subs = [_submesh(mesh, labels, c) if closed[c] else None for c in range(ncomp)]
    projs = [_ProjectedMesh(s) if s is not None else None for s in subs]
    span = np.ptp(mesh.vertices, axis=0).max()
    off = span * 1e-7
    nested = 0
    for i in range(ncomp):
        for j in range(i + 1, ncomp):
            i_in_j = projs[j] is not None and bool(
                projs[j].contains(centroids[i] + [0.0, off, 2 * off])[0]
            )
            j_in_i = projs[i] is not None and bool(
                projs[i].contains(centroids[j] + [0.0, off, 2 * off])[0]
            )
            if i_in_j or j_in_i:
                nested += 1
    return {
        "components": ncomp,
        "closed_components": int(closed.sum()),
        "nested_pairs": nested,
    }


def _require_watertight(mesh: Mesh, tag: str) -> None:
    labels = _component_labels(mesh)
    closed = _closedness(mesh, labels)
    bad = np.flatnonzero(~closed)
    if bad.size:
        raise InvalidInputError(
            f"mesh {tag!r} component {int(bad[0])} is not closed "
            "(boundary or non-manifold edges)"
        )


def voxel_iou(a: Mesh, b: Mesh, granularity: float = DEFAULT_GRANULARITY) -> float:
    """Occupancy IoU at cell size = granularity x largest union-bbox extent."""
    if granularity <= 0 or granularity > 1:
        raise InvalidInputError("granularity must be in (0, 1]")
    _require_watertight(a, "a")
    _require_watertight(b, "b")
    lo, hi = _union_bbox(a, b)
    cell = granularity * float(np.max(hi - lo))
    if cell <= 0:
        raise UndefinedMetricError("degenerate union bounding box")
    occ_a = _occupancy(a, lo, hi, cell)
    occ_b = _occupancy(b, lo, hi, cell)
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(occ_a, occ_b).sum() / union)


# ---------------------------------------------------------------------------
# Layer reporting


@dataclass(frozen=True)
class MetricsConfig:
    n_samples: int = DEFAULT_SAMPLES
    seed: int = 0
    tau_fraction: float = DEFAULT_TAU
    granularity: float = DEFAULT_GRANULARITY
    squared: bool = True


@dataclass
class LayerReport:
    rows: dict[str, dict[str, float]]
    n_samples: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "rows": {k: dict(v) for k, v in self.rows.items()},
            "n_samples": self.n_samples,
            "seed": self.seed,
        }


def _concat_meshes(meshes: list[Mesh]) -> Mesh:
    verts = []
    tris = []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(tris))


def evaluate_layers(
    pred: LayeredCharacter,
    ref: LayeredCharacter,
    config: MetricsConfig = MetricsConfig(),
) -> LayerReport:
    """All three metrics per shared layer plus a "whole" row.

    The "whole" row uses the layer named "holistic" when both characters
    carry one, otherwise the concatenation of the compared layers.
    """
    layer_names = [n for n in pred.layers if n != "holistic"]
    for name in layer_names:
        if name not in ref.layers:
            raise InvalidInputError(f"reference character lacks layer {name!r}")
    rows: dict[str, dict[str, float]] = {}
    for name in layer_names:
        rows[name] = _metric_row(pred.layers[name], ref.layers[name], config)
    if "holistic" in pred.layers and "holistic" in ref.layers:
        whole_pred = pred.layers["holistic"]
        whole_ref = ref.layers["holistic"]
    else:
        whole_pred = _concat_meshes([pred.layers[n] for n in layer_names])
        whole_ref = _concat_meshes([ref.layers[n] for n in layer_names])
    rows["whole"] = _metric_row(whole_pred, whole_ref, config)
    return LayerReport(rows, config.n_samples, config.seed)


def _metric_row(a: Mesh, b: Mesh, config: MetricsConfig) -> dict[str, float]:
    return {
        "chamfer": chamfer(a, b, config.n_samples, config.seed, config.squared),
        "voxel_iou": voxel_iou(a, b, config.granularity),
        "fscore": fscore(a, b, config.tau_fraction, config.n_samples, config.seed),
    }
