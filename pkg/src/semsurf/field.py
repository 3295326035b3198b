"""Evaluable implicit fields over scenes of labeled analytic primitives.

A scene is an ordered list of rigid-transformed primitives (sphere, box,
capsule, torus), each carrying a semantic label and a base color.  Evaluating
the field at a point yields a joint sample:

  sdf        signed distance to the union surface (negative inside)
  density    sigma_max * logistic(-sdf / beta_den), zero in deep free space
  color      color of the nearest primitive (lowest index wins ties)
  sem_probs  per-label sums of softmax(-d_prim / beta_sem) over primitives

All evaluation is pure and vectorized over (n, 3) point batches; scalar entry
points wrap the batch path so repeated calls are bit-identical.

Grid conventions: a ``GridSpec`` describes vertex counts (nx, ny, nz) and
inclusive bounds per axis.  The documented linear vertex ordering is row-major
with x fastest: ``lin = i + nx * (j + ny * k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from ._parallel import run_chunked

Array = np.ndarray

# Logistic tails below this are treated as exactly zero density so that empty
# space composites to alpha == 0, not alpha == 1e-44.
_DENSITY_TAIL = 1e-12

# Dense sampling defaults: chunk size bounds transient (chunk, n_prim) arrays,
# budget bounds the materialized output grid.
_CHUNK = 1 << 17
DEFAULT_MEMORY_BUDGET = 2 << 30

_SHAPES = ("sphere", "box", "capsule", "torus")


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class MemoryBudgetError(RuntimeError):
    """Raised when a dense grid would exceed the configured memory budget."""


class OutOfDomainError(ValueError):
    """Raised when a grid-backed field is queried outside its bounds."""


@dataclass(frozen=True)
class SemanticLabel:
    id: int
    name: str

    def __post_init__(self) -> None:
        if self.id < 0:
            raise InvalidInputError(f"label id must be non-negative, got {self.id}")


@dataclass(frozen=True)
class FieldSample:
    sdf: float
    density: float
    color: Array
    sem_probs: Array


@dataclass(frozen=True)
class Primitive:
    """A rigid-transformed analytic solid with a label and a base color."""

    shape: str
    params: tuple[float, ...]
    center: Array
    label: int
    color: Array
    # Unit quaternion (x, y, z, w); identity when omitted.
    orientation: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        if self.shape not in _SHAPES:
            raise InvalidInputError(f"unknown shape {self.shape!r}; expected one of {_SHAPES}")
        n_expected = {"sphere": 1, "box": 3, "capsule": 2, "torus": 2}[self.shape]
        if len(self.params) != n_expected:
            raise InvalidInputError(
                f"{self.shape} takes {n_expected} parameter(s), got {len(self.params)}"
            )
        if any(p <= 0 for p in self.params):
            raise InvalidInputError(f"shape parameters must be strictly positive: {self.params}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if self.center.shape != (3,) or self.color.shape != (3,):
            raise InvalidInputError("center and color must be 3-vectors")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidInputError(f"color channels must lie in [0,1]: {self.color}")


def _sd_sphere(p: Array, radius: float) -> Array:
    return np.linalg.norm(p, axis=-1) - radius


def _sd_box(p: Array, half_extents: Array) -> Array:
    q = np.abs(p) - half_extents
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def _sd_capsule(p: Array, radius: float, half_height: float) -> Array:
    # Capsule axis along local z.
    q = p.copy()
    q[..., 2] -= np.clip(q[..., 2], -half_height, half_height)
    return np.linalg.norm(q, axis=-1) - radius


def _sd_torus(p: Array, major: float, minor: float) -> Array:
    # Ring in the local xy plane.
    ring = np.hypot(p[..., 0], p[..., 1]) - major
    return np.hypot(ring, p[..., 2]) - minor


def primitive_sdf(prim: Primitive, points: Array) -> Array:
    """Signed distance of ``points`` (shape (..., 3), world frame) to one primitive."""
    local = points - prim.center
    if prim.orientation != (0.0, 0.0, 0.0, 1.0):
        rot = Rotation.from_quat(prim.orientation)
        local = rot.inv().apply(local.reshape(-1, 3)).reshape(local.shape)
    if prim.shape == "sphere":
        return _sd_sphere(local, prim.params[0])
    if prim.shape == "box":
        return _sd_box(local, np.asarray(prim.params))
    if prim.shape == "capsule":
        return _sd_capsule(local, prim.params[0], prim.params[1])
    return _sd_torus(local, prim.params[0], prim.params[1])


@dataclass
class ImplicitScene:
    """Ordered labeled primitives plus the field shaping temperatures."""

    labels: list[SemanticLabel]
    primitives: list[Primitive]
    beta_sem: float = 0.05
    beta_den: float = 0.02
    sigma_max: float = 50.0
    name: str = "scene"

    def __post_init__(self) -> None:
        if not self.labels:
            raise InvalidInputError("scene needs at least one label")
        if not self.primitives:
            raise InvalidInputError("scene needs at least one primitive")
        if self.beta_sem <= 0 or self.beta_den <= 0:
            raise InvalidInputError("temperatures must be strictly positive")
        if self.sigma_max < 0:
            raise InvalidInputError("sigma_max must be non-negative")
        ids = [lab.id for lab in self.labels]
        if ids != list(range(len(ids))):
            raise InvalidInputError("label ids must be 0..K-1 in order")
        if len({lab.name for lab in self.labels}) != len(ids):
            raise InvalidInputError("label names must be unique")
        for prim in self.primitives:
            if not 0 <= prim.label < len(ids):
                raise InvalidInputError(f"primitive label {prim.label} outside registry 0..{len(ids)-1}")
        # One row per label selecting its primitives, used by the softmax aggregation.
        sel = np.zeros((len(self.labels), len(self.primitives)), dtype=np.float64)
        for j, prim in enumerate(self.primitives):
            sel[prim.label, j] = 1.0
        self._label_onehot = sel
        self._colors = np.stack([p.color for p in self.primitives])
        # Unrotated spheres evaluate as one batch (distance via the expanded
        # quadratic and a single matmul); everything else goes one by one.
        idx = [
            j
            for j, p in enumerate(self.primitives)
            if p.shape == "sphere" and p.orientation == (0.0, 0.0, 0.0, 1.0)
        ]
        if len(idx) >= 2:
            self._sphere_idx = np.asarray(idx, dtype=np.int64)
            self._sphere_centers = np.stack([self.primitives[j].center for j in idx])
            self._sphere_radii = np.asarray(
                [self.primitives[j].params[0] for j in idx], dtype=np.float64
            )
            self._sphere_c2 = np.einsum(
                "ij,ij->i", self._sphere_centers, self._sphere_centers
            )
        else:
            self._sphere_idx = None

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def label_id(self, name: str) -> int:
        for lab in self.labels:
            if lab.name == name:
                return lab.id
        raise InvalidInputError(f"unknown label {name!r}")


@dataclass(frozen=True)
class GridSpec:
    """Vertex-lattice geometry: counts per axis and inclusive world bounds."""

    resolution: tuple[int, int, int]
    bounds_min: Array
    bounds_max: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "bounds_min", np.asarray(self.bounds_min, dtype=np.float64))
        object.__setattr__(self, "bounds_max", np.asarray(self.bounds_max, dtype=np.float64))
        if len(self.resolution) != 3 or any(int(r) < 2 for r in self.resolution):
            raise InvalidInputError(f"resolution must be three counts >= 2, got {self.resolution}")
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if self.bounds_min.shape != (3,) or self.bounds_max.shape != (3,):
            raise InvalidInputError("bounds must be 3-vectors")
        if not np.all(self.bounds_min < self.bounds_max):
            raise InvalidInputError("bounds_min must be strictly below bounds_max per axis")

    @property
    def num_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def spacing(self) -> Array:
        n = np.asarray(self.resolution, dtype=np.float64)
        return (self.bounds_max - self.bounds_min) / (n - 1.0)

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))

    def linear_to_ijk(self, lin: Array) -> tuple[Array, Array, Array]:
        nx, ny, _ = self.resolution
        i = lin % nx
        j = (lin // nx) % ny
        k = lin // (nx * ny)
        return i, j, k

    def ijk_to_linear(self, i: Array, j: Array, k: Array) -> Array:
        nx, ny, _ = self.resolution
        return i + nx * (j + ny * k)

    def vertex_positions(self, lin: Array) -> Array:
        """World positions of linear vertex indices; exact same arithmetic on every path."""
        i, j, k = self.linear_to_ijk(np.asarray(lin, dtype=np.int64))
        step = self.spacing
        out = np.empty(np.shape(lin) + (3,), dtype=np.float64)
        out[..., 0] = self.bounds_min[0] + i * step[0]
        out[..., 1] = self.bounds_min[1] + j * step[1]
        out[..., 2] = self.bounds_min[2] + k * step[2]
        return out


@dataclass
class FieldGrid:
    """Dense joint-field samples over a GridSpec, stored channel-planar.

    Arrays are flat in the documented x-fastest linear order; ``sdf[lin]``
    belongs to the vertex whose indices satisfy lin = i + nx*(j + ny*k).
    """

    spec: GridSpec
    sdf: Array
    density: Array
    color: Array
    sem_probs: Array

    def sample_index(self, lin: int) -> FieldSample:
        return FieldSample(
            sdf=float(self.sdf[lin]),
            density=float(self.density[lin]),
            color=self.color[lin].copy(),
            sem_probs=self.sem_probs[lin].copy(),
        )


def _evaluate_batch(
    scene: ImplicitScene, points: Array, sdf_only: bool = False
) -> tuple[Array, Array | None, Array | None, Array | None]:
    """Core joint evaluation at (n, 3) points.

    Returns (sdf, density, color, sem_probs); the last three are None when
    sdf_only, which skips the softmax entirely (the expensive part).
    """
    n = points.shape[0]
    n_prim = len(scene.primitives)
    if scene._sphere_idx is not None:
        d = points @ scene._sphere_centers.T
        d *= -2.0
        d += np.einsum("ij,ij->i", points, points)[:, None]
        d += scene._sphere_c2[None, :]
        np.maximum(d, 0.0, out=d)
        np.sqrt(d, out=d)
        d -= scene._sphere_radii[None, :]
        if len(scene._sphere_idx) == n_prim:
            dists = d
        else:
            dists = np.empty((n, n_prim), dtype=np.float64)
            dists[:, scene._sphere_idx] = d
            grouped = set(scene._sphere_idx.tolist())
            for j, prim in enumerate(scene.primitives):
                if j not in grouped:
                    dists[:, j] = primitive_sdf(prim, points)
    else:
        dists = np.empty((n, n_prim), dtype=np.float64)
        for j, prim in enumerate(scene.primitives):
            dists[:, j] = primitive_sdf(prim, points)
    sdf = dists.min(axis=1)
    if sdf_only:
        return sdf, None, None, None

    nearest = dists.argmin(axis=1)  # first occurrence = lowest index on ties
    color = scene._colors[nearest]

    # Stable softmax over -dists/beta: subtract the per-point max exponent.
    w = np.exp((sdf[:, None] - dists) / scene.beta_sem)
    total = w.sum(axis=1)
    sem = (w @ scene._label_onehot.T) / total[:, None]

    logistic = _logistic(-sdf / scene.beta_den)
    logistic[logistic < _DENSITY_TAIL] = 0.0
    density = scene.sigma_max * logistic
    return sdf, density, color, sem


def _logistic(x: Array) -> Array:
    # Overflow-safe logistic; np.exp underflow to 0 is the desired behavior.
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(under="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
    return out


def sample_many(scene: ImplicitScene, points: Array) -> FieldGrid:
    """Joint samples at arbitrary (n, 3) points, returned channel-planar.

    The returned object reuses FieldGrid as a plain struct-of-arrays; its
    ``spec`` is None for scattered points.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"points must be (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points must be finite")
    sdf, density, color, sem = _evaluate_batch(scene, pts)
    return FieldGrid(spec=None, sdf=sdf, density=density, color=color, sem_probs=sem)


def sample(scene: ImplicitScene, x: Sequence[float]) -> FieldSample:
    """Joint field sample at one point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise InvalidInputError(f"x must be a 3-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("x must be finite")
    g = sample_many(scene, x[None, :])
    return g.sample_index(0)


def sdf_many(scene: ImplicitScene, points: Array) -> Array:
    """Union SDF only, no softmax and no density; the fast path for geometry passes."""
    pts = np.asarray(points, dtype=np.float64)
    sdf, _, _, _ = _evaluate_batch(scene, pts, sdf_only=True)
    return sdf


def iter_grid_chunks(spec: GridSpec, chunk: int = _CHUNK) -> Iterator[tuple[int, int]]:
    """Yield (start, stop) linear-index ranges covering the grid."""
    n = spec.num_vertices
    for start in range(0, n, chunk):
        yield start, min(start + chunk, n)


def sample_grid_dense(
    scene: ImplicitScene,
    spec: GridSpec,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> FieldGrid:
    """Dense joint-field samples at every grid vertex.

    Evaluates in fixed chunks so transients stay bounded; the output itself
    must fit the budget: (1 + 1 + 3 + K) float64 channels per vertex.
    """
    k = scene.num_labels
    need = spec.num_vertices * (5 + k) * 8
    if need > memory_budget:
        raise MemoryBudgetError(
            f"dense grid needs {need} bytes for {spec.num_vertices} vertices "
            f"x {5 + k} channels, over the {memory_budget}-byte memory budget"
        )
    n = spec.num_vertices
    sdf = np.empty(n, dtype=np.float64)
    density = np.empty(n, dtype=np.float64)
    color = np.empty((n, 3), dtype=np.float64)
    sem = np.empty((n, k), dtype=np.float64)

    def fill(start: int, stop: int) -> None:
        pts = spec.vertex_positions(np.arange(start, stop, dtype=np.int64))
        s, d, c, p = _evaluate_batch(scene, pts)
        sdf[start:stop] = s
        density[start:stop] = d
        color[start:stop] = c
        sem[start:stop] = p

    run_chunked(n, _CHUNK, fill)
    return FieldGrid(spec=spec, sdf=sdf, density=density, color=color, sem_probs=sem)


def sdf_grid_dense(scene: ImplicitScene, spec: GridSpec) -> Array:
    """Dense union-SDF values at every grid vertex (flat, x fastest)."""
    out = np.empty(spec.num_vertices, dtype=np.float64)

    def fill(start: int, stop: int) -> None:
        pts = spec.vertex_positions(np.arange(start, stop, dtype=np.int64))
        out[start:stop] = sdf_many(scene, pts)

    run_chunked(spec.num_vertices, _CHUNK, fill)
    return out


class GridBackedField:
    """Trilinear interpolation over a dense FieldGrid.

    Semantic probabilities are renormalized after interpolation so queries
    stay on the simplex.
    """

    def __init__(self, grid: FieldGrid):
        if grid.spec is None:
            raise InvalidInputError("grid-backed field needs a FieldGrid with a spec")
        self.grid = grid

    def sample(self, x: Sequence[float]) -> FieldSample:
        spec = self.grid.spec
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < spec.bounds_min) or np.any(x > spec.bounds_max):
            raise OutOfDomainError(f"query {x.tolist()} outside bounds")
        rel = (x - spec.bounds_min) / spec.spacing
        base = np.minimum(rel.astype(np.int64), np.asarray(spec.resolution) - 2)
        frac = rel - base
        out_sdf = 0.0
        out_density = 0.0
        out_color = np.zeros(3)
        out_sem = np.zeros(self.grid.sem_probs.shape[1])
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    w = (
                        (frac[0] if dx else 1.0 - frac[0])
                        * (frac[1] if dy else 1.0 - frac[1])
                        * (frac[2] if dz else 1.0 - frac[2])
                    )
                    lin = spec.ijk_to_linear(base[0] + dx, base[1] + dy, base[2] + dz)
                    out_sdf += w * self.grid.sdf[lin]
                    out_density += w * self.grid.density[lin]
                    out_color += w * self.grid.color[lin]
                    out_sem += w * self.grid.sem_probs[lin]
        total = out_sem.sum()
        if total > 0:
            out_sem = out_sem / total
        return FieldSample(sdf=float(out_sdf), density=float(out_density), color=out_color, sem_probs=out_sem)
