"""Layered orthographic volume rendering over the joint field.

One compositing core serves every rendering mode.  With per-sample gate
``g_i`` (1 for the holistic image, the probability of one label for a
single-semantic image, the summed probability of a label set for a layered
image):

    alpha_i  = 1 - exp(-sigma_i * delta_i)
    ae_i     = alpha_i * g_i
    T_i      = prod_{j<i} (1 - ae_j)
    color    = sum_i T_i * ae_i * c_i
    semantic = sum_i T_i * ae_i * p_i        (per-label vector)
    alpha    = 1 - T_{N+1}

so a singleton set reproduces the single-semantic image bit for bit, and
the full label set matches the holistic image up to probability rounding.

Camera model: orthographic, looking at the origin.  Azimuth 0 / elevation 0
views from +y toward -y with +z up on screen; azimuth rotates the viewpoint
counterclockwise around +z (seen from above).  Samples are midpoints of N
uniform bins on [near, far]; no jitter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._parallel import run_chunked
from .field import Array, ImplicitScene, InvalidInputError, sample_many
from .extract import field_normals
from .semantics import _selector_members

DEFAULT_SAMPLES = 512
_PIXEL_CHUNK = 2048
_DEPTH_EPS = 1e-8


@dataclass(frozen=True)
class Camera:
    """Orthographic camera on the view sphere around the origin."""

    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    width: int = 128
    height: int = 128
    half_extent: float = 1.6
    near: float = -2.5
    far: float = 2.5
    num_samples: int = DEFAULT_SAMPLES

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image dimensions must be positive")
        if self.half_extent <= 0:
            raise InvalidInputError("half_extent must be positive")
        if self.far <= self.near:
            raise InvalidInputError("far must exceed near")
        if self.num_samples < 2:
            raise InvalidInputError("need at least two samples per ray")

    def basis(self) -> tuple[Array, Array, Array]:
        """(view direction, image right, image up) as unit world vectors."""
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        eye = np.array(
            [math.sin(az) * math.cos(el), math.cos(az) * math.cos(el), math.sin(el)]
        )
        direction = -eye
        up_world = np.array([0.0, 0.0, 1.0])
        right = np.cross(direction, up_world)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            # Straight up/down: keep screen x aligned with world -x.
            right = np.array([-1.0, 0.0, 0.0])
        else:
            right = right / nr
        up_img = np.cross(right, direction)
        return direction, right, up_img

    def sample_ts(self) -> tuple[Array, float]:
        """Midpoint sample depths along the ray and the constant spacing."""
        delta = (self.far - self.near) / self.num_samples
        ts = self.near + (np.arange(self.num_samples) + 0.5) * delta
        return ts, delta


@dataclass(frozen=True)
class RayGrid:
    """Parallel rays through all pixel centers (row-major, row 0 at the top)."""

    origins: Array
    direction: Array
    ts: Array
    delta: float

    def positions(self, sel=slice(None)) -> Array:
        """(rays, N, 3) world sample positions for the selected rays."""
        return (
            self.origins[sel, None, :]
            + self.ts[None, :, None] * self.direction[None, None, :]
        )


def generate_rays(camera: Camera) -> RayGrid:
    """Per-pixel orthographic rays with midpoint sample depths."""
    direction, right, up_img = camera.basis()
    cols = (np.arange(camera.width) + 0.5) / camera.width - 0.5
    rows = 0.5 - (np.arange(camera.height) + 0.5) / camera.height
    u = cols * 2.0 * camera.half_extent
    v = rows * 2.0 * camera.half_extent * camera.height / camera.width
    uu, vv = np.meshgrid(u, v)
    origins = uu.reshape(-1, 1) * right + vv.reshape(-1, 1) * up_img
    ts, delta = camera.sample_ts()
    return RayGrid(origins, direction, ts, delta)


@dataclass
class RayBundle:
    """Composited per-ray outputs."""

    color: Array
    alpha: Array
    semantic: Array | None = None
    depth: Array | None = None


def composite(
    sigma: Array,
    deltas,
    colors: Array | None = None,
    probs: Array | None = None,
    gate: Array | None = None,
    ts: Array | None = None,
    far: float | None = None,
) -> RayBundle:
    """Front-to-back compositing of (rays, samples) arrays.

    ``gate`` is the per-sample semantic weight (defaults to 1).  ``depth``
    (computed when ``ts`` is given) is the alpha-normalized expected sample
    depth, ``far`` where the ray met no density at all.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 1:
        sigma = sigma[None, :]
    n, _ = sigma.shape
    deltas = np.broadcast_to(np.asarray(deltas, dtype=np.float64), sigma.shape)
    alpha_s = -np.expm1(-sigma * deltas)
    ae = alpha_s if gate is None else alpha_s * gate
    cp = np.cumprod(1.0 - ae, axis=1)
    trans = np.empty_like(cp)
    trans[:, 0] = 1.0
    trans[:, 1:] = cp[:, :-1]
    w = trans * ae
    alpha = 1.0 - cp[:, -1]
    if colors is not None:
        color = np.einsum("rs,rsc->rc", w, np.asarray(colors, dtype=np.float64))
    else:
        color = np.zeros((n, 3))
    semantic = None
    if probs is not None:
        semantic = np.einsum("rs,rsk->rk", w, np.asarray(probs, dtype=np.float64))
    depth = None
    if ts is not None:
        hit = alpha > 0.0
        depth = np.full(n, far if far is not None else 0.0)
        expected = w @ np.asarray(ts, dtype=np.float64)
        depth[hit] = expected[hit] / np.maximum(alpha[hit], _DEPTH_EPS)
    return RayBundle(color, alpha, semantic, depth)


def _gate_for(selector, probs: Array, num_labels: int) -> Array | None:
    if selector is None:
        return None
    if isinstance(selector, (int, np.integer)):
        if not 0 <= int(selector) < num_labels:
            raise InvalidInputError(f"label id {selector} out of range")
        return probs[..., int(selector)]
    ids = _selector_members(selector, num_labels)
    return probs[..., ids].sum(axis=-1)


def _composite_ray(scene: ImplicitScene, ray: RayGrid, index: int, selector):
    pos = ray.positions(slice(index, index + 1)).reshape(-1, 3)
    g = sample_many(scene, pos)
    n = ray.ts.size
    sigma = g.density.reshape(1, n)
    colors = g.color.reshape(1, n, 3)
    probs = g.sem_probs.reshape(1, n, scene.num_labels)
    gate = _gate_for(selector, probs, scene.num_labels)
    return composite(sigma, ray.delta, colors, probs, gate)


def render_pixel(scene: ImplicitScene, ray: RayGrid, index: int = 0):
    """Holistic (color, alpha) for one ray of a grid."""
    out = _composite_ray(scene, ray, index, None)
    return out.color[0], float(out.alpha[0])


def render_pixel_semantic(scene: ImplicitScene, ray: RayGrid, s: int, index: int = 0):
    """(color, alpha) for one ray rendered under a single semantic label."""
    out = _composite_ray(scene, ray, index, int(s))
    return out.color[0], float(out.alpha[0])


def render_pixel_set(scene: ImplicitScene, ray: RayGrid, members, index: int = 0):
    """(color, semantic row, alpha) for one ray rendered under a label set."""
    if isinstance(members, (int, np.integer)):
        raise InvalidInputError("expected a label set; pass a single id as {id}")
    out = _composite_ray(scene, ray, index, members)
    return out.color[0], out.semantic[0], float(out.alpha[0])


@dataclass
class RenderBuffers:
    """Per-pixel outputs of one layer render, all row-major (H, W, ...)."""

    color: Array
    alpha: Array
    semantic: Array
    depth: Array
    normal: Array
    label: Array

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]


def render_layers(
    scene: ImplicitScene,
    camera: Camera,
    selectors: dict[str, object] | None = None,
    with_normals: bool = True,
) -> dict[str, RenderBuffers]:
    """Render one view; the field is sampled once and shared by all layers.

    ``selectors`` maps layer name to None (holistic), a label id
    (single-semantic), or a label set.  Default renders the holistic layer.
    """
    if selectors is None:
        selectors = {"holistic": None}
    if not selectors:
        raise InvalidInputError("need at least one layer to render")
    h, wdt = camera.height, camera.width
    npix = h * wdt
    k = scene.num_labels
    rays = generate_rays(camera)

    acc = {
        name: {
            "color": np.zeros((npix, 3)),
            "alpha": np.zeros(npix),
            "semantic": np.zeros((npix, k)),
            "depth": np.full(npix, camera.far),
        }
        for name in selectors
    }
    def fill(start: int, stop: int) -> None:
        m = stop - start
        g = sample_many(scene, rays.positions(slice(start, stop)).reshape(-1, 3))
        sigma = g.density.reshape(m, camera.num_samples)
        colors = g.color.reshape(m, camera.num_samples, 3)
        probs = g.sem_probs.reshape(m, camera.num_samples, k)
        for name, sel in selectors.items():
            gate = _gate_for(sel, probs, k)
            out = composite(sigma, rays.delta, colors, probs, gate, rays.ts, camera.far)
            acc[name]["color"][start:stop] = out.color
            acc[name]["alpha"][start:stop] = out.alpha
            acc[name]["semantic"][start:stop] = out.semantic
            acc[name]["depth"][start:stop] = out.depth

    run_chunked(npix, _PIXEL_CHUNK, fill)

    result: dict[str, RenderBuffers] = {}
    for name in selectors:
        a = acc[name]
        normal = np.zeros((npix, 3))
        label = np.full(npix, -1, dtype=np.int64)
        fg = a["alpha"] >= 0.5
        if with_normals and np.any(fg):
            pts = rays.origins[fg] + a["depth"][fg, None] * rays.direction[None, :]
            normal[fg] = field_normals(scene, pts)
        if np.any(fg):
            label[fg] = np.argmax(a["semantic"][fg], axis=1)
        result[name] = RenderBuffers(
            color=a["color"].reshape(h, wdt, 3),
            alpha=a["alpha"].reshape(h, wdt),
            semantic=a["semantic"].reshape(h, wdt, k),
            depth=a["depth"].reshape(h, wdt),
            normal=normal.reshape(h, wdt, 3),
            label=label.reshape(h, wdt),
        )
    return result


def render_buffers(
    scene: ImplicitScene,
    camera: Camera,
    mode=None,
    with_normals: bool = True,
) -> RenderBuffers:
    """Render one view in one mode (None = holistic, label id, or label set)."""
    return render_layers(scene, camera, {"layer": mode}, with_normals)["layer"]


def composite_over(buffers: RenderBuffers, background) -> Array:
    """Presentation step: color over a constant background."""
    bg = np.asarray(background, dtype=np.float64).reshape(1, 1, 3)
    return buffers.color + (1.0 - buffers.alpha[..., None]) * bg


def view_azimuths(count: int) -> list[float]:
    """Evenly spaced azimuths starting at 0 (degrees)."""
    if count < 1:
        raise InvalidInputError("need at least one view")
    return [i * 360.0 / count for i in range(count)]


def label_palette(scene: ImplicitScene) -> Array:
    """(K, 3) display color per label: the color of its first primitive."""
    palette = np.zeros((scene.num_labels, 3))
    seen = set()
    for prim in scene.primitives:
        if prim.label not in seen:
            palette[prim.label] = prim.color
            seen.add(prim.label)
    return palette


def _to_u8(img: Array) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def buffer_images(
    buffers: RenderBuffers, scene: ImplicitScene, camera: Camera
) -> dict[str, np.ndarray]:
    """uint8 image per buffer name (color, alpha, depth, normal, semantic)."""
    depth01 = (buffers.depth - camera.near) / (camera.far - camera.near)
    normal01 = (buffers.normal + 1.0) / 2.0
    palette = label_palette(scene)
    sem = np.zeros((*buffers.label.shape, 3))
    fg = buffers.label >= 0
    sem[fg] = palette[buffers.label[fg]]
    return {
        "color": _to_u8(buffers.color),
        "alpha": _to_u8(buffers.alpha),
        "depth": _to_u8(depth01),
        "normal": _to_u8(normal01),
        "semantic": _to_u8(sem),
    }


def save_view_pngs(
    buffers: RenderBuffers,
    scene: ImplicitScene,
    camera: Camera,
    stem: str | Path,
    view_tag: str,
    only: tuple[str, ...] | None = None,
) -> list[Path]:
    """Write ``<stem>_<view>_<buffer>.png`` per buffer (all, or just ``only``)."""
    from PIL import Image

    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    images = buffer_images(buffers, scene, camera)
    if only is not None:
        bad = [b for b in only if b not in images]
        if bad:
            raise InvalidInputError(f"unknown buffer names {bad}; have {sorted(images)}")
        images = {b: images[b] for b in images if b in only}
    paths = []
    for buf_name, img in images.items():
        p = stem.parent / f"{stem.name}_{view_tag}_{buf_name}.png"
        mode = "L" if img.ndim == 2 else "RGB"
        Image.fromarray(img, mode=mode).save(p, format="PNG")
        paths.append(p)
    return paths
