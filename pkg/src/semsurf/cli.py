"""Batch front end: scenes to extraction, rendering, metrics and checks.

File-in/file-out only.  Settings merge in three layers: built-in defaults,
then an optional JSON config file (``--config``, carries a schema_version),
then explicit command-line flags; later layers win.  A single seed (default
0) drives every random choice, so reruns of one command with the same
inputs rewrite the same bytes.

Exit codes: 0 success, 1 configuration problem (bad flags, bad config,
missing or malformed input files), 2 runtime failure.  Problems go to
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import scenes
from ._parallel import thread_count
from .extract import (
    LayeredCharacter,
    default_coarse,
    default_layer_selectors,
    extract_character,
    icosphere,
)
from .field import GridSpec, ImplicitScene, InvalidInputError
from .losses import (
    LossWeights,
    finite_diff_check_collision,
    finite_diff_check_hole,
    penetration_depths,
    resolve_collisions,
)
from .meshio import load_mesh, save_character, save_mesh
from .metrics import MetricsConfig, evaluate_layers
from .render import Camera, render_layers, save_view_pngs, view_azimuths
from .semantics import SemanticSet

CONFIG_SCHEMA_VERSION = 1

_BUFFER_NAMES = ("color", "alpha", "depth", "normal", "semantic")


class ConfigError(Exception):
    """Bad settings; maps to exit code 1."""


# ---------------------------------------------------------------------------
# Settings plumbing


_DEFAULTS = {
    "out": "out",
    "format": "obj",
    "seed": 0,
    "fine": "256x256x384",
    "coarse": None,
    "kernel": 3,
    "proposal": True,
    "layers": None,
    "views": 8,
    "elevation": 0.0,
    "width": 128,
    "height": 128,
    "samples": 512,
    "half_extent": 1.6,
    "near": -2.5,
    "far": 2.5,
    "buffer": None,
    "cameras": None,
    "n_samples": 100_000,
    "tau_fraction": 0.005,
    "granularity": 1.0 / 32.0,
    "step": 0.1,
    "max_iters": 500,
    "smooth_weight": 0.0,
    "eps": 1e-5,
    "loss_weights": None,
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    version = doc.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version {version!r} unsupported; expected {CONFIG_SCHEMA_VERSION}"
        )
    unknown = set(doc) - set(_DEFAULTS) - {"schema_version", "scene"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return doc


@dataclass
class JobConfig:
    """Effective settings for one command after the three-layer merge."""

    values: dict

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "JobConfig":
        merged = dict(_DEFAULTS)
        merged["scene"] = None
        merged.update(_load_config_file(getattr(args, "config", None)))
        for key in merged:
            flag = getattr(args, key, None)
            if flag is not None:
                merged[key] = flag
        if getattr(args, "no_proposal", False):
            merged["proposal"] = False
        if merged["kernel"] < 1 or merged["kernel"] % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {merged['kernel']}")
        if merged["loss_weights"] is not None:
            try:
                LossWeights(**merged["loss_weights"])
            except (TypeError, InvalidInputError) as exc:
                raise ConfigError(f"bad loss_weights: {exc}") from exc
        return cls(merged)

    def __getitem__(self, key: str):
        return self.values[key]

    def scene_with_bounds(self) -> tuple[ImplicitScene, tuple]:
        name = self.values["scene"]
        if name is None:
            raise ConfigError("no scene given; pass --scene or set it in the config")
        p = Path(name)
        if p.exists():
            scene, bounds = scenes.load_scene(p)
            if bounds is None:
                raise ConfigError(f"scene file {p} carries no bounds")
            return scene, bounds
        if name in scenes.DEMO_BOUNDS:
            return scenes.demo_scene(name), scenes.demo_bounds(name)
        raise FileNotFoundError(f"scene file not found: {name}")

    def selectors_for(self, scene: ImplicitScene) -> dict[str, object]:
        sel = default_layer_selectors(scene)
        spec = self.values["layers"]
        if spec is None:
            return sel
        if isinstance(spec, str):
            spec = [s for s in spec.split(",") if s]
        if isinstance(spec, dict):
            by_name = {lab.name: lab.id for lab in scene.labels}
            out: dict[str, object] = {}
            for name, members in spec.items():
                if members == "all":
                    out[name] = SemanticSet(frozenset(range(scene.num_labels)), name)
                    continue
                bad = [m for m in members if m not in by_name]
                if bad:
                    raise ConfigError(f"layer {name!r} names unknown labels {bad}")
                out[name] = SemanticSet(frozenset(by_name[m] for m in members), name)
            return out
        missing = [n for n in spec if n not in sel]
        if missing:
            raise ConfigError(f"unknown layers {missing}; have {sorted(sel)}")
        return {n: sel[n] for n in sel if n in spec}

    def cameras(self) -> list[tuple[str, Camera]]:
        base = {
            "width": self.values["width"],
            "height": self.values["height"],
            "half_extent": self.values["half_extent"],
            "near": self.values["near"],
            "far": self.values["far"],
            "num_samples": self.values["samples"],
        }
        entries = self.values["cameras"]
        if entries is None:
            entries = [
                {"azimuth_deg": az, "elevation_deg": self.values["elevation"]}
                for az in view_azimuths(self.values["views"])
            ]
        cams = []
        for i, entry in enumerate(entries):
            try:
                cam = Camera(**{**base, **entry})
            except (TypeError, InvalidInputError) as exc:
                raise ConfigError(f"bad camera entry {i}: {exc}") from exc
            cams.append((f"az{int(round(cam.azimuth_deg)) % 360:03d}", cam))
        if len({tag for tag, _ in cams}) != len(cams):
            cams = [(f"view{i:02d}", cam) for i, (_, cam) in enumerate(cams)]
        return cams

    def metrics_config(self) -> MetricsConfig:
        return MetricsConfig(
            n_samples=self.values["n_samples"],
            seed=self.values["seed"],
            tau_fraction=self.values["tau_fraction"],
            granularity=self.values["granularity"],
        )


def _parse_resolution(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"resolution must look like 256x256x384, got {text!r}")
    try:
        nums = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"resolution must be three integers, got {text!r}") from None
    return nums


def _grid(cfg: JobConfig, key: str, bounds: tuple) -> GridSpec:
    try:
        return GridSpec(_parse_resolution(cfg[key]), bounds[0], bounds[1])
    except InvalidInputError as exc:
        raise ConfigError(f"bad {key} grid: {exc}") from exc


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: JobConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_demo(cfg: JobConfig) -> int:
    out = _out_dir(cfg)
    for name in sorted(scenes.DEMO_BOUNDS):
        path = out / f"{name}.json"
        scenes.save_scene(scenes.demo_scene(name), path, scenes.demo_bounds(name))
        print(path)
    return 0


def cmd_extract(cfg: JobConfig) -> int:
    scene, bounds = cfg.scene_with_bounds()
    fine = _grid(cfg, "fine", bounds)
    coarse = _grid(cfg, "coarse", bounds) if cfg["coarse"] else default_coarse(fine)
    selectors = cfg.selectors_for(scene)
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    char, stats = extract_character(
        scene,
        fine,
        selectors=selectors,
        use_proposal=cfg["proposal"],
        coarse=coarse,
        kernel=cfg["kernel"],
    )
    wall = time.perf_counter() - t0
    paths = save_character(char, out / scene.name, fmt=cfg["format"])
    stats_doc = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "command": "extract",
        "scene": scene.name,
        "seed": cfg["seed"],
        "threads": thread_count(),
        "fine": list(fine.resolution),
        "coarse": list(coarse.resolution) if cfg["proposal"] else None,
        "kernel": cfg["kernel"] if cfg["proposal"] else None,
        "wall_time_s": wall,
        "outputs": [p.name for p in paths],
        **stats,
    }
    _write_json(out / f"{scene.name}_extract_stats.json", stats_doc)
    for p in paths:
        print(p)
    print(
        f"{stats['mode']}: {stats['fine_evaluations']} fine evaluations, "
        f"reduction {stats['reduction_ratio']:.2f}x, {wall:.1f}s"
    )
    return 0


def cmd_render(cfg: JobConfig) -> int:
    scene, _ = cfg.scene_with_bounds()
    selectors = cfg.selectors_for(scene)
    only = None
    if cfg["buffer"] is not None:
        only = tuple(b for b in str(cfg["buffer"]).split(",") if b)
        bad = [b for b in only if b not in _BUFFER_NAMES]
        if bad:
            raise ConfigError(f"unknown buffers {bad}; have {list(_BUFFER_NAMES)}")
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    written = []
    for tag, cam in cfg.cameras():
        layers = render_layers(scene, cam, selectors)
        for layer_name, bufs in layers.items():
            written += save_view_pngs(
                bufs, scene, cam, out / f"{scene.name}_{layer_name}", tag, only=only
            )
    wall = time.perf_counter() - t0
    stats_doc = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "command": "render",
        "scene": scene.name,
        "seed": cfg["seed"],
        "threads": thread_count(),
        "views": len(cfg.cameras()),
        "resolution": [cfg["width"], cfg["height"]],
        "samples_per_ray": cfg["samples"],
        "wall_time_s": wall,
        "outputs": sorted(p.name for p in written),
    }
    _write_json(out / f"{scene.name}_render_stats.json", stats_doc)
    print(f"{len(written)} images in {wall:.1f}s")
    return 0


def _load_layer_dir(path: str) -> LayeredCharacter:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"mesh directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".obj", ".ply"))
    if not files:
        raise InvalidInputError(f"no .obj or .ply files in {d}")
    layers: dict = {}
    for p in files:
        layer = p.stem.rsplit("_", 1)[-1]
        if layer in layers:
            raise InvalidInputError(f"duplicate layer {layer!r} in {d}")
        layers[layer] = load_mesh(p)
    return LayeredCharacter(layers)


def cmd_metrics(cfg: JobConfig, pred_dir: str, ref_dir: str) -> int:
    pred = _load_layer_dir(pred_dir)
    ref = _load_layer_dir(ref_dir)
    report = evaluate_layers(pred, ref, cfg.metrics_config())
    out = _out_dir(cfg)
    doc = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "command": "metrics",
        **report.to_dict(),
    }
    path = out / "metrics_report.json"
    _write_json(path, doc)
    for name, row in report.rows.items():
        cells = "  ".join(f"{k}={v:.6g}" for k, v in row.items())
        print(f"{name}: {cells}")
    print(path)
    return 0


def cmd_gradcheck(cfg: JobConfig, target: str) -> int:
    rng = np.random.Generator(np.random.Philox(key=np.uint64(cfg["seed"])))
    if target == "hole":
        vol = rng.normal(0.0, 0.5, size=(4, 4, 4))
        report = finite_diff_check_hole(vol, eps=cfg["eps"])
    else:
        outer = icosphere(0.29, 1)
        inner = icosphere(0.30, 1)
        jitter = rng.normal(0.0, 0.003, size=outer.vertices.shape)
        outer = type(outer)(outer.vertices + jitter, outer.triangles)
        report = finite_diff_check_collision(outer, inner, eps=cfg["eps"])
    out = _out_dir(cfg)
    path = out / f"gradcheck_{target}.json"
    _write_json(path, report.to_dict())
    print(
        f"{report.loss_name}: max_rel_err={report.max_rel_err:.3e} "
        f"checked={report.num_checked} excluded={len(report.excluded_coords)}"
    )
    print(path)
    return 0


def cmd_resolve(cfg: JobConfig, outer_path: str, inner_path: str) -> int:
    outer = load_mesh(outer_path)
    inner = load_mesh(inner_path)
    adjusted, trace, stats = resolve_collisions(
        outer,
        inner,
        step=cfg["step"],
        max_iters=cfg["max_iters"],
        smooth_weight=cfg["smooth_weight"],
        with_stats=True,
    )
    out = _out_dir(cfg)
    src = Path(outer_path)
    mesh_path = out / f"{src.stem}_resolved{src.suffix}"
    save_mesh(adjusted, mesh_path)
    max_pen = float(penetration_depths(adjusted, inner).max()) if len(adjusted.vertices) else 0.0
    stats_doc = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "command": "resolve",
        "outer": src.name,
        "inner": Path(inner_path).name,
        "max_penetration": max_pen,
        **stats,
    }
    _write_json(out / f"{src.stem}_resolve_stats.json", stats_doc)
    print(mesh_path)
    print(
        f"{stats['iterations']} iterations, final collision {stats['final_collision']:.3e}, "
        f"max penetration {max_pen:.3e}"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    # Bad flags are configuration errors: exit 1, not argparse's default 2.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON settings file; flags override it")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="seed for every random choice (default: 0)")


def _add_scene(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", help="scene JSON file, or a demo name")
    p.add_argument("--layers", help="comma-separated layer subset (default: all)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semsurf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", parents=[], help="write the shipped demo scene files")
    _add_common(p)
    p.set_defaults(run=lambda cfg, args: cmd_demo(cfg))

    p = sub.add_parser("extract", help="extract layered meshes from a scene")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--fine", help="fine grid, e.g. 256x256x384")
    p.add_argument("--coarse", help="coarse proposal grid, e.g. 64x64x96")
    p.add_argument("--kernel", type=int, help="dilation kernel width (odd)")
    p.add_argument(
        "--no-proposal", action="store_true", help="dense evaluation, no coarse pass"
    )
    p.add_argument("--format", choices=("obj", "ply"), help="mesh format (default: obj)")
    p.set_defaults(run=lambda cfg, args: cmd_extract(cfg))

    p = sub.add_parser("render", help="render layer buffers to PNGs")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--views", type=int, help="equidistant azimuth count (default: 8)")
    p.add_argument("--elevation", type=float, help="camera elevation degrees (default: 0)")
    p.add_argument("--width", type=int, help="image width (default: 128)")
    p.add_argument("--height", type=int, help="image height (default: 128)")
    p.add_argument("--samples", type=int, help="samples per ray (default: 512)")
    p.add_argument("--half-extent", dest="half_extent", type=float, help="image half width in world units")
    p.add_argument("--near", type=float, help="near plane (default: -2.5)")
    p.add_argument("--far", type=float, help="far plane (default: 2.5)")
    p.add_argument("--buffer", help="comma-separated buffer subset (default: all)")
    p.set_defaults(run=lambda cfg, args: cmd_render(cfg))

    p = sub.add_parser("metrics", help="compare two layer-mesh directories")
    _add_common(p)
    p.add_argument("pred", help="directory of predicted layer meshes")
    p.add_argument("ref", help="directory of reference layer meshes")
    p.add_argument("--n-samples", dest="n_samples", type=int, help="surface samples per mesh")
    p.add_argument("--tau-fraction", dest="tau_fraction", type=float, help="F-score threshold fraction")
    p.add_argument("--granularity", type=float, help="voxel size fraction for IoU")
    p.set_defaults(run=lambda cfg, args: cmd_metrics(cfg, args.pred, args.ref))

    p = sub.add_parser("gradcheck", help="finite-difference check of a loss gradient")
    _add_common(p)
    p.add_argument("target", choices=("hole", "collision"))
    p.add_argument("--eps", type=float, help="finite-difference step (default: 1e-5)")
    p.set_defaults(run=lambda cfg, args: cmd_gradcheck(cfg, args.target))

    p = sub.add_parser("resolve", help="push an outer mesh out of an inner one")
    _add_common(p)
    p.add_argument("outer", help="outer mesh file (.obj or .ply)")
    p.add_argument("inner", help="inner mesh file with vertex normals")
    p.add_argument("--step", type=float, help="initial gradient step (default: 0.1)")
    p.add_argument("--max-iters", dest="max_iters", type=int, help="iteration cap (default: 500)")
    p.add_argument("--smooth-weight", dest="smooth_weight", type=float, help="Laplacian term weight")
    p.set_defaults(run=lambda cfg, args: cmd_resolve(cfg, args.outer, args.inner))

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = JobConfig.from_args(args)
        return args.run(cfg, args)
    except (ConfigError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  (CLI boundary)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
