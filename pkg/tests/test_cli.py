"""In-process checks of the batch front end: each test drives ``cli.main``
with a real argv list and inspects exit codes, stderr, and the files left
behind in a tmp directory."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from semsurf import scenes
from semsurf.cli import CONFIG_SCHEMA_VERSION, main
from semsurf.extract import Mesh, icosphere
from semsurf.meshio import load_mesh, save_mesh

from ._toys import flat_patch


def _run(capsys, argv):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# demo


def test_demo_writes_loadable_scene_files(tmp_path, capsys):
    code, out, err = _run(capsys, ["demo", "--out", str(tmp_path)])
    assert code == 0
    assert err == ""
    for name in ("nested-character", "two-spheres"):
        path = tmp_path / f"{name}.json"
        assert path.exists()
        assert str(path) in out
        scene, bounds = scenes.load_scene(path)
        assert scene.name == name
        assert bounds is not None


# ---------------------------------------------------------------------------
# extract


def _extract_args(out_dir, extra=()):
    return [
        "extract",
        "--scene",
        "two-spheres",
        "--fine",
        "32x32x48",
        "--coarse",
        "16x16x24",
        "--out",
        str(out_dir),
        *extra,
    ]


def test_extract_writes_meshes_and_stats(tmp_path, capsys):
    code, out, _ = _run(capsys, _extract_args(tmp_path))
    assert code == 0
    layer_files = {f"two-spheres_{layer}.obj" for layer in ("body", "cloth", "holistic")}
    for name in layer_files:
        assert (tmp_path / name).exists()
        assert name in out
    mesh = load_mesh(tmp_path / "two-spheres_body.obj")
    assert len(mesh.vertices) > 0

    stats = _read_json(tmp_path / "two-spheres_extract_stats.json")
    assert stats["schema_version"] == CONFIG_SCHEMA_VERSION
    assert stats["command"] == "extract"
    assert stats["scene"] == "two-spheres"
    assert stats["seed"] == 0
    assert stats["threads"] >= 1
    assert stats["fine"] == [32, 32, 48]
    assert stats["coarse"] == [16, 16, 24]
    assert stats["kernel"] == 3
    assert stats["mode"] == "proposal"
    assert stats["reduction_ratio"] > 1.0
    assert stats["wall_time_s"] >= 0.0
    assert set(stats["outputs"]) == layer_files
    assert "proposal:" in out


def test_extract_dense_flag_matches_proposal_bytes(tmp_path, capsys):
    code_a, _, _ = _run(capsys, _extract_args(tmp_path / "a"))
    code_b, _, _ = _run(capsys, _extract_args(tmp_path / "b", ["--no-proposal"]))
    assert code_a == 0 and code_b == 0
    for layer in ("body", "cloth", "holistic"):
        name = f"two-spheres_{layer}.obj"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    sparse = _read_json(tmp_path / "a" / "two-spheres_extract_stats.json")
    dense = _read_json(tmp_path / "b" / "two-spheres_extract_stats.json")
    assert dense["mode"] == "dense"
    assert dense["coarse"] is None
    assert dense["kernel"] is None
    assert dense["fine_evaluations"] == 32 * 32 * 48
    assert dense["reduction_ratio"] == 1.0
    assert sparse["fine_evaluations"] < dense["fine_evaluations"]


def test_extract_layer_subset(tmp_path, capsys):
    code, _, _ = _run(capsys, _extract_args(tmp_path, ["--layers", "body"]))
    assert code == 0
    assert (tmp_path / "two-spheres_body.obj").exists()
    assert not (tmp_path / "two-spheres_cloth.obj").exists()
    stats = _read_json(tmp_path / "two-spheres_extract_stats.json")
    assert stats["outputs"] == ["two-spheres_body.obj"]


def test_extract_rerun_rewrites_identical_bytes(tmp_path, capsys):
    _run(capsys, _extract_args(tmp_path / "r1"))
    _run(capsys, _extract_args(tmp_path / "r2"))
    for layer in ("body", "cloth", "holistic"):
        name = f"two-spheres_{layer}.obj"
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    # Stats docs agree on everything but the timing field.
    s1 = _read_json(tmp_path / "r1" / "two-spheres_extract_stats.json")
    s2 = _read_json(tmp_path / "r2" / "two-spheres_extract_stats.json")
    s1.pop("wall_time_s")
    s2.pop("wall_time_s")
    assert s1 == s2


# ---------------------------------------------------------------------------
# render


def _render_args(out_dir, extra=()):
    return [
        "render",
        "--scene",
        "two-spheres",
        "--views",
        "2",
        "--width",
        "9",
        "--height",
        "9",
        "--samples",
        "32",
        "--out",
        str(out_dir),
        *extra,
    ]


def test_render_writes_view_pngs(tmp_path, capsys):
    code, out, _ = _run(capsys, _render_args(tmp_path))
    assert code == 0
    pngs = sorted(p.name for p in tmp_path.glob("*.png"))
    # 2 views x 3 layers x 5 buffers.
    assert len(pngs) == 30
    for layer in ("body", "cloth", "holistic"):
        for tag in ("az000", "az180"):
            for buf in ("color", "alpha", "depth", "normal", "semantic"):
                assert f"two-spheres_{layer}_{tag}_{buf}.png" in pngs
    assert (tmp_path / pngs[0]).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    stats = _read_json(tmp_path / "two-spheres_render_stats.json")
    assert stats["command"] == "render"
    assert stats["views"] == 2
    assert stats["resolution"] == [9, 9]
    assert stats["samples_per_ray"] == 32
    assert stats["outputs"] == pngs
    assert "30 images" in out


def test_render_buffer_subset(tmp_path, capsys):
    code, _, _ = _run(capsys, _render_args(tmp_path, ["--buffer", "color"]))
    assert code == 0
    pngs = list(tmp_path.glob("*.png"))
    assert len(pngs) == 6
    assert all(p.name.endswith("_color.png") for p in pngs)


def test_render_unknown_buffer_is_config_error(tmp_path, capsys):
    code, _, err = _run(capsys, _render_args(tmp_path, ["--buffer", "albedo"]))
    assert code == 1
    assert "albedo" in err


def test_render_rerun_rewrites_identical_bytes(tmp_path, capsys):
    _run(capsys, _render_args(tmp_path / "r1", ["--buffer", "color,depth"]))
    _run(capsys, _render_args(tmp_path / "r2", ["--buffer", "color,depth"]))
    names = sorted(p.name for p in (tmp_path / "r1").glob("*.png"))
    assert len(names) == 12
    for name in names:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


# ---------------------------------------------------------------------------
# metrics


def test_metrics_self_comparison(tmp_path, capsys):
    mesh = icosphere(0.4, 1)
    for d in ("pred", "ref"):
        (tmp_path / d).mkdir()
        save_mesh(mesh, tmp_path / d / "demo_body.obj")
    out_dir = tmp_path / "out"
    code, out, _ = _run(
        capsys,
        [
            "metrics",
            str(tmp_path / "pred"),
            str(tmp_path / "ref"),
            "--n-samples",
            "2000",
            "--out",
            str(out_dir),
        ],
    )
    assert code == 0
    doc = _read_json(out_dir / "metrics_report.json")
    assert doc["command"] == "metrics"
    assert set(doc["rows"]) == {"body", "whole"}
    for row in doc["rows"].values():
        assert row["chamfer"] == 0.0
        assert row["voxel_iou"] == 1.0
        assert row["fscore"] == 1.0
    assert doc["n_samples"] == 2000
    assert doc["seed"] == 0
    assert "body:" in out and "whole:" in out


def test_metrics_missing_dir_is_config_error(tmp_path, capsys):
    code, _, err = _run(
        capsys, ["metrics", str(tmp_path / "nope"), str(tmp_path / "nope"), "--out", str(tmp_path)]
    )
    assert code == 1
    assert "nope" in err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_both_targets(tmp_path, capsys):
    code, out, _ = _run(capsys, ["gradcheck", "hole", "--out", str(tmp_path)])
    assert code == 0
    doc = _read_json(tmp_path / "gradcheck_hole.json")
    assert doc["max_rel_err"] < 1e-4
    assert doc["num_checked"] == 64
    assert doc["excluded_coords"] == []
    assert "max_rel_err" in out

    code, _, _ = _run(capsys, ["gradcheck", "collision", "--out", str(tmp_path)])
    assert code == 0
    doc = _read_json(tmp_path / "gradcheck_collision.json")
    assert doc["max_rel_err"] < 1e-4
    # An order-1 icosphere has 42 vertices, three coordinates each.
    assert doc["num_checked"] == 42 * 3
    assert doc["excluded_coords"] == []


# ---------------------------------------------------------------------------
# resolve


def test_resolve_concentric_spheres(tmp_path, capsys):
    save_mesh(icosphere(0.28, 1), tmp_path / "outer.obj")
    save_mesh(icosphere(0.30, 1), tmp_path / "inner.obj")
    out_dir = tmp_path / "out"
    code, out, _ = _run(
        capsys,
        ["resolve", str(tmp_path / "outer.obj"), str(tmp_path / "inner.obj"), "--out", str(out_dir)],
    )
    assert code == 0
    assert (out_dir / "outer_resolved.obj").exists()
    assert "outer_resolved.obj" in out
    stats = _read_json(out_dir / "outer_resolve_stats.json")
    assert stats["command"] == "resolve"
    assert stats["converged"] is True
    assert stats["iterations"] > 0
    assert stats["max_penetration"] < 1e-3


def test_resolve_divergence_is_runtime_failure(tmp_path, capsys):
    # Same setup as the library-level divergence test, driven through files.
    outer = Mesh([[0.0, 0.0, -0.05], [0.3, 0.0, -0.1], [0.0, 0.3, -0.2]], [[0, 1, 2]])
    save_mesh(outer, tmp_path / "outer.obj")
    save_mesh(flat_patch(), tmp_path / "inner.obj")
    code, _, err = _run(
        capsys,
        [
            "resolve",
            str(tmp_path / "outer.obj"),
            str(tmp_path / "inner.obj"),
            "--step",
            "1e12",
            "--smooth-weight",
            "1.0",
            "--out",
            str(tmp_path / "out"),
        ],
    )
    assert code == 2
    assert "error:" in err


# ---------------------------------------------------------------------------
# config file handling


def test_config_file_provides_settings_and_flags_win(tmp_path, capsys):
    cfg_out = tmp_path / "cfg_out"
    flag_out = tmp_path / "flag_out"
    cfg = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "scene": "two-spheres",
        "fine": "24x24x36",
        "coarse": "12x12x18",
        "seed": 7,
        "out": str(cfg_out),
    }
    cfg_path = tmp_path / "job.json"
    cfg_path.write_text(json.dumps(cfg))
    code, _, _ = _run(
        capsys, ["extract", "--config", str(cfg_path), "--out", str(flag_out)]
    )
    assert code == 0
    # The --out flag overrides the config; the config fills in everything else.
    assert not cfg_out.exists()
    stats = _read_json(flag_out / "two-spheres_extract_stats.json")
    assert stats["seed"] == 7
    assert stats["fine"] == [24, 24, 36]
    assert stats["coarse"] == [12, 12, 18]


def test_config_file_errors(tmp_path, capsys):
    cases = [
        ("{not json", "JSON"),
        (json.dumps([1, 2]), "object"),
        (json.dumps({"seed": 3}), "schema_version"),
        (json.dumps({"schema_version": 99}), "schema_version"),
        (json.dumps({"schema_version": 1, "bogus": 2}), "bogus"),
    ]
    for i, (text, needle) in enumerate(cases):
        path = tmp_path / f"cfg{i}.json"
        path.write_text(text)
        code, _, err = _run(
            capsys, ["extract", "--scene", "two-spheres", "--config", str(path)]
        )
        assert code == 1, text
        assert needle in err

    code, _, err = _run(
        capsys, ["extract", "--scene", "two-spheres", "--config", str(tmp_path / "missing.json")]
    )
    assert code == 1
    assert "not found" in err


# ---------------------------------------------------------------------------
# failure modes


def test_missing_scene_is_config_error(tmp_path, capsys):
    code, _, err = _run(capsys, ["extract", "--scene", "nope.json", "--out", str(tmp_path)])
    assert code == 1
    assert "nope.json" in err

    code, _, err = _run(capsys, ["extract", "--out", str(tmp_path)])
    assert code == 1
    assert "scene" in err


def test_bad_settings_are_config_errors(tmp_path, capsys):
    bad = [
        ["extract", "--scene", "two-spheres", "--kernel", "2"],
        ["extract", "--scene", "two-spheres", "--fine", "32x32"],
        ["extract", "--scene", "two-spheres", "--layers", "bogus"],
    ]
    for argv in bad:
        code, _, err = _run(capsys, argv + ["--out", str(tmp_path)])
        assert code == 1, argv
        assert "error:" in err


def test_unknown_flag_exits_one(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main(["extract", "--bogus"])
    assert exc_info.value.code == 1
    assert "error:" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main(["--help"])
    assert exc_info.value.code == 0
    assert "usage" in capsys.readouterr().out
