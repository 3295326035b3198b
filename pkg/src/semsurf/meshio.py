"""Mesh file output (OBJ, binary PLY) and the matching readers.

Writers are byte-deterministic: fixed float formatting (%.17g round-trips
float64 exactly), fixed attribute order, binary PLY is little-endian with
float32 positions/normals and 8-bit colors.  OBJ vertex colors use the
common ``v x y z r g b`` extension.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .extract import Mesh, LayeredCharacter
from .field import InvalidInputError


def _fmt(x: float) -> str:
    return "%.17g" % x


def save_obj(mesh: Mesh, path: str | Path) -> None:
    path = Path(path)
    lines: list[str] = ["# semsurf mesh"]
    has_colors = mesh.colors is not None and len(mesh.colors)
    has_normals = mesh.normals is not None and len(mesh.normals)
    for i, v in enumerate(mesh.vertices):
        parts = ["v", _fmt(v[0]), _fmt(v[1]), _fmt(v[2])]
        if has_colors:
            c = mesh.colors[i]
            parts += [_fmt(c[0]), _fmt(c[1]), _fmt(c[2])]
        lines.append(" ".join(parts))
    if has_normals:
        for n in mesh.normals:
            lines.append(" ".join(["vn", _fmt(n[0]), _fmt(n[1]), _fmt(n[2])]))
    for t in mesh.triangles:
        if has_normals:
            lines.append(
                "f %d//%d %d//%d %d//%d"
                % (t[0] + 1, t[0] + 1, t[1] + 1, t[1] + 1, t[2] + 1, t[2] + 1)
            )
        else:
            lines.append("f %d %d %d" % (t[0] + 1, t[1] + 1, t[2] + 1))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def load_obj(path: str | Path) -> Mesh:
    path = Path(path)
    verts: list[list[float]] = []
    colors: list[list[float]] = []
    normals: list[list[float]] = []
    tris: list[list[int]] = []
    for line in path.read_text(encoding="ascii").splitlines():
        parts = line.split()
        if not parts or parts[0] == "#":
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(p) for p in parts[4:7]])
        elif parts[0] == "vn":
            normals.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            ids = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(ids) != 3:
                raise InvalidInputError(f"non-triangle face in {path}")
            tris.append(ids)
    return Mesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(tris, dtype=np.int64).reshape(-1, 3),
        normals=np.asarray(normals, dtype=np.float64) if normals else None,
        colors=np.asarray(colors, dtype=np.float64) if colors else None,
    )


def save_ply(mesh: Mesh, path: str | Path) -> None:
    path = Path(path)
    has_colors = mesh.colors is not None and len(mesh.colors)
    has_normals = mesh.normals is not None and len(mesh.normals)
    header = ["ply", "format binary_little_endian 1.0"]
    header.append(f"element vertex {len(mesh.vertices)}")
    header += ["property float x", "property float y", "property float z"]
    if has_normals:
        header += ["property float nx", "property float ny", "property float nz"]
    if has_colors:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append(f"element face {len(mesh.triangles)}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")
    buf = bytearray(("\n".join(header) + "\n").encode("ascii"))
    pos = mesh.vertices.astype("<f4")
    nrm = mesh.normals.astype("<f4") if has_normals else None
    col = (
        np.clip(np.rint(np.asarray(mesh.colors) * 255.0), 0, 255).astype(np.uint8)
        if has_colors
        else None
    )
    for i in range(len(mesh.vertices)):
        buf += pos[i].tobytes()
        if nrm is not None:
            buf += nrm[i].tobytes()
        if col is not None:
            buf += col[i].tobytes()
    for t in mesh.triangles:
        buf += struct.pack("<Biii", 3, int(t[0]), int(t[1]), int(t[2]))
    path.write_bytes(bytes(buf))


def load_ply(path: str | Path) -> Mesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    body = data[end:]
    if "format binary_little_endian 1.0" not in header:
        raise InvalidInputError(f"unsupported ply format in {path}")
    nvert = nface = 0
    vprops: list[str] = []
    element = None
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            element = parts[1]
            if element == "vertex":
                nvert = int(parts[2])
            elif element == "face":
                nface = int(parts[2])
        elif parts[:1] == ["property"] and element == "vertex":
            vprops.append(parts[-1])
    fields = []
    for name in vprops:
        fields.append((name, "<u1" if name in ("red", "green", "blue") else "<f4"))
    vdt = np.dtype(fields)
    varr = np.frombuffer(body, dtype=vdt, count=nvert)
    offset = nvert * vdt.itemsize
    fdt = np.dtype([("n", "<u1"), ("ids", "<i4", (3,))])
    farr = np.frombuffer(body, dtype=fdt, count=nface, offset=offset)
    if nface and not np.all(farr["n"] == 3):
        raise InvalidInputError(f"non-triangle face in {path}")
    verts = np.stack([varr[c].astype(np.float64) for c in "xyz"], axis=1)
    normals = None
    if "nx" in vprops:
        normals = np.stack([varr["n" + c].astype(np.float64) for c in "xyz"], axis=1)
    colors = None
    if "red" in vprops:
        colors = (
            np.stack([varr[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1)
            / 255.0
        )
    return Mesh(verts, farr["ids"].astype(np.int64).reshape(-1, 3), normals, colors)


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        save_obj(mesh, path)
    elif path.suffix.lower() == ".ply":
        save_ply(mesh, path)
    else:
        raise InvalidInputError(f"unsupported mesh extension: {path.suffix}")


def load_mesh(path: str | Path) -> Mesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such mesh file: {path}")
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    raise InvalidInputError(f"unsupported mesh extension: {path.suffix}")


def save_character(char: LayeredCharacter, stem: str | Path, fmt: str = "obj") -> list[Path]:
    """Write every layer as ``<stem>_<layer>.<fmt>``; returns the paths."""
    if fmt not in ("obj", "ply"):
        raise InvalidInputError(f"unsupported mesh format: {fmt}")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, mesh in char.layers.items():
        p = stem.parent / f"{stem.name}_{name}.{fmt}"
        save_mesh(mesh, p)
        paths.append(p)
    return paths
