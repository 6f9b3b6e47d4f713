"""Readers and writers for point clouds (PLY/CSV) and meshes (OBJ/PLY).

Only the subset of each format needed by the pipeline is supported:
little-endian binary and ASCII PLY with float32/float64 vertex properties,
plain x,y,z CSV in millimeters, and OBJ with ``v``/``f`` records. Every
reader rejects NaN/Inf coordinates.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, as_points

_PLY_DTYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "char": ("<i1", 1),
    "int8": ("<i1", 1),
    "short": ("<i2", 2),
    "ushort": ("<u2", 2),
}


class FileFormatError(ValueError):
    """Raised for malformed or unsupported geometry files."""


def write_cloud_csv(path, points) -> None:
    pts = as_points(points)
    with open(path, "w") as fh:
        for x, y, z in pts:
            fh.write(f"{x!r},{y!r},{z!r}\n")


def read_cloud_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise FileFormatError(f"{path}:{ln}: expected x,y,z")
            rows.append([float(p) for p in parts])
    if not rows:
        raise FileFormatError(f"{path}: no points")
    try:
        return as_points(np.asarray(rows))
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


def write_cloud_ply(path, points, binary: bool = True) -> None:
    pts = as_points(points)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(pts.astype("<f8").tobytes())
        else:
            fh.write("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts).encode("ascii"))


def read_cloud_ply(path) -> np.ndarray:
    verts, _ = _read_ply(path, want_faces=False)
    return verts


def write_mesh_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_mesh_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FileFormatError(f"{path}:{ln}: short vertex record")
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise FileFormatError(f"{path}:{ln}: only triangle faces supported")
                faces.append([i - 1 for i in idx])
    if not verts:
        raise FileFormatError(f"{path}: no vertices")
    try:
        return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


def write_mesh_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f8").tobytes())
            for tri in mesh.faces:
                fh.write(struct.pack("<B3i", 3, *tri))
        else:
            body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices)
            body += "".join(f"3 {a} {b} {c}\n" for a, b, c in mesh.faces)
            fh.write(body.encode("ascii"))


def read_mesh_ply(path) -> TriangleMesh:
    verts, faces = _read_ply(path, want_faces=True)
    if faces is None:
        raise FileFormatError(f"{path}: PLY file has no face element")
    return TriangleMesh(verts, faces)


def _read_ply(path, want_faces: bool):
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FileFormatError(f"{path}: not a PLY file")
    header_lines = raw[:end].decode("ascii", "replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype) or ("__list__", ...)])
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FileFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("__list__", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FileFormatError(f"{path}: unsupported PLY format {fmt!r}")

    verts = None
    faces = None
    if fmt == "ascii":
        tokens = body.decode("ascii").split("\n")
        tokens = [t for t in tokens if t.strip()]
        cursor = 0
        for name, count, props in elements:
            rows = tokens[cursor:cursor + count]
            cursor += count
            if name == "vertex":
                verts = _ascii_vertices(path, rows, props)
            elif name == "face" and want_faces:
                faces = _ascii_faces(path, rows)
    else:
        offset = 0
        for name, count, props in elements:
            if name == "vertex":
                verts, offset = _binary_vertices(path, body, offset, count, props)
            elif name == "face":
                faces, offset = _binary_faces(path, body, offset, count, props)
            else:
                raise FileFormatError(f"{path}: cannot skip binary element {name!r}")
    if verts is None:
        raise FileFormatError(f"{path}: no vertex element")
    try:
        verts = as_points(verts)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    return verts, faces


def _ascii_vertices(path, rows, props):
    names = [p[0] for p in props]
    try:
        ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    except ValueError:
        raise FileFormatError(f"{path}: vertex element lacks x/y/z") from None
    out = np.empty((len(rows), 3))
    for i, row in enumerate(rows):
        vals = row.split()
        out[i] = (float(vals[ix]), float(vals[iy]), float(vals[iz]))
    return out


def _ascii_faces(path, rows):
    faces = []
    for row in rows:
        vals = [int(v) for v in row.split()]
        if vals[0] != 3:
            raise FileFormatError(f"{path}: only triangle faces supported")
        faces.append(vals[1:4])
    return np.asarray(faces, dtype=np.int64)


def _binary_vertices(path, body, offset, count, props):
    if any(p[0] == "__list__" for p in props):
        raise FileFormatError(f"{path}: list property in vertex element")
    try:
        dtype = np.dtype([(p[0], _PLY_DTYPES[p[1]][0]) for p in props])
    except KeyError as exc:
        raise FileFormatError(f"{path}: unsupported property type {exc}") from None
    arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
    offset += dtype.itemsize * count
    for key in ("x", "y", "z"):
        if key not in arr.dtype.names:
            raise FileFormatError(f"{path}: vertex element lacks {key}")
    verts = np.stack(
        [arr["x"].astype(np.float64), arr["y"].astype(np.float64), arr["z"].astype(np.float64)],
        axis=1,
    )
    return verts, offset


def _binary_faces(path, body, offset, count, props):
    if len(props) != 1 or props[0][0] != "__list__":
        raise FileFormatError(f"{path}: unsupported face properties")
    _, count_type, index_type, _ = props[0]
    cdt, csz = _PLY_DTYPES[count_type]
    idt, isz = _PLY_DTYPES[index_type]
    faces = np.empty((count, 3), dtype=np.int64)
    for i in range(count):
        n = int(np.frombuffer(body, dtype=cdt, count=1, offset=offset)[0])
        offset += csz
        if n != 3:
            raise FileFormatError(f"{path}: only triangle faces supported")
        faces[i] = np.frombuffer(body, dtype=idt, count=3, offset=offset)
        offset += 3 * isz
    return faces, offset


_CLOUD_READERS = {".ply": read_cloud_ply, ".csv": read_cloud_csv}
_MESH_READERS = {".ply": read_mesh_ply, ".obj": read_mesh_obj}


def read_cloud(path) -> np.ndarray:
    """Read a point cloud, dispatching on extension (.ply/.csv; .obj vertices)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_mesh_obj(path).vertices
    try:
        return _CLOUD_READERS[suffix](path)
    except KeyError:
        raise FileFormatError(f"unsupported point cloud format: {path}") from None


def read_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    try:
        return _MESH_READERS[suffix](path)
    except KeyError:
        raise FileFormatError(f"unsupported mesh format: {path}") from None


def write_mesh(path, mesh: TriangleMesh) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_mesh_obj(path, mesh)
    elif suffix == ".ply":
        write_mesh_ply(path, mesh)
    else:
        raise FileFormatError(f"unsupported mesh format: {path}")


def write_cloud(path, points) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        write_cloud_csv(path, points)
    elif suffix == ".ply":
        write_cloud_ply(path, points)
    else:
        raise FileFormatError(f"unsupported point cloud format: {path}")
