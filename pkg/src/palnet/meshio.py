"""PLY / OBJ readers and a PLY writer.

Only what the pipeline needs: vertex positions and polygon faces. Polygons with
more than three corners are fan-triangulated on load.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .geometry import GeometryError, Mesh, PointCloud


class MeshFormatError(GeometryError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path) -> Mesh:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MeshFormatError(f"mesh file not found: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        vertices, faces = _read_ply(path)
    elif ext == ".obj":
        vertices, faces = _read_obj(path)
    else:
        raise MeshFormatError(f"unsupported mesh format {ext!r} (expected .ply or .obj)")
    return Mesh(vertices, faces)


def load_cloud(path) -> PointCloud:
    """Vertices of a PLY/OBJ file as a point cloud (faces, if any, are ignored)."""
    return load_mesh(path).to_cloud()


def fan_triangulate(polygon):
    return [(polygon[0], polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]


def _read_obj(path):
    vertices, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    poly = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        poly.append(i - 1 if i > 0 else len(vertices) + i)
                    if len(poly) < 3:
                        raise MeshFormatError(f"{path}:{lineno}: face with < 3 vertices")
                    faces.extend(fan_triangulate(poly))
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(f"{path}:{lineno}: malformed OBJ line") from exc
    if not vertices:
        raise MeshFormatError(f"{path}: no vertices")
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise MeshFormatError(f"{path}: missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise MeshFormatError(f"{path}: truncated header")
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_ply(path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        body = fh.read()
    try:
        if fmt == "ascii":
            data = _read_ply_ascii(body, elements)
        else:
            data = _read_ply_binary(body, elements)
    except (ValueError, IndexError, struct.error, KeyError) as exc:
        raise MeshFormatError(f"{path}: malformed PLY body ({exc})") from exc
    if "vertex" not in data:
        raise MeshFormatError(f"{path}: no vertex element")
    v = data["vertex"]
    vertices = np.stack([np.asarray(v[a], dtype=np.float64) for a in "xyz"], axis=1)
    face_el = data.get("face", {})
    polys = face_el.get("vertex_indices", face_el.get("vertex_index", []))
    if isinstance(polys, np.ndarray):
        return vertices, polys.reshape(-1, 3)
    faces = []
    for poly in polys:
        if len(poly) < 3:
            raise MeshFormatError(f"{path}: face with < 3 vertices")
        faces.extend(fan_triangulate([int(i) for i in poly]))
    return vertices, np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_ply_ascii(body, elements):
    tokens = body.split()
    pos = 0
    data = {}
    for name, count, props in elements:
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            for prop in props:
                if prop[1] == "list":
                    n = int(tokens[pos])
                    cols[prop[0]].append([float(t) for t in tokens[pos + 1:pos + 1 + n]])
                    pos += 1 + n
                else:
                    cols[prop[0]].append(float(tokens[pos]))
                    pos += 1
        data[name] = cols
    return data


def _read_ply_binary(body, elements):
    pos = 0
    data = {}
    for name, count, props in elements:
        if all(p[1] != "list" for p in props):
            dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            data[name] = {p[0]: arr[p[0]] for p in props}
            continue
        if len(props) == 1 and count:
            # fast path: every polygon a triangle
            prop = props[0]
            dt = np.dtype([("n", "<" + _PLY_TYPES[prop[2]]), ("idx", "<" + _PLY_TYPES[prop[3]], (3,))])
            if len(body) - pos >= dt.itemsize * count:
                arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                if np.all(arr["n"] == 3):
                    pos += dt.itemsize * count
                    data[name] = {prop[0]: arr["idx"].astype(np.int64)}
                    continue
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            for prop in props:
                if prop[1] == "list":
                    ct = np.dtype("<" + _PLY_TYPES[prop[2]])
                    it = np.dtype("<" + _PLY_TYPES[prop[3]])
                    n = int(np.frombuffer(body, ct, 1, pos)[0])
                    pos += ct.itemsize
                    cols[prop[0]].append(np.frombuffer(body, it, n, pos).tolist())
                    pos += it.itemsize * n
                else:
                    t = np.dtype("<" + _PLY_TYPES[prop[1]])
                    cols[prop[0]].append(np.frombuffer(body, t, 1, pos)[0])
                    pos += t.itemsize
        data[name] = cols
    return data


def save_ply(path, geometry, binary: bool = True):
    """Write a Mesh or PointCloud. Binary output is little-endian float64/int32."""
    if isinstance(geometry, Mesh):
        vertices, faces = geometry.vertices, geometry.faces
    elif isinstance(geometry, PointCloud):
        vertices, faces = geometry.points, np.zeros((0, 3), np.int64)
    else:
        vertices, faces = np.asarray(geometry, dtype=np.float64), np.zeros((0, 3), np.int64)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(vertices)}",
              "property double x", "property double y", "property double z"]
    if len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(vertices, dtype="<f8").tobytes())
            if len(faces):
                rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = faces
                fh.write(rec.tobytes())
        else:
            for v in vertices:
                fh.write((" ".join(repr(float(c)) for c in v) + "\n").encode("ascii"))
            for f in faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))
