"""OBJ / PLY readers and writers for corresponded meshes.

OBJ is ASCII with coordinates printed to 6 decimals; PLY is binary
little-endian, vertices then faces, with an optional per-vertex float
"quality" property used to export saliency and distance maps for viewer
colorization.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import CorrespondedMesh, CorrespondenceError, TemplateConnectivity


class ParseError(Exception):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _build_mesh(path, verts, faces, template=None):
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise ParseError(path, 0, "face index out of range")
    if template is not None:
        if len(verts) != template.n_vertices:
            raise CorrespondenceError(
                f"{path}: mesh has {len(verts)} vertices, template expects "
                f"{template.n_vertices}")
        conn = template
    else:
        conn = TemplateConnectivity(faces, len(verts)) if faces.size else None
    return CorrespondedMesh(verts, conn)


# -- OBJ ----------------------------------------------------------------------


def load_obj(path, template=None) -> CorrespondedMesh:
    verts = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError(path, lineno, "vertex line needs 3 coordinates")
                try:
                    verts.append([float(v) for v in parts[1:4]])
                except ValueError:
                    raise ParseError(path, lineno, f"bad vertex coordinate in {line!r}")
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ParseError(path, lineno, "only triangular faces are supported")
                try:
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                except ValueError:
                    raise ParseError(path, lineno, f"bad face index in {line!r}")
                if any(i < 0 or i >= len(verts) for i in idx):
                    raise ParseError(path, lineno, "face index out of range")
                faces.append(idx)
    if not verts:
        raise ParseError(path, 0, "no vertices found")
    return _build_mesh(path, verts, faces, template)


def save_obj(path, mesh: CorrespondedMesh):
    with open(path, "w") as fh:
        for v in mesh.coords:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        if mesh.connectivity is not None:
            for f in mesh.connectivity.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# -- PLY (binary little-endian) -----------------------------------------------


def save_ply(path, mesh: CorrespondedMesh, quality: np.ndarray | None = None):
    n = len(mesh.coords)
    faces = mesh.connectivity.faces if mesh.connectivity is not None else np.zeros((0, 3), np.int64)
    with open(path, "wb") as fh:
        header = ["ply", "format binary_little_endian 1.0",
                  f"element vertex {n}",
                  "property double x", "property double y", "property double z"]
        if quality is not None:
            header.append("property double quality")
        header += [f"element face {len(faces)}",
                   "property list uchar int vertex_indices", "end_header"]
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if quality is not None:
            block = np.concatenate(
                [mesh.coords, np.asarray(quality, np.float64).reshape(-1, 1)], axis=1)
        else:
            block = mesh.coords
        fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
        for f in faces:
            fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))


def load_ply(path, template=None):
    """Returns (mesh, quality or None)."""
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ParseError(path, 1, "missing 'ply' magic")
        n_vert = n_face = 0
        vert_props = []
        lineno = 1
        element = None
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise ParseError(path, lineno, "unexpected end of header")
            line = raw.strip().decode("ascii", errors="replace")
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format":
                if parts[1] != "binary_little_endian":
                    raise ParseError(path, lineno, f"unsupported format {parts[1]}")
            elif parts[0] == "element":
                element = parts[1]
                if parts[1] == "vertex":
                    n_vert = int(parts[2])
                elif parts[1] == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property" and element == "vertex":
                if parts[1] != "double":
                    raise ParseError(path, lineno, "only double vertex properties supported")
                vert_props.append(parts[2])

        n_props = len(vert_props)
        data = np.frombuffer(fh.read(8 * n_props * n_vert), dtype="<f8")
        if data.size != n_props * n_vert:
            raise ParseError(path, lineno, "truncated vertex block")
        data = data.reshape(n_vert, n_props)
        verts = data[:, :3]
        quality = data[:, 3] if "quality" in vert_props else None
        faces = []
        for _ in range(n_face):
            head = fh.read(1)
            if len(head) != 1:
                raise ParseError(path, lineno, "truncated face block")
            count = head[0]
            if count != 3:
                raise ParseError(path, lineno, f"non-triangular face with {count} vertices")
            faces.append(struct.unpack("<iii", fh.read(12)))
    mesh = _build_mesh(path, verts, faces, template)
    return mesh, quality


# -- dispatch -----------------------------------------------------------------


def load_mesh(path, template=None) -> CorrespondedMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path, template)
    if path.suffix.lower() == ".ply":
        return load_ply(path, template)[0]
    raise ValueError(f"unsupported mesh format: {path.suffix}")


def save_mesh(path, mesh: CorrespondedMesh, quality=None):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        if quality is not None:
            raise ValueError("per-vertex quality export requires PLY")
        save_obj(path, mesh)
    elif path.suffix.lower() == ".ply":
        save_ply(path, mesh, quality)
    else:
        raise ValueError(f"unsupported mesh format: {path.suffix}")
