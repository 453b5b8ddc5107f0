"""Mesh pooling hierarchy: quadric-error edge collapse plus transfer matrices.

Each level keeps a subset of the previous level's vertices (selected by
quadric-error-metric edge collapse), so downsampling matrices have exactly one
1 per row.  Upsampling places every removed vertex barycentrically in its
nearest retained triangle; retained vertices map to themselves.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, TemplateConnectivity, scale_laplacian

HIER_MAGIC = b"DVAEHIER"
HIER_VERSION = 1


class HierarchyError(MeshError):
    pass


# -- quadric-error-metric decimation -------------------------------------------


def _face_quadrics(coords, faces):
    v0, v1, v2 = coords[faces[:, 0]], coords[faces[:, 1]], coords[faces[:, 2]]
    normal = np.cross(v1 - v0, v2 - v0)
    norm = np.linalg.norm(normal, axis=1, keepdims=True)
    norm[norm < 1e-30] = 1.0
    normal = normal / norm
    d = -(normal * v0).sum(axis=1)
    plane = np.concatenate([normal, d[:, None]], axis=1)  # (M, 4)
    return plane[:, :, None] * plane[:, None, :]  # (M, 4, 4)


def _vertex_cost(quadric, pos):
    h = np.array([pos[0], pos[1], pos[2], 1.0])
    return float(h @ quadric @ h)


def qem_decimate(coords: np.ndarray, faces: np.ndarray, target: int):
    """Collapse edges until ``target`` vertices remain.

    Each collapse removes one endpoint and keeps the other at its original
    position (vertex selection, so pooling stays a 0/1 matrix).  Returns
    (kept_original_indices, coarse_faces) with faces reindexed to the kept set.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if target < 4:
        raise HierarchyError("refusing to decimate below 4 vertices")
    if target >= n:
        return np.arange(n), np.asarray(faces, dtype=np.int64).copy()

    quadrics = np.zeros((n, 4, 4))
    fq = _face_quadrics(coords, np.asarray(faces, dtype=np.int64))
    for k, f in enumerate(faces):
        for v in f:
            quadrics[v] += fq[k]

    face_set = {tuple(sorted(map(int, f))) for f in faces}
    adjacency = [set() for _ in range(n)]
    for f in faces:
        a, b, c = map(int, f)
        adjacency[a].update((b, c))
        adjacency[b].update((a, c))
        adjacency[c].update((a, b))

    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    merged_into = np.arange(n)
    heap = []

    def push_edges(u):
        for v in adjacency[u]:
            q = quadrics[u] + quadrics[v]
            # Keep u, remove v / keep v, remove u — push both directions.
            heapq.heappush(heap, (_vertex_cost(q, coords[u]), version[u], version[v], u, v))
            heapq.heappush(heap, (_vertex_cost(q, coords[v]), version[v], version[u], v, u))

    for u in range(n):
        for v in adjacency[u]:
            if v > u:
                q = quadrics[u] + quadrics[v]
                heapq.heappush(heap, (_vertex_cost(q, coords[u]), version[u], version[v], u, v))
                heapq.heappush(heap, (_vertex_cost(q, coords[v]), version[v], version[u], v, u))

    remaining = n
    while remaining > target and heap:
        cost, ver_u, ver_v, keep, drop = heapq.heappop(heap)
        if not (alive[keep] and alive[drop]):
            continue
        if ver_u != version[keep] or ver_v != version[drop]:
            continue
        if drop not in adjacency[keep]:
            continue

        alive[drop] = False
        merged_into[drop] = keep
        remaining -= 1
        quadrics[keep] += quadrics[drop]

        # Rewire drop's neighbourhood onto keep.
        for w in list(adjacency[drop]):
            adjacency[w].discard(drop)
            if w != keep:
                adjacency[w].add(keep)
                adjacency[keep].add(w)
        adjacency[keep].discard(drop)
        adjacency[drop].clear()

        version[keep] += 1
        push_edges(keep)

    if remaining > target:
        raise HierarchyError("edge collapse exhausted before reaching target size")

    kept = np.flatnonzero(alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(len(kept))

    def representative(v):
        while merged_into[v] != v:
            merged_into[v] = merged_into[merged_into[v]]
            v = merged_into[v]
        return v

    coarse_faces = set()
    for f in faces:
        g = tuple(remap[representative(int(v))] for v in f)
        if len(set(g)) == 3:
            coarse_faces.add(tuple(sorted(g)))
    if not coarse_faces:
        raise HierarchyError("decimation destroyed all faces")
    coarse_faces = np.array(sorted(coarse_faces), dtype=np.int64)
    return kept, coarse_faces


# -- transfer matrices ----------------------------------------------------------


def _closest_point_barycentric(p, a, b, c):
    """Barycentric weights of the closest point to p on triangle abc."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 <= d1 and d3 <= 0:
        v = d1 / (d1 - d3)
        return np.array([1.0 - v, v, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 <= d2 and d6 <= 0:
        w = d2 / (d2 - d6)
        return np.array([1.0 - w, 0.0, w])
    va = d3 * d6 - d5 * d4
    if va <= 0 and d4 - d3 >= 0 and d5 - d6 >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.array([0.0, 1.0 - w, w])
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return np.array([1.0 - v - w, v, w])


def _barycentric_point(p, coarse_coords, coarse_faces):
    best = None
    best_dist = np.inf
    # Prune with vertex distances: only try triangles touching the few nearest vertices.
    d2 = ((coarse_coords - p) ** 2).sum(axis=1)
    near = np.argsort(d2)[:8]
    mask = np.isin(coarse_faces, near).any(axis=1)
    candidates = coarse_faces[mask] if mask.any() else coarse_faces
    for f in candidates:
        a, b, c = coarse_coords[f[0]], coarse_coords[f[1]], coarse_coords[f[2]]
        w = _closest_point_barycentric(p, a, b, c)
        q = w[0] * a + w[1] * b + w[2] * c
        dist = ((p - q) ** 2).sum()
        if dist < best_dist:
            best_dist = dist
            best = (f, w)
    return best


def _laplacian_from_edges(edges, coords):
    n = len(coords)
    deg = np.zeros(n)
    if len(edges):
        np.add.at(deg, edges[:, 0], 1)
        np.add.at(deg, edges[:, 1], 1)
    # A vertex can end up isolated after aggressive collapse; tether it to its
    # nearest neighbour so the normalized Laplacian stays well defined.
    extra = []
    for v in np.flatnonzero(deg == 0):
        d2 = ((coords - coords[v]) ** 2).sum(axis=1)
        d2[v] = np.inf
        w = int(np.argmin(d2))
        extra.append((min(v, w), max(v, w)))
        deg[v] += 1
        deg[w] += 1
    if extra:
        edges = np.concatenate([edges.reshape(-1, 2), np.array(extra)], axis=0)
        edges = np.unique(np.sort(edges, axis=1), axis=0)
    return _lap(edges, n)


def _lap(edges, n):
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    dinv = sp.diags(1.0 / np.sqrt(deg))
    lap = sp.identity(n, format="csr") - dinv @ adj @ dinv
    return ((lap + lap.T) * 0.5).tocsr()


def _edges_of(faces, n):
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass
class SamplingHierarchy:
    """Per-level scaled Laplacians plus down/up sparse transfer matrices."""

    level_sizes: list          # [N_0 .. N_R]
    laplacians: list           # scaled Laplacians, one per level
    downs: list                # D_l: (N_{l+1}, N_l), one per transition
    ups: list                  # U_l: (N_l, N_{l+1}), one per transition
    level_coords: list         # template-space coordinates per level
    level_faces: list          # triangle arrays per level

    @property
    def n_levels(self):
        return len(self.level_sizes)


def build_sampling_hierarchy(conn: TemplateConnectivity, coords: np.ndarray,
                             level_factors) -> SamplingHierarchy:
    """Build the pooling pyramid for a template mesh.

    ``level_factors`` are per-transition decimation ratios; factor 1 keeps the
    level unchanged (identity transfer matrices).
    """
    coords = np.asarray(coords, dtype=np.float64)
    faces = np.asarray(conn.faces, dtype=np.int64)
    n0 = conn.n_vertices

    edges0 = _edges_of(faces, n0)
    sizes = [n0]
    laps = [scale_laplacian(_laplacian_from_edges(edges0, coords))]
    downs, ups = [], []
    level_coords = [coords]
    level_faces = [faces]

    cur_coords, cur_faces = coords, faces
    for factor in level_factors:
        if factor < 1:
            raise HierarchyError("level factors must be positive integers")
        n_cur = len(cur_coords)
        if factor == 1:
            kept = np.arange(n_cur)
            next_faces = cur_faces
        else:
            target = max(4, int(np.ceil(n_cur / factor)))
            kept, next_faces = qem_decimate(cur_coords, cur_faces, target)
        n_next = len(kept)
        next_coords = cur_coords[kept]

        down = sp.csr_matrix(
            (np.ones(n_next), (np.arange(n_next), kept)), shape=(n_next, n_cur))

        rows, cols, vals = [], [], []
        kept_pos = {int(orig): j for j, orig in enumerate(kept)}
        removed = np.setdiff1d(np.arange(n_cur), kept)
        for orig, j in kept_pos.items():
            rows.append(orig)
            cols.append(j)
            vals.append(1.0)
        for v in removed:
            if len(next_faces):
                f, w = _barycentric_point(cur_coords[v], next_coords, next_faces)
                for corner, weight in zip(f, w):
                    if weight > 0:
                        rows.append(v)
                        cols.append(int(corner))
                        vals.append(float(weight))
            else:
                d2 = ((next_coords - cur_coords[v]) ** 2).sum(axis=1)
                rows.append(v)
                cols.append(int(np.argmin(d2)))
                vals.append(1.0)
        up = sp.csr_matrix((vals, (rows, cols)), shape=(n_cur, n_next))

        downs.append(down)
        ups.append(up)
        sizes.append(n_next)
        level_coords.append(next_coords)
        level_faces.append(next_faces)
        laps.append(scale_laplacian(
            _laplacian_from_edges(_edges_of(next_faces, n_next), next_coords)))
        cur_coords, cur_faces = next_coords, next_faces

    return SamplingHierarchy(sizes, laps, downs, ups, level_coords, level_faces)


# -- cache serialization --------------------------------------------------------


def _write_sparse(fh, mat):
    coo = mat.tocoo()
    fh.write(struct.pack("<qqq", coo.shape[0], coo.shape[1], coo.nnz))
    fh.write(np.asarray(coo.row, dtype="<i8").tobytes())
    fh.write(np.asarray(coo.col, dtype="<i8").tobytes())
    fh.write(np.asarray(coo.data, dtype="<f8").tobytes())


def _read_sparse(fh):
    nrow, ncol, nnz = struct.unpack("<qqq", fh.read(24))
    row = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
    col = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
    data = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
    return sp.csr_matrix((data, (row, col)), shape=(nrow, ncol))


def save_hierarchy(path, hier: SamplingHierarchy):
    with open(path, "wb") as fh:
        fh.write(HIER_MAGIC)
        fh.write(struct.pack("<B", HIER_VERSION))
        fh.write(struct.pack("<q", hier.n_levels))
        for s in hier.level_sizes:
            fh.write(struct.pack("<q", s))
        for lap in hier.laplacians:
            _write_sparse(fh, lap)
        for mats in (hier.downs, hier.ups):
            for m in mats:
                _write_sparse(fh, m)
        for coords in hier.level_coords:
            fh.write(np.ascontiguousarray(coords, dtype="<f8").tobytes())
        for faces in hier.level_faces:
            fh.write(struct.pack("<q", len(faces)))
            fh.write(np.ascontiguousarray(faces, dtype="<i8").tobytes())


def load_hierarchy(path) -> SamplingHierarchy:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != HIER_MAGIC:
            raise HierarchyError(f"bad magic {magic!r}, expected {HIER_MAGIC!r}")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != HIER_VERSION:
            raise HierarchyError(f"hierarchy format version {version} != {HIER_VERSION}")
        (n_levels,) = struct.unpack("<q", fh.read(8))
        sizes = [struct.unpack("<q", fh.read(8))[0] for _ in range(n_levels)]
        laps = [_read_sparse(fh) for _ in range(n_levels)]
        downs = [_read_sparse(fh) for _ in range(n_levels - 1)]
        ups = [_read_sparse(fh) for _ in range(n_levels - 1)]
        level_coords = [
            np.frombuffer(fh.read(24 * s), dtype="<f8").reshape(s, 3) for s in sizes]
        level_faces = []
        for _ in range(n_levels):
            (m,) = struct.unpack("<q", fh.read(8))
            level_faces.append(
                np.frombuffer(fh.read(24 * m), dtype="<i8").reshape(m, 3))
    return SamplingHierarchy(sizes, laps, downs, ups, level_coords, level_faces)
