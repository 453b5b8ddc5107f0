"""Mesh representation, graph operators, Procrustes alignment and normalization.

All meshes share one template connectivity; vertex i means the same anatomical
location in every subject, so vertex-wise statistics are well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp


class MeshError(Exception):
    pass


class CorrespondenceError(MeshError):
    pass


@dataclass(frozen=True)
class TemplateConnectivity:
    """Triangle list shared by every corresponded mesh."""

    faces: np.ndarray  # (M, 3) int
    n_vertices: int

    def __post_init__(self):
        faces = np.asarray(self.faces, dtype=np.int64)
        object.__setattr__(self, "faces", faces)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (M, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= self.n_vertices):
            raise MeshError("face index out of range")
        referenced = np.zeros(self.n_vertices, dtype=bool)
        referenced[faces.reshape(-1)] = True
        if not referenced.all():
            missing = int(np.flatnonzero(~referenced)[0])
            raise MeshError(f"vertex {missing} is not referenced by any triangle")

    def edges(self) -> np.ndarray:
        """Undirected edge set as a (E, 2) array with e[0] < e[1]."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


@dataclass
class CorrespondedMesh:
    """Ordered vertex coordinates on a shared template connectivity."""

    coords: np.ndarray  # (N, 3)
    connectivity: Optional[TemplateConnectivity] = None
    label: Optional[int] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise MeshError(f"coords must be (N, 3), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise MeshError("coords contain non-finite values")
        if self.connectivity is not None and self.coords.shape[0] != self.connectivity.n_vertices:
            raise CorrespondenceError(
                f"mesh has {self.coords.shape[0]} vertices, template expects "
                f"{self.connectivity.n_vertices}")


@dataclass
class SimilarityTransform:
    """x -> scale * R @ x + t with R a proper rotation."""

    scale: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.scale <= 0:
            raise MeshError("scale must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-8 or np.linalg.det(self.rotation) < 0:
            raise MeshError("rotation must be orthonormal with determinant +1")

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return self.scale * coords @ self.rotation.T + self.translation


# -- graph operators ----------------------------------------------------------


def normalized_laplacian(conn: TemplateConnectivity) -> sp.csr_matrix:
    """Symmetric normalized Laplacian L = I - D^{-1/2} A D^{-1/2}."""
    edges = conn.edges()
    if edges.size == 0:
        raise MeshError("connectivity has no edges")
    n = conn.n_vertices
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    if (deg == 0).any():
        raise MeshError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])} has degree zero")
    dinv = sp.diags(1.0 / np.sqrt(deg))
    lap = sp.identity(n, format="csr") - dinv @ adj @ dinv
    # Symmetrize exactly against rounding in the two-sided scaling.
    return ((lap + lap.T) * 0.5).tocsr()


def scale_laplacian(lap: sp.spmatrix, lam_max: float = 2.0) -> sp.csr_matrix:
    """Rescale so the spectrum lands in [-1, 1]: (2/lam_max) L - I.

    lam_max = 2 is a valid upper bound for the normalized Laplacian, so no
    eigensolve is needed.
    """
    n = lap.shape[0]
    return ((2.0 / lam_max) * lap - sp.identity(n, format="csr")).tocsr()


def chebyshev_stack(lt: sp.spmatrix, x: np.ndarray, order: int) -> np.ndarray:
    """Stack T_0(L~)x .. T_{K-1}(L~)x along a new leading axis.

    T_0 = x, T_1 = L~ x, T_k = 2 L~ T_{k-1} - T_{k-2}.
    """
    if order < 1:
        raise MeshError("order must be >= 1")
    x = np.asarray(x)
    if lt.shape[1] != x.shape[0]:
        raise MeshError(f"operator is {lt.shape}, signal has {x.shape[0]} rows")
    slabs = [x]
    if order > 1:
        slabs.append(lt @ x)
    for _ in range(2, order):
        slabs.append(2.0 * (lt @ slabs[-1]) - slabs[-2])
    return np.stack(slabs, axis=0)


# -- Procrustes ---------------------------------------------------------------


def procrustes_align(source: CorrespondedMesh, target: CorrespondedMesh):
    """Least-squares similarity transform taking ``source`` onto ``target``.

    Closed form: center both point sets, factor the cross-covariance by SVD
    and correct any reflection to determinant +1 (hip bones are chiral).
    Returns (transform, aligned mesh, mean per-vertex residual distance).
    """
    x = source.coords
    p = target.coords
    if x.shape != p.shape:
        raise CorrespondenceError(f"vertex counts differ: {x.shape[0]} vs {p.shape[0]}")

    xc = x.mean(axis=0)
    pc = p.mean(axis=0)
    x0 = x - xc
    p0 = p - pc
    normx = np.linalg.norm(x0)
    if normx < 1e-12 or np.linalg.norm(p0) < 1e-12:
        raise MeshError("degenerate shape: all points coincide")

    cov = x0.T @ p0
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    scale = (s @ np.diag(corr)).sum() / (normx ** 2)
    if scale <= 0:
        raise MeshError("degenerate configuration: non-positive optimal scale")
    trans = pc - scale * rot @ xc

    transform = SimilarityTransform(scale=scale, rotation=rot, translation=trans)
    aligned = transform.apply(x)
    residual = float(np.linalg.norm(aligned - p, axis=1).mean())
    mesh = CorrespondedMesh(aligned, source.connectivity, source.label)
    return transform, mesh, residual


# -- normalization ------------------------------------------------------------

STD_FLOOR = 1e-8


@dataclass
class NormalizationStats:
    """Per-coordinate mean/std computed on the training set only."""

    mean: np.ndarray  # (N, 3)
    std: np.ndarray   # (N, 3), floored strictly positive

    @classmethod
    def from_dataset(cls, coords_stack: np.ndarray) -> "NormalizationStats":
        """``coords_stack`` is (S, N, 3) over the training subjects."""
        coords_stack = np.asarray(coords_stack, dtype=np.float64)
        if coords_stack.ndim != 3 or coords_stack.shape[0] == 0:
            raise MeshError("training set must be a nonempty (S, N, 3) stack")
        mean = coords_stack.mean(axis=0)
        std = coords_stack.std(axis=0)
        std = np.maximum(std, STD_FLOOR)
        return cls(mean=mean, std=std)

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return (coords - self.mean) / self.std

    def invert(self, coords: np.ndarray) -> np.ndarray:
        return coords * self.std + self.mean

    def save(self, path):
        np.savez(path, mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        data = np.load(path)
        return cls(mean=data["mean"], std=data["std"])
