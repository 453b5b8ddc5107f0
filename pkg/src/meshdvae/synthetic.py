"""Deterministic synthetic mesh population with a known binary class factor.

The template is a subdivided icosahedral sphere deformed into an asymmetric
base shape.  One binary factor displaces two disjoint vertex patches (the
analogue of class-specific anatomy); four global smooth deformation modes act
as continuous nuisance factors; isotropic Gaussian noise sits on top.  The
class displacement is exactly zero outside the designated region set and at
least five times the noise sigma inside it, so ground-truth difference maps
are exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .mesh import CorrespondedMesh, SimilarityTransform, TemplateConnectivity
from .meshio import load_ply, save_ply


# -- icosphere ------------------------------------------------------------------


def icosphere(subdivisions: int):
    """Unit icosphere: 12, 42, 162, 642 ... vertices."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        midpoint = {}
        verts_list = list(verts)

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)

    return verts, faces


# -- population spec --------------------------------------------------------------


@dataclass
class PopulationSpec:
    subdivisions: int = 3          # 3 -> 642 vertices
    n_subjects: int = 600
    class_ratio: float = 0.5
    class_amplitude: float = 0.40
    class_patch_radius: float = 0.90   # angular radius (radians) of each patch
    n_nuisance: int = 4
    nuisance_scale: float = 0.025
    noise_sigma: float = 0.005
    seed: int = 0

    # Anchor directions of the two class-specific patches; fixed, asymmetric.
    patch_anchors: tuple = (
        (0.9, 0.35, 0.1),
        (-0.25, -0.85, 0.45),
    )


@dataclass
class LabeledSample:
    mesh: CorrespondedMesh
    label: int
    subject_id: int
    nuisance: np.ndarray  # ground truth, test-only


def _base_shape(unit_verts):
    """Deform the unit sphere into a fixed asymmetric blob."""
    x, y, z = unit_verts.T
    radius = (1.0
              + 0.18 * np.sin(2.1 * x + 0.5) * np.cos(1.3 * y)
              + 0.12 * np.sin(1.7 * z - 0.9) * np.cos(0.8 * x + 0.3)
              + 0.07 * x * y)
    return unit_verts * radius[:, None]


def _patch_indices(unit_verts, anchor, radius):
    d = np.asarray(anchor, dtype=np.float64)
    d /= np.linalg.norm(d)
    ang = np.arccos(np.clip(unit_verts @ d, -1.0, 1.0))
    return np.flatnonzero(ang < radius), ang


def class_field(spec: PopulationSpec, unit_verts, base) -> tuple[np.ndarray, list]:
    """Radial class displacement: zero outside R, >= 5 sigma inside."""
    field_ = np.zeros_like(base)
    patches = []
    floor = 0.25
    for k, anchor in enumerate(spec.patch_anchors):
        sign = 1.0 if k % 2 == 0 else -1.0
        idx, ang = _patch_indices(unit_verts, anchor, spec.class_patch_radius)
        t = ang[idx] / spec.class_patch_radius  # 0 at center, <1 inside
        profile = floor + (1.0 - floor) * np.cos(0.5 * np.pi * t) ** 2
        field_[idx] += sign * spec.class_amplitude * profile[:, None] * unit_verts[idx]
        patches.append(np.sort(idx))
    for a in range(len(patches)):
        for b in range(a + 1, len(patches)):
            if np.intersect1d(patches[a], patches[b]).size:
                raise ValueError(
                    "class patches overlap; shrink class_patch_radius")
    min_mag = min(np.linalg.norm(field_[np.concatenate(patches)], axis=1).min(),
                  np.inf)
    if min_mag < 5.0 * spec.noise_sigma:
        raise ValueError(
            f"class displacement {min_mag:.4g} inside R is below 5x noise sigma "
            f"({5 * spec.noise_sigma:.4g})")
    return field_, patches


def nuisance_modes(spec: PopulationSpec, unit_verts) -> np.ndarray:
    """Fixed smooth global vector fields, one per nuisance factor."""
    x, y, z = unit_verts.T
    modes = []
    raw = [
        np.stack([np.sin(1.1 * y), np.cos(0.9 * z), np.sin(0.7 * x)], axis=1),
        np.stack([np.cos(1.3 * z + 0.2), np.sin(0.8 * x), np.cos(1.1 * y - 0.4)], axis=1),
        np.stack([x * z, np.sin(0.6 * y + 0.8), y * z], axis=1),
        np.stack([np.sin(0.5 * x * y), np.cos(0.7 * z), x * y], axis=1),
        np.stack([np.cos(0.4 * y - 0.1), x * x - 0.3, np.sin(1.4 * z)], axis=1),
        np.stack([y, np.sin(1.9 * x), z * x], axis=1),
    ]
    for k in range(spec.n_nuisance):
        m = raw[k % len(raw)]
        modes.append(spec.nuisance_scale * m)
    return np.stack(modes, axis=0)  # (J, N, 3)


def generate(spec: PopulationSpec, seed: Optional[int] = None):
    """Generate the labeled population.

    Returns (samples, connectivity, region_manifest) where region_manifest
    maps patch names to sorted vertex index lists.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    unit_verts, faces = icosphere(spec.subdivisions)
    conn = TemplateConnectivity(faces, len(unit_verts))
    base = _base_shape(unit_verts)
    cfield, patches = class_field(spec, unit_verts, base)
    modes = nuisance_modes(spec, unit_verts)

    n = spec.n_subjects
    n_class1 = int(round(spec.class_ratio * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_class1] = 1
    rng.shuffle(labels)

    samples = []
    for k in range(n):
        coeffs = rng.standard_normal(spec.n_nuisance)
        noise = spec.noise_sigma * rng.standard_normal(base.shape)
        coords = base + labels[k] * cfield + np.tensordot(coeffs, modes, axes=1) + noise
        samples.append(LabeledSample(
            mesh=CorrespondedMesh(coords, conn, int(labels[k])),
            label=int(labels[k]), subject_id=k, nuisance=coeffs))

    manifest = {
        "patches": [p.tolist() for p in patches],
        "all": np.sort(np.concatenate(patches)).tolist(),
    }
    return samples, conn, manifest


def pre_alignment_perturb(sample: LabeledSample, rng) -> LabeledSample:
    """Random similarity transform: exercises the Procrustes alignment step."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    scale = rng.uniform(0.8, 1.25)
    translation = rng.uniform(-10.0, 10.0, size=3)
    t = SimilarityTransform(scale=scale, rotation=q, translation=translation)
    mesh = CorrespondedMesh(t.apply(sample.mesh.coords), sample.mesh.connectivity,
                            sample.label)
    return LabeledSample(mesh, sample.label, sample.subject_id, sample.nuisance)


# -- dataset directory layout ------------------------------------------------------


def save_dataset(directory, samples, conn, region_manifest, spec=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        fname = f"mesh_{s.subject_id:05d}.ply"
        save_ply(directory / fname, s.mesh)
        rows.append([s.subject_id, s.label, fname] + [f"{c:.17g}" for c in s.nuisance])
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "file"]
                        + [f"nuisance{i}" for i in range(len(samples[0].nuisance))])
        writer.writerows(rows)
    with open(directory / "regions.json", "w") as fh:
        json.dump(region_manifest, fh, sort_keys=True)
    if spec is not None:
        with open(directory / "spec.json", "w") as fh:
            d = {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in spec.__dict__.items()}
            json.dump(d, fh, sort_keys=True, indent=2)


def load_dataset(directory):
    """Returns (coords stack (S, N, 3), labels (S,), connectivity, regions)."""
    directory = Path(directory)
    rows = []
    with open(directory / "manifest.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    meshes = []
    labels = []
    conn = None
    for row in rows:
        mesh, _ = load_ply(directory / row["file"])
        if conn is None:
            conn = mesh.connectivity
        meshes.append(mesh.coords)
        labels.append(int(row["label"]))
    with open(directory / "regions.json") as fh:
        regions = json.load(fh)
    return np.stack(meshes), np.array(labels, dtype=np.int64), conn, regions
