"""Decimation pyramid invariants: transfer matrix structure, level sizes,
round trips of the binary cache."""

import numpy as np
import pytest

from meshdvae.hierarchy import (HierarchyError, build_sampling_hierarchy,
                                load_hierarchy, qem_decimate, save_hierarchy)
from meshdvae.mesh import TemplateConnectivity
from meshdvae.synthetic import icosphere


@pytest.fixture(scope="module")
def hier162():
    verts, faces = icosphere(2)
    conn = TemplateConnectivity(faces, len(verts))
    return build_sampling_hierarchy(conn, verts, (4, 4, 4)), len(verts)


def test_level_sizes_shrink_by_the_requested_factor(hier162):
    hier, n = hier162
    assert hier.level_sizes[0] == n
    for a, b in zip(hier.level_sizes, hier.level_sizes[1:]):
        assert b == max(4, -(-a // 4))  # ceil division, floored at 4 vertices


def test_down_matrices_select_vertices(hier162):
    hier, _ = hier162
    for d in hier.downs:
        arr = d.toarray()
        assert set(np.unique(arr)) <= {0.0, 1.0}
        np.testing.assert_array_equal(arr.sum(axis=1), 1.0)  # one source each
        assert (arr.sum(axis=0) <= 1.0).all()  # no vertex kept twice


def test_up_matrices_are_barycentric(hier162):
    hier, _ = hier162
    for u in hier.ups:
        arr = u.toarray()
        np.testing.assert_allclose(arr.sum(axis=1), 1.0, atol=1e-12)
        assert (arr >= -1e-12).all()
        assert ((arr > 0).sum(axis=1) <= 3).all()


def test_down_after_up_is_identity(hier162):
    # Kept vertices interpolate to themselves, so D @ U = I exactly.
    hier, _ = hier162
    for d, u in zip(hier.downs, hier.ups):
        prod = (d @ u).toarray()
        np.testing.assert_array_equal(prod, np.eye(prod.shape[0]))


def test_scaled_laplacians_have_unit_spectral_radius(hier162):
    hier, _ = hier162
    for lt in hier.laplacians:
        w = np.linalg.eigvalsh(lt.toarray())
        assert w.min() >= -1.0 - 1e-10
        assert w.max() <= 1.0 + 1e-10


def test_factor_one_keeps_the_level(hier162):
    verts, faces = icosphere(0)
    conn = TemplateConnectivity(faces, len(verts))
    hier = build_sampling_hierarchy(conn, verts, (1,))
    assert hier.level_sizes == [12, 12]
    np.testing.assert_array_equal(hier.downs[0].toarray(), np.eye(12))
    np.testing.assert_array_equal(hier.ups[0].toarray(), np.eye(12))


def test_qem_keeps_vertex_subset_and_valid_faces():
    verts, faces = icosphere(2)
    kept, coarse_faces = qem_decimate(verts, faces, 40)
    assert len(kept) == 40
    assert len(np.unique(kept)) == 40
    assert coarse_faces.min() >= 0
    assert coarse_faces.max() < 40
    # No degenerate triangles.
    assert (coarse_faces[:, 0] != coarse_faces[:, 1]).all()
    assert (coarse_faces[:, 1] != coarse_faces[:, 2]).all()
    assert (coarse_faces[:, 0] != coarse_faces[:, 2]).all()


def test_qem_refuses_tiny_targets():
    verts, faces = icosphere(0)
    with pytest.raises(HierarchyError):
        qem_decimate(verts, faces, 3)


def test_upsampled_coarse_signal_interpolates_smoothly(hier162):
    # A linear function of the coordinates is reproduced well by barycentric
    # interpolation on a sphere-like surface.
    hier, _ = hier162
    coarse = hier.level_coords[1]
    fine = hier.level_coords[0]
    f_coarse = coarse @ np.array([1.0, -2.0, 0.5])
    f_up = hier.ups[0] @ f_coarse
    f_true = fine @ np.array([1.0, -2.0, 0.5])
    # The interpolation error is bounded by local mesh curvature.
    assert np.abs(f_up - f_true).max() < 0.3
    assert np.abs(f_up - f_true).mean() < 0.1


def test_cache_round_trip(tmp_path, hier162):
    hier, _ = hier162
    path = tmp_path / "hier.bin"
    save_hierarchy(path, hier)
    back = load_hierarchy(path)
    assert back.level_sizes == hier.level_sizes
    for a, b in zip(hier.laplacians, back.laplacians):
        assert (a != b).nnz == 0
    for a, b in zip(hier.downs, back.downs):
        assert (a != b).nnz == 0
    for a, b in zip(hier.ups, back.ups):
        assert (a != b).nnz == 0
    for a, b in zip(hier.level_coords, back.level_coords):
        np.testing.assert_array_equal(a, b)


def test_cache_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(HierarchyError, match="magic"):
        load_hierarchy(path)


def test_build_is_deterministic():
    verts, faces = icosphere(1)
    conn = TemplateConnectivity(faces, len(verts))
    h1 = build_sampling_hierarchy(conn, verts, (4,))
    h2 = build_sampling_hierarchy(conn, verts, (4,))
    assert h1.level_sizes == h2.level_sizes
    assert (h1.downs[0] != h2.downs[0]).nnz == 0
    assert (h1.ups[0] != h2.ups[0]).nnz == 0
