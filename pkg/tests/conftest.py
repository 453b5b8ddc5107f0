import numpy as np
import pytest

from meshdvae.hierarchy import build_sampling_hierarchy
from meshdvae.synthetic import icosphere


@pytest.fixture(scope="session")
def ico12():
    """12-vertex icosahedron (unit sphere) with its connectivity."""
    from meshdvae.mesh import TemplateConnectivity
    verts, faces = icosphere(0)
    return verts, TemplateConnectivity(faces, len(verts))


@pytest.fixture(scope="session")
def ico42():
    from meshdvae.mesh import TemplateConnectivity
    verts, faces = icosphere(1)
    return verts, TemplateConnectivity(faces, len(verts))


@pytest.fixture(scope="session")
def hier12(ico12):
    verts, conn = ico12
    return build_sampling_hierarchy(conn, verts, (2, 2))


@pytest.fixture(scope="session")
def hier42(ico42):
    verts, conn = ico42
    return build_sampling_hierarchy(conn, verts, (2, 2))
