import numpy as np
import pytest

from aocnn import synth
from aocnn.octree import build_adaptive


@pytest.fixture(scope="session")
def plane_cloud():
    """Dense jittered sample of the sheet z = 0.53 with normals (0, 0, 1)."""
    return synth.make_shape("plane", 40000, 0)


@pytest.fixture(scope="session")
def plane_tree(plane_cloud):
    return build_adaptive(*plane_cloud, 6)


@pytest.fixture(scope="session")
def small_shapes():
    """A few light shapes used by the octree and network tests."""
    return [synth.make_shape(kind, 1500, 7) for kind in ("sphere", "box", "capsule", "csg-mix")]


def sym_eigh_oracle(cov: np.ndarray):
    """Smallest eigenpair from the characteristic polynomial, solved with numpy.roots.

    Independent of the library's trigonometric solver: the cubic's coefficients are
    formed from the trace, the principal minors and the determinant, and the null
    vector comes from an SVD of (C - lambda I).
    """
    tr = np.trace(cov)
    minors = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2 + cov[0, 0] * cov[2, 2] - cov[0, 2] ** 2 + cov[1, 1] * cov[2, 2] - cov[1, 2] ** 2
    roots = np.roots([1.0, -tr, minors, -np.linalg.det(cov)]).real
    lam = roots.min()
    _, _, vt = np.linalg.svd(cov - lam * np.eye(3))
    return lam, vt[-1]
