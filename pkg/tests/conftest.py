import numpy as np
import pytest

from cableplan import dynamics as dyn
from cableplan.geometry import HalfspacePolytope, RigidPose


@pytest.fixture
def triangle_params():
    return dyn.default_triangle_params()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_polytope(rng, center, spread=0.5, n_pts=10):
    """Bounded random polytope via the hull of a point cloud."""
    from scipy.spatial import ConvexHull
    pts = rng.normal(size=(n_pts, 3)) * spread + np.asarray(center, float)
    hull = ConvexHull(pts)
    eq = hull.equations                      # A y + b <= 0
    return HalfspacePolytope(eq[:, :3], -eq[:, 3])


def random_rotation(rng):
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    from cableplan.rotations import rotmat
    return rotmat(q)


def random_pose(rng, span=1.0):
    return RigidPose(random_rotation(rng), rng.uniform(-span, span, size=3))
