import numpy as np
import pytest

from bodylift import make_toy_model
from bodylift.body_model import PoseState


@pytest.fixture(scope="session")
def model():
    return make_toy_model()


def random_state(model, rng, batch=(), scale=1.0, t_scale=0.1):
    from bodylift.rotations import matrix_to_rot6d
    from bodylift.sampling import sample_haar_so3

    R = sample_haar_so3(rng, size=batch if batch else None)
    return PoseState(
        r=matrix_to_rot6d(R),
        t=t_scale * rng.uniform(-1, 1, batch + (3,)),
        beta=scale * rng.standard_normal(batch + (model.shape_dim,)),
        theta=scale * rng.standard_normal(batch + (model.pose_dim,)),
    )


def rel_err(a, b, floor=1e-3):
    """Max abs difference over the larger magnitude.

    ``floor`` keeps leaves whose exact gradient is zero (e.g. a bias that a
    following normalization cancels) from dividing finite-difference
    roundoff by ~0.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor)
