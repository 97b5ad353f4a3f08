"""Rotation representations: continuous 6D <-> matrix, quaternions, angles.

All functions accept arbitrary leading batch dimensions.
"""
import numpy as np

from bodylift.errors import DegenerateRotation, NotARotation

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
_EPS_NORM = 1e-12


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def _gram_schmidt(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got {r.shape}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= _EPS_NORM):
        raise DegenerateRotation("first 6D column has (near) zero norm")
    b1 = a1 / n1
    u2 = a2 - _dot(b1, a2) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= _EPS_NORM):
        raise DegenerateRotation("6D columns are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return a2, n1, b1, n2, b2, b3


def rot6d_to_matrix(r):
    """Map 6D vectors (..., 6) to rotation matrices (..., 3, 3) by Gram-Schmidt.

    The two 3-vectors become the first two columns of the matrix after
    orthonormalization; the third column is their cross product.
    """
    _, _, b1, _, b2, b3 = _gram_schmidt(r)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_to_matrix_vjp(r, grad_R):
    """Pull a gradient w.r.t. the output matrices back to the 6D inputs."""
    a2, n1, b1, n2, b2, b3 = _gram_schmidt(r)
    grad_R = np.asarray(grad_R, dtype=np.float64)
    g1, g2, g3 = grad_R[..., :, 0], grad_R[..., :, 1], grad_R[..., :, 2]

    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    gu2 = (gb2 - b2 * _dot(b2, gb2)) / n2
    ga2 = gu2 - b1 * _dot(b1, gu2)
    gb1 = gb1 - (_dot(b1, a2) * gu2 + a2 * _dot(b1, gu2))
    ga1 = (gb1 - b1 * _dot(b1, gb1)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def is_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        return False
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


def matrix_to_rot6d(R, tol=1e-6):
    """First two columns of R, concatenated. Raises NotARotation for non-SO(3) input."""
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R, tol):
        raise NotARotation("input is not a proper rotation matrix")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def quaternion_to_matrix(q):
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def axis_angle_to_matrix(axis, angle):
    """Rodrigues formula for a single axis (normalized here) and angle in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R):
    """Rotation angle in [0, pi] from the trace, clamped for round-off."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def geodesic_distance(R1, R2):
    return rotation_angle(np.swapaxes(R1, -1, -2) @ R2)
