"""Procedural desk-scale body model.

A 20-joint skeleton (16 body joints plus a wrist and a finger stub per hand)
in a planar T-pose, wrapped in tube-shaped meshes with exactly 600 vertices.
Landmark targets follow the 33-point body topology followed by 21 points for
each hand; each landmark averages the k nearest rest vertices to its target.
"""
from __future__ import annotations

import numpy as np

from bodylift.body_model import KinematicModel, LandmarkLayout

JOINTS = [
    # name, parent, rest position (m): +x subject's left, +y down, front is -z
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, -0.15, 0.0)),
    ("chest", 1, (0.0, -0.35, 0.0)),
    ("head", 2, (0.0, -0.55, 0.0)),
    ("l_collar", 2, (0.05, -0.48, 0.0)),
    ("l_shoulder", 4, (0.18, -0.48, 0.0)),
    ("l_elbow", 5, (0.45, -0.48, 0.0)),
    ("r_collar", 2, (-0.05, -0.48, 0.0)),
    ("r_shoulder", 7, (-0.18, -0.48, 0.0)),
    ("r_elbow", 8, (-0.45, -0.48, 0.0)),
    ("l_hip", 0, (0.1, 0.05, 0.0)),
    ("l_knee", 10, (0.1, 0.48, 0.0)),
    ("l_ankle", 11, (0.1, 0.9, 0.0)),
    ("r_hip", 0, (-0.1, 0.05, 0.0)),
    ("r_knee", 13, (-0.1, 0.48, 0.0)),
    ("r_ankle", 14, (-0.1, 0.9, 0.0)),
    ("l_wrist", 6, (0.7, -0.48, 0.0)),
    ("l_fingers", 16, (0.79, -0.48, 0.0)),
    ("r_wrist", 9, (-0.7, -0.48, 0.0)),
    ("r_fingers", 18, (-0.79, -0.48, 0.0)),
]

# Left-hand template in the hand plane: (along fingers, across; +across is the pinky side).
HAND_TEMPLATE = np.array(
    [
        (0.0, 0.0),
        (0.02, -0.03), (0.04, -0.055), (0.065, -0.07), (0.085, -0.08),
        (0.09, -0.03), (0.13, -0.033), (0.155, -0.035), (0.175, -0.036),
        (0.095, -0.01), (0.14, -0.01), (0.168, -0.01), (0.19, -0.01),
        (0.09, 0.01), (0.13, 0.012), (0.155, 0.013), (0.175, 0.014),
        (0.08, 0.03), (0.11, 0.034), (0.13, 0.036), (0.148, 0.038),
    ]
)
HAND_FINGERS = [(1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12), (13, 14, 15, 16), (17, 18, 19, 20)]


def _hand_points(side: int) -> np.ndarray:
    """21 rest-pose hand points for side +1 (left) or -1 (right)."""
    wrist = np.array([0.7 * side, -0.48, 0.0])
    pts = np.zeros((21, 3))
    pts[:, 0] = wrist[0] + side * HAND_TEMPLATE[:, 0]
    pts[:, 1] = wrist[1] + HAND_TEMPLATE[:, 1]
    return pts


def _body_targets() -> np.ndarray:
    t = np.zeros((33, 3))
    t[0] = (0.0, -0.64, -0.1)
    for side, (inner, eye, outer, ear, mouth) in ((1, (1, 2, 3, 7, 9)), (-1, (4, 5, 6, 8, 10))):
        t[inner] = (0.015 * side, -0.68, -0.085)
        t[eye] = (0.035 * side, -0.68, -0.08)
        t[outer] = (0.055 * side, -0.68, -0.07)
        t[ear] = (0.09 * side, -0.66, 0.0)
        t[mouth] = (0.025 * side, -0.6, -0.085)
    for side, off in ((1, 0), (-1, 1)):
        hand = _hand_points(side)
        t[11 + off] = (0.18 * side, -0.48, 0.0)
        t[13 + off] = (0.45 * side, -0.48, 0.0)
        t[15 + off] = hand[0]
        t[17 + off] = hand[17]
        t[19 + off] = hand[5]
        t[21 + off] = hand[2]
        t[23 + off] = (0.1 * side, 0.05, 0.0)
        t[25 + off] = (0.1 * side, 0.48, 0.0)
        t[27 + off] = (0.1 * side, 0.9, 0.0)
        t[29 + off] = (0.1 * side, 0.95, 0.06)
        t[31 + off] = (0.1 * side, 0.95, -0.16)
    return t


def landmark_targets() -> np.ndarray:
    """The 75 rest-pose skeleton points that landmarks are regressed towards."""
    return np.concatenate([_body_targets(), _hand_points(1), _hand_points(-1)])


def _ring_frame(tangent):
    tangent = tangent / np.linalg.norm(tangent)
    ref = np.array([0.0, 0.0, 1.0]) if abs(tangent[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(tangent, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(tangent, u)


class _MeshBuilder:
    def __init__(self, joint_count):
        self.joint_count = joint_count
        self.verts, self.normals, self.weights, self.faces = [], [], [], []

    def tube(self, centers, radius, sides, ring_weights):
        centers = np.asarray(centers, dtype=np.float64)
        n = len(centers)
        base = len(self.verts)
        for k in range(n):
            tangent = centers[min(k + 1, n - 1)] - centers[max(k - 1, 0)]
            u, v = _ring_frame(tangent)
            w = np.zeros(self.joint_count)
            for j, wj in ring_weights[k].items():
                w[j] += wj
            for a in range(sides):
                ang = 2 * np.pi * a / sides
                normal = np.cos(ang) * u + np.sin(ang) * v
                self.verts.append(centers[k] + radius * normal)
                self.normals.append(normal)
                self.weights.append(w)
        for k in range(n - 1):
            for a in range(sides):
                i0 = base + k * sides + a
                i1 = base + k * sides + (a + 1) % sides
                j0, j1 = i0 + sides, i1 + sides
                self.faces += [(i0, i1, j1), (i0, j1, j0)]
        for k, flip in ((0, True), (n - 1, False)):
            ring = [base + k * sides + a for a in range(sides)]
            for a in range(1, sides - 1):
                tri = (ring[0], ring[a + 1], ring[a]) if flip else (ring[0], ring[a], ring[a + 1])
                self.faces.append(tri)


def _limb(builder, parents, a, b, pa, pb, rings, radius, sides=8):
    """Tube from point pa (joint a) to pb, owned by joint a, blended at both ends."""
    centers = [pa + (pb - pa) * s for s in np.linspace(0.0, 1.0, rings)]
    weights = []
    for k in range(rings):
        if k == 0 and parents[a] >= 0:
            weights.append({parents[a]: 0.5, a: 0.5})
        elif k == rings - 1 and b is not None:
            weights.append({a: 0.5, b: 0.5})
        else:
            weights.append({a: 1.0})
    builder.tube(centers, radius, sides, weights)


def make_toy_model(
    seed: int = 0,
    shape_dim: int = 8,
    pose_dim: int = 32,
    decoder_scale: float = 0.05,
    k_nearest: int = 8,
) -> KinematicModel:
    """Build the procedural model; deterministic in ``seed``.

    ``decoder_scale`` is the std of the frozen Gaussian pose-decoder entries.
    The root joint gets no decoder rows, so global orientation is controlled
    by ``r`` alone.
    """
    rng = np.random.default_rng(seed)
    names = tuple(n for n, _, _ in JOINTS)
    parents = np.array([p for _, p, _ in JOINTS], dtype=np.int64)
    rest = np.array([x for _, _, x in JOINTS], dtype=np.float64)
    J = len(JOINTS)
    mb = _MeshBuilder(J)
    P = rest

    _limb(mb, parents, 0, 1, P[0] + (0, 0.05, 0), P[1], 3, 0.13)
    _limb(mb, parents, 1, 2, P[1], P[2], 2, 0.14)
    _limb(mb, parents, 2, 3, P[2], P[3], 3, 0.13)
    _limb(mb, parents, 3, None, P[3], P[3] + (0, -0.23, 0), 4, 0.09)
    for side, collar, shoulder, elbow, wrist, fingers in ((1, 4, 5, 6, 16, 17), (-1, 7, 8, 9, 18, 19)):
        _limb(mb, parents, collar, shoulder, P[collar], P[shoulder], 2, 0.06)
        _limb(mb, parents, shoulder, elbow, P[shoulder], P[elbow], 3, 0.05)
        _limb(mb, parents, elbow, wrist, P[elbow], P[wrist], 3, 0.04)
        _limb(mb, parents, wrist, fingers, P[wrist], P[fingers], 2, 0.035, sides=4)
        hand = _hand_points(side)
        for chain in HAND_FINGERS:
            owner = wrist if chain[0] == 1 else fingers
            pts = hand[list(chain)]
            # extra ring past the tip keeps tip and last knuckle landmarks distinct
            tip_ext = pts[-1] + 0.4 * (pts[-1] - pts[-2])
            mb.tube(np.vstack([pts, tip_ext]), 0.008, 4, [{owner: 1.0}] * 5)
    for hip, knee, ankle in ((10, 11, 12), (13, 14, 15)):
        _limb(mb, parents, 0, hip, np.array([P[hip][0], -0.05, 0.0]), P[hip], 2, 0.08)
        _limb(mb, parents, hip, knee, P[hip], P[knee], 3, 0.07)
        _limb(mb, parents, knee, ankle, P[knee], P[ankle], 3, 0.05)
        _limb(mb, parents, ankle, None, P[ankle] + (0, 0.05, 0.06), P[ankle] + (0, 0.05, -0.16), 2, 0.04)

    verts = np.array(mb.verts)
    normals = np.array(mb.normals)
    weights = np.array(mb.weights)
    faces = np.array(mb.faces, dtype=np.int64)
    nv = len(verts)

    basis = np.zeros((nv, 3, shape_dim))
    if shape_dim > 0:
        basis[:, :, 0] = 0.05 * verts
    if shape_dim > 1:
        basis[:, :, 1] = 0.015 * normals
    for k in range(2, shape_dim):
        per_joint = rng.normal(scale=0.015, size=(J, 3))
        basis[:, :, k] = weights @ per_joint

    decoder = rng.normal(scale=decoder_scale, size=(J, 6, pose_dim))
    decoder[0] = 0.0

    targets = landmark_targets()
    W = np.zeros((nv, len(targets)))
    for s, target in enumerate(targets):
        d = np.linalg.norm(verts - target, axis=1)
        nearest = np.argsort(d, kind="stable")[:k_nearest]
        W[nearest, s] = 1.0 / k_nearest

    return KinematicModel(
        joint_names=names,
        parent=parents,
        rest_joints=rest,
        rest_vertices=verts,
        skin_weights=weights,
        shape_basis=basis.reshape(3 * nv, shape_dim),
        pose_decoder=decoder,
        landmark_regressor=W,
        faces=faces,
        layout=LandmarkLayout(),
    )
