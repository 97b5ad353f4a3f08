"""Articulated body model: pose decoding, forward kinematics, skinning, landmarks.

Conventions
-----------
The model frame matches a camera frame for an upright subject facing the
camera: ``+x`` is the subject's left, ``+y`` points down, the subject faces
``-z``.  The pelvis (joint 0) sits at the origin in the rest pose.

Each joint ``j`` owns a rigid transform ``G_j(p) = A_j p + b_j`` acting on
rest-space points.  The local joint rotation turns about the joint's rest
position and the root is additionally composed with the global pose
``(rot6d_to_matrix(r), t)``::

    W_0 = R(r) R_0                 P_0 = R(r) J_0 + t
    W_j = W_p R_j                  P_j = P_p + W_p (J_j - J_p)
    A_j = W_j                      b_j = P_j - W_j J_j
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from bodylift.errors import FormatError, ShapeMismatch
from bodylift.rotations import (
    IDENTITY_6D,
    matrix_to_rot6d,
    rot6d_to_matrix,
    rot6d_to_matrix_vjp,
)

MODEL_FORMAT = "bodylift-model"
MODEL_VERSION = 1
# Largest mesh the file format is specified to carry.
MAX_VERTICES = 10168
MAX_FACES = 20332
MAX_WEIGHTS_PER_VERTEX = 4


@dataclass(frozen=True)
class LandmarkLayout:
    body: int = 33
    left_hand: int = 21
    right_hand: int = 21
    hip_indices: tuple[int, int] = (23, 24)
    hand_wrist: int = 0
    hand_middle_tip: int = 12

    @property
    def count(self) -> int:
        return self.body + self.left_hand + self.right_hand

    @property
    def left_hand_slice(self) -> slice:
        return slice(self.body, self.body + self.left_hand)

    @property
    def right_hand_slice(self) -> slice:
        return slice(self.body + self.left_hand, self.count)

    def to_dict(self) -> dict:
        return {
            "body": self.body,
            "left_hand": self.left_hand,
            "right_hand": self.right_hand,
            "hip_indices": list(self.hip_indices),
            "hand_wrist": self.hand_wrist,
            "hand_middle_tip": self.hand_middle_tip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkLayout":
        return cls(
            body=int(d["body"]),
            left_hand=int(d["left_hand"]),
            right_hand=int(d["right_hand"]),
            hip_indices=tuple(int(i) for i in d["hip_indices"]),
            hand_wrist=int(d.get("hand_wrist", 0)),
            hand_middle_tip=int(d.get("hand_middle_tip", 12)),
        )


@dataclass
class PoseState:
    """Generative code (r, t, beta, theta); fields may carry leading batch axes."""

    r: np.ndarray
    t: np.ndarray
    beta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.r.shape[-1] != 6 or self.t.shape[-1] != 3:
            raise ShapeMismatch(f"bad r/t shapes {self.r.shape}, {self.t.shape}")
        lead = self.r.shape[:-1]
        for name in ("t", "beta", "theta"):
            if getattr(self, name).shape[:-1] != lead:
                raise ShapeMismatch(f"inconsistent batch shape for {name}")

    @classmethod
    def identity(cls, model: "KinematicModel", batch: tuple = ()) -> "PoseState":
        return cls(
            r=np.broadcast_to(IDENTITY_6D, batch + (6,)).copy(),
            t=np.zeros(batch + (3,)),
            beta=np.zeros(batch + (model.shape_dim,)),
            theta=np.zeros(batch + (model.pose_dim,)),
        )

    @property
    def batch_shape(self) -> tuple:
        return self.r.shape[:-1]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.r, self.t, self.beta, self.theta))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.t, self.beta, self.theta], axis=-1)

    @classmethod
    def from_vector(cls, vec, shape_dim: int, pose_dim: int) -> "PoseState":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape[-1] != 9 + shape_dim + pose_dim:
            raise ShapeMismatch("state vector has wrong length")
        return cls(
            r=vec[..., :6],
            t=vec[..., 6:9],
            beta=vec[..., 9 : 9 + shape_dim],
            theta=vec[..., 9 + shape_dim :],
        )

    def __getitem__(self, idx) -> "PoseState":
        return PoseState(self.r[idx], self.t[idx], self.beta[idx], self.theta[idx])

    def copy(self) -> "PoseState":
        return PoseState(self.r.copy(), self.t.copy(), self.beta.copy(), self.theta.copy())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("r", "t", "beta", "theta")}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseState":
        return cls(d["r"], d["t"], d["beta"], d["theta"])


@dataclass(frozen=True, eq=False)
class KinematicModel:
    """Immutable body model.

    skin_weights is stored dense (N_v x J) with at most four nonzeros per row.
    shape_basis is (N_v*3) x D_beta with rows ordered (v0.x, v0.y, v0.z, v1.x, ...).
    pose_decoder is (J, 6, D_theta); a joint's local 6D rotation is
    ``IDENTITY_6D + pose_decoder[j] @ theta``.
    """

    joint_names: tuple[str, ...]
    parent: np.ndarray
    rest_joints: np.ndarray
    rest_vertices: np.ndarray
    skin_weights: np.ndarray
    shape_basis: np.ndarray
    pose_decoder: np.ndarray
    landmark_regressor: np.ndarray
    faces: np.ndarray
    layout: LandmarkLayout = field(default_factory=LandmarkLayout)

    def __post_init__(self):
        self.validate()

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def vertex_count(self) -> int:
        return len(self.rest_vertices)

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def pose_dim(self) -> int:
        return self.pose_decoder.shape[2]

    @property
    def landmark_count(self) -> int:
        return self.landmark_regressor.shape[1]

    def validate(self) -> None:
        J = len(self.joint_names)
        nv = len(self.rest_vertices)
        if self.parent.shape != (J,) or self.rest_joints.shape != (J, 3):
            raise FormatError("joint arrays disagree with joint_names")
        if self.parent[0] != -1:
            raise FormatError("joint 0 must be the root (parent -1)")
        for j in range(1, J):
            if not 0 <= self.parent[j] < j:
                raise FormatError(f"joint {j} breaks topological order")
        if self.rest_vertices.shape != (nv, 3) or self.skin_weights.shape != (nv, J):
            raise FormatError("vertex arrays have inconsistent shapes")
        if nv > MAX_VERTICES or len(self.faces) > MAX_FACES:
            raise FormatError("mesh exceeds the format capacity")
        w = self.skin_weights
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise FormatError("skin weights must be nonnegative and sum to 1")
        if np.any((w > 0).sum(axis=1) > MAX_WEIGHTS_PER_VERTEX):
            raise FormatError("more than 4 skin weights on a vertex")
        if self.shape_basis.ndim != 2 or self.shape_basis.shape[0] != 3 * nv:
            raise FormatError("shape basis must be (3*N_v) x D_beta")
        if self.pose_decoder.ndim != 3 or self.pose_decoder.shape[:2] != (J, 6):
            raise FormatError("pose decoder must be J x 6 x D_theta")
        W = self.landmark_regressor
        if W.ndim != 2 or W.shape[0] != nv:
            raise FormatError("landmark regressor must be N_v x S")
        if np.any(W < 0) or np.any(np.abs(W.sum(axis=0) - 1.0) > 1e-9):
            raise FormatError("landmark regressor columns must be convex weights")
        if W.shape[1] != self.layout.count:
            raise FormatError(f"layout expects {self.layout.count} landmarks, W has {W.shape[1]}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise FormatError("face index out of range")

    # Contracted skinning: landmark s = sum_j A_j U[s, j] + M[s, j] b_j, with
    # U linear in beta.  Exactly equal to regress_landmarks(skin_vertices(...)).
    @cached_property
    def _contraction(self):
        W, w = self.landmark_regressor, self.skin_weights
        nv = self.vertex_count
        M = W.T @ w
        U0 = np.einsum("ns,nj,nc->sjc", W, w, self.rest_vertices)
        basis = self.shape_basis.reshape(nv, 3, self.shape_dim)
        Ub = np.einsum("ns,nj,ncd->sjcd", W, w, basis)
        return M, U0, Ub

    @cached_property
    def content_hash(self) -> str:
        blob = json.dumps(model_to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def decode_pose(model: KinematicModel, theta) -> np.ndarray:
    """Latent pose (..., D_theta) -> local joint rotations (..., J, 3, 3)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != model.pose_dim:
        raise ShapeMismatch(f"theta must have {model.pose_dim} entries")
    return rot6d_to_matrix(_decoder_6d(model, theta))


def _decoder_6d(model, theta):
    return IDENTITY_6D + np.einsum("jkd,...d->...jk", model.pose_decoder, theta)


def forward_kinematics(model: KinematicModel, joint_rotations, r, t):
    """World rotations (..., J, 3, 3) and joint positions (..., J, 3)."""
    R_loc = np.asarray(joint_rotations, dtype=np.float64)
    Rr = rot6d_to_matrix(r)
    t = np.asarray(t, dtype=np.float64)
    Jr = model.rest_joints
    world_R = np.empty(R_loc.shape)
    world_P = np.empty(R_loc.shape[:-1])
    world_R[..., 0, :, :] = Rr @ R_loc[..., 0, :, :]
    world_P[..., 0, :] = Rr @ Jr[0] + t
    for j in range(1, model.joint_count):
        p = model.parent[j]
        Wp = world_R[..., p, :, :]
        world_R[..., j, :, :] = Wp @ R_loc[..., j, :, :]
        world_P[..., j, :] = world_P[..., p, :] + Wp @ (Jr[j] - Jr[p])
    return world_R, world_P


def skinning_transforms(model, world_R, world_P):
    """(A, b) with G_j(p) = A_j p + b_j for rest-space points."""
    b = world_P - np.einsum("...jab,jb->...ja", world_R, model.rest_joints)
    return world_R, b


def shaped_rest_vertices(model: KinematicModel, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    offs = np.einsum("kd,...d->...k", model.shape_basis, beta)
    return model.rest_vertices + offs.reshape(offs.shape[:-1] + (model.vertex_count, 3))


def skin_vertices(model: KinematicModel, state: PoseState) -> np.ndarray:
    """Linear blend skinning of the shaped rest mesh; returns (..., N_v, 3)."""
    R_loc = decode_pose(model, state.theta)
    world_R, world_P = forward_kinematics(model, R_loc, state.r, state.t)
    A, b = skinning_transforms(model, world_R, world_P)
    v = shaped_rest_vertices(model, state.beta)
    # per-joint rigid images of every vertex, then convex blend
    images = np.einsum("...jab,...nb->...nja", A, v) + b[..., None, :, :]
    return np.einsum("nj,...nja->...na", model.skin_weights, images)


def regress_landmarks(model: KinematicModel, vertices) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape[-2:] != (model.vertex_count, 3):
        raise ShapeMismatch("vertex array does not match the model")
    return np.einsum("ns,...na->...sa", model.landmark_regressor, vertices)


def hips_center(landmarks, layout: LandmarkLayout) -> np.ndarray:
    i, j = layout.hip_indices
    return 0.5 * (landmarks[..., i, :] + landmarks[..., j, :])


def center_at_hips(landmarks, layout: LandmarkLayout) -> np.ndarray:
    """Translate landmarks so the midpoint of the two hip landmarks is the origin."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    return landmarks - hips_center(landmarks, layout)[..., None, :]


def center_at_hips_vjp(grad, layout: LandmarkLayout) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    out = grad.copy()
    total = grad.sum(axis=-2)
    i, j = layout.hip_indices
    out[..., i, :] -= 0.5 * total
    out[..., j, :] -= 0.5 * total
    return out


class _PoseCache:
    __slots__ = ("a6", "R_loc", "Rr", "world_R", "U", "state")


def _pose_landmarks(model: KinematicModel, state: PoseState):
    M, U0, Ub = model._contraction
    c = _PoseCache()
    c.state = state
    c.a6 = _decoder_6d(model, state.theta)
    c.R_loc = rot6d_to_matrix(c.a6)
    c.Rr = rot6d_to_matrix(state.r)
    world_R, world_P = forward_kinematics(model, c.R_loc, state.r, state.t)
    c.world_R = world_R
    A, b = skinning_transforms(model, world_R, world_P)
    S, J = M.shape
    lead = state.batch_shape
    Ubf = Ub.reshape(S * J * 3, -1)
    c.U = (U0.reshape(-1) + state.beta @ Ubf.T).reshape(lead + (S, J * 3))
    # A arranged so that row j*3+b, column a holds A[j, a, b]
    A_rows = np.swapaxes(A, -1, -2).reshape(lead + (J * 3, 3))
    X = c.U @ A_rows + M @ b
    return X, c


def pose_landmarks(model: KinematicModel, state: PoseState) -> np.ndarray:
    """World-frame landmarks (..., S, 3) for a state, without building the mesh."""
    return _pose_landmarks(model, state)[0]


def _landmarks_backward(model: KinematicModel, c: _PoseCache, grad_X) -> PoseState:
    M, _, Ub = model._contraction
    Jr = model.rest_joints
    G = np.asarray(grad_X, dtype=np.float64)
    A = c.world_R

    S, J = M.shape
    lead = G.shape[:-2]
    dA = np.swapaxes(np.swapaxes(G, -1, -2) @ c.U, -1, -2).reshape(lead + (J, 3, 3))
    dA = np.swapaxes(dA, -1, -2)
    db = M.T @ G
    A_cols = np.swapaxes(A, -2, -3).reshape(lead + (3, J * 3))
    dU = G @ A_cols
    dbeta = dU.reshape(lead + (S * J * 3,)) @ Ub.reshape(S * J * 3, -1)

    dW = dA - np.einsum("...ja,jb->...jab", db, Jr)
    dP = db.copy()
    dR = np.empty_like(dW)
    for j in range(model.joint_count - 1, 0, -1):
        p = model.parent[j]
        Wp = A[..., p, :, :]
        dW[..., p, :, :] += dW[..., j, :, :] @ np.swapaxes(c.R_loc[..., j, :, :], -1, -2)
        dW[..., p, :, :] += np.einsum("...a,b->...ab", dP[..., j, :], Jr[j] - Jr[p])
        dR[..., j, :, :] = np.swapaxes(Wp, -1, -2) @ dW[..., j, :, :]
        dP[..., p, :] += dP[..., j, :]
    dRr = dW[..., 0, :, :] @ np.swapaxes(c.R_loc[..., 0, :, :], -1, -2)
    dRr = dRr + np.einsum("...a,b->...ab", dP[..., 0, :], Jr[0])
    dR[..., 0, :, :] = np.swapaxes(c.Rr, -1, -2) @ dW[..., 0, :, :]

    dr = rot6d_to_matrix_vjp(c.state.r, dRr)
    da6 = rot6d_to_matrix_vjp(c.a6, dR)
    dtheta = np.einsum("jkd,...jk->...d", model.pose_decoder, da6)
    return PoseState(r=dr, t=dP[..., 0, :], beta=dbeta, theta=dtheta)


def landmarks_vjp(model: KinematicModel, state: PoseState, grad_X):
    """Landmarks plus the pullback of ``grad_X`` (..., S, 3) onto the state.

    Returns ``(X, grad_state)`` where grad_state is a PoseState of gradients.
    """
    X, cache = _pose_landmarks(model, state)
    return X, _landmarks_backward(model, cache, grad_X)


def landmark_jacobian(model: KinematicModel, state: PoseState) -> np.ndarray:
    """Jacobian d vec(X) / d (r, t, beta, theta), shape (3S, 9 + D_beta + D_theta).

    Rows follow row-major flattening of the S x 3 landmark array; columns
    follow ``PoseState.to_vector``.
    """
    if state.batch_shape != ():
        raise ShapeMismatch("landmark_jacobian takes a single state")
    S = model.landmark_count
    n = 3 * S
    tiled = PoseState(
        np.broadcast_to(state.r, (n, 6)),
        np.broadcast_to(state.t, (n, 3)),
        np.broadcast_to(state.beta, (n, model.shape_dim)),
        np.broadcast_to(state.theta, (n, model.pose_dim)),
    )
    seeds = np.eye(n).reshape(n, S, 3)
    _, grads = landmarks_vjp(model, tiled, seeds)
    return grads.to_vector()


def model_to_dict(model: KinematicModel) -> dict:
    w = model.skin_weights
    skin = []
    for row in w:
        nz = np.nonzero(row)[0]
        skin.append([[int(j), float(row[j])] for j in nz])
    W = model.landmark_regressor
    regressor = []
    for s in range(W.shape[1]):
        nz = np.nonzero(W[:, s])[0]
        regressor.append([[int(i), float(W[i, s])] for i in nz])
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "joint_names": list(model.joint_names),
        "parent": [int(p) for p in model.parent],
        "rest_joints": model.rest_joints.tolist(),
        "rest_vertices": model.rest_vertices.tolist(),
        "skin_weights": skin,
        "shape_basis": model.shape_basis.tolist(),
        "pose_decoder": model.pose_decoder.tolist(),
        "landmark_regressor": regressor,
        "faces": model.faces.tolist(),
        "layout": model.layout.to_dict(),
    }


def model_from_dict(d: dict) -> KinematicModel:
    if d.get("format") != MODEL_FORMAT:
        raise FormatError("not a body model document")
    if d.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {d.get('version')!r}")
    try:
        rest_vertices = np.asarray(d["rest_vertices"], dtype=np.float64).reshape(-1, 3)
        names = tuple(d["joint_names"])
        nv, J = len(rest_vertices), len(names)
        if nv > MAX_VERTICES or len(d["faces"]) > MAX_FACES:
            raise FormatError("mesh exceeds the format capacity")
        skin = np.zeros((nv, J))
        for i, row in enumerate(d["skin_weights"]):
            for j, wgt in row:
                skin[i, int(j)] = wgt
        layout = LandmarkLayout.from_dict(d["layout"])
        W = np.zeros((nv, len(d["landmark_regressor"])))
        for s, col in enumerate(d["landmark_regressor"]):
            for i, wgt in col:
                W[int(i), s] = wgt
        shape_basis = np.asarray(d["shape_basis"], dtype=np.float64)
        pose_decoder = np.asarray(d["pose_decoder"], dtype=np.float64)
        return KinematicModel(
            joint_names=names,
            parent=np.asarray(d["parent"], dtype=np.int64),
            rest_joints=np.asarray(d["rest_joints"], dtype=np.float64).reshape(-1, 3),
            rest_vertices=rest_vertices,
            skin_weights=skin,
            shape_basis=shape_basis.reshape(3 * nv, -1),
            pose_decoder=pose_decoder.reshape(J, 6, -1),
            landmark_regressor=W,
            faces=np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3),
            layout=layout,
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed model document: {exc}") from exc


def save_model(model: KinematicModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True))


def load_model(path) -> KinematicModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return model_from_dict(doc)


def rigid_transform_state(state: PoseState, R, t) -> PoseState:
    """State whose landmarks are those of ``state`` mapped by x -> R x + t."""
    Rr = rot6d_to_matrix(state.r)
    return PoseState(
        r=matrix_to_rot6d(R @ Rr),
        t=state.t @ np.asarray(R).T + t,
        beta=state.beta.copy(),
        theta=state.theta.copy(),
    )


# toy model generator lives in its own module; re-exported for convenience
from bodylift.toy_model import make_toy_model  # noqa: E402
