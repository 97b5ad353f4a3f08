"""Fit a body state to 2D keypoints with ordinal depth constraints.

Objective (minimized with Adam over r, t, beta, theta)::

    w_2d * reprojection + w_ord * ordinal + w_beta |beta|^2 + w_theta |theta|^2

* reprojection: confidence-weighted mean of Huber(|proj(X_s) - obs_s|)
* ordinal: sum over constraints of softplus(+-(z_A - z_B) / tau), where an
  element's depth is the mean depth of its two endpoint landmarks (a joint
  constraint uses the same landmark twice)
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bodylift.body_model import (
    KinematicModel,
    PoseState,
    center_at_hips,
    landmarks_vjp,
    pose_landmarks,
)
from bodylift.errors import (
    BehindCamera,
    DivergedError,
    EmptyConstraints,
    FormatError,
    InsufficientObservations,
)
from bodylift.metrics import mpjpe
from bodylift.rotations import IDENTITY_6D, axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix

log = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
A_CLOSER = "A_closer"
B_CLOSER = "B_closer"
# Body-topology skeleton edges (landmark index pairs) used for ordinal annotation.
SKELETON_EDGES = (
    (11, 12), (11, 13), (13, 15), (12, 14), (14, 16), (11, 23), (12, 24), (23, 24),
    (23, 25), (25, 27), (24, 26), (26, 28), (27, 31), (28, 32), (0, 11), (0, 12),
)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class OrdinalConstraint:
    """``subject`` and ``object`` are landmark index pairs (i, j); a joint is (i, i)."""

    subject: tuple[int, int]
    object: tuple[int, int]
    relation: str = A_CLOSER

    def __post_init__(self):
        if self.relation not in (A_CLOSER, B_CLOSER):
            raise ValueError(f"relation must be {A_CLOSER} or {B_CLOSER}")
        if tuple(sorted(self.subject)) == tuple(sorted(self.object)):
            raise ValueError("constraint compares an element with itself")

    def to_dict(self) -> dict:
        return {"subject": list(self.subject), "object": list(self.object), "relation": self.relation}

    @classmethod
    def from_dict(cls, d) -> "OrdinalConstraint":
        return cls(tuple(int(i) for i in d["subject"]), tuple(int(i) for i in d["object"]), d["relation"])


@dataclass(frozen=True)
class FitWeights:
    w_2d: float = 1.0
    w_ord: float = 1.0
    w_beta: float = 1e-3
    w_theta: float = 1e-3

    def __post_init__(self):
        if min(self.w_2d, self.w_ord, self.w_beta, self.w_theta) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class FitProblem:
    camera: Camera
    keypoints: np.ndarray  # (S, 2) pixels
    confidence: np.ndarray  # (S,) in [0, 1]
    constraints: list = field(default_factory=list)
    weights: FitWeights = field(default_factory=FitWeights)
    iterations: int = 300
    step_size: float = 0.02
    seed: int = 0
    restarts: int = 3
    tau: float = 0.05
    huber_delta: float = 5.0
    truth: PoseState | None = None  # debug block: known state for synthetic problems

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 2:
            raise ValueError("keypoints must be (S, 2)")
        if self.confidence.shape != (len(self.keypoints),):
            raise ValueError("need one confidence per keypoint")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("confidences must lie in [0, 1]")
        S = len(self.keypoints)
        for c in self.constraints:
            if not all(0 <= i < S for i in (*c.subject, *c.object)):
                raise ValueError(f"constraint {c} references a missing landmark")


def project(camera: Camera, points):
    """Pinhole projection of (..., 3) points to (..., 2) pixels."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCamera("point at or behind the camera plane")
    u = camera.fx * points[..., 0] / z + camera.cx
    v = camera.fy * points[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def _project_vjp(camera, points, g_uv):
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    gu, gv = g_uv[..., 0], g_uv[..., 1]
    gx = gu * camera.fx / z
    gy = gv * camera.fy / z
    gz = -(gu * camera.fx * x + gv * camera.fy * y) / (z * z)
    return np.stack([gx, gy, gz], axis=-1)


def _huber(r, delta):
    quad = r <= delta
    val = np.where(quad, 0.5 * r * r, delta * (r - 0.5 * delta))
    # d/dr of the Huber value
    dval = np.where(quad, r, delta)
    return val, dval


def reprojection_from_landmarks(problem: FitProblem, X):
    """Reprojection loss for camera-frame landmarks (..., S, 3) and its gradient."""
    uv = project(problem.camera, X)
    res = uv - problem.keypoints
    r = np.linalg.norm(res, axis=-1)
    val, dval = _huber(r, problem.huber_delta)
    conf = problem.confidence
    total = conf.sum()
    loss = (conf * val).sum(axis=-1) / total
    unit = np.where(r[..., None] > 0, res / np.where(r > 0, r, 1.0)[..., None], 0.0)
    g_uv = (conf * dval / total)[..., None] * unit
    return loss, _project_vjp(problem.camera, X, g_uv)


def reprojection_loss(problem: FitProblem, model: KinematicModel, state: PoseState):
    """Returns ``(loss, grad)`` with grad a PoseState."""
    X = pose_landmarks(model, state)
    loss, gX = reprojection_from_landmarks(problem, X)
    _, grad = landmarks_vjp(model, state, gX)
    return loss, grad


def _element_depths(constraints, depths):
    depths = np.asarray(depths, dtype=np.float64)
    sa = np.array([c.subject for c in constraints])
    ob = np.array([c.object for c in constraints])
    zA = 0.5 * (depths[..., sa[:, 0]] + depths[..., sa[:, 1]])
    zB = 0.5 * (depths[..., ob[:, 0]] + depths[..., ob[:, 1]])
    sign = np.array([1.0 if c.relation == A_CLOSER else -1.0 for c in constraints])
    return zA, zB, sign, sa, ob


def ordinal_loss(constraints, depths, tau: float = 0.05):
    """Sum of softplus ranking terms and the gradient w.r.t. landmark depths.

    For "A closer" the term is log(1 + exp((z_A - z_B) / tau)); "B closer"
    swaps the roles.  Returns (0, zeros) for an empty constraint list.
    """
    depths = np.asarray(depths, dtype=np.float64)
    if not constraints:
        return np.zeros(depths.shape[:-1]), np.zeros_like(depths)
    zA, zB, sign, sa, ob = _element_depths(constraints, depths)
    a = sign * (zA - zB) / tau
    loss = np.logaddexp(0.0, a).sum(axis=-1)
    da = 0.5 * (1.0 + np.tanh(0.5 * a))  # logistic sigmoid, overflow-safe
    g = sign * da / tau
    grad = np.zeros_like(depths)
    for k in range(len(constraints)):
        for i in sa[k]:
            grad[..., i] += 0.5 * g[..., k]
        for i in ob[k]:
            grad[..., i] -= 0.5 * g[..., k]
    return loss, grad


def depth_order_error(constraints, depths) -> float:
    """Fraction of constraints whose depths violate (or tie) the annotated order."""
    if not constraints:
        raise EmptyConstraints("depth order error needs at least one constraint")
    zA, zB, sign, _, _ = _element_depths(constraints, depths)
    ok = sign * (zB - zA) > 0
    return float(np.mean(~ok, axis=-1)) if ok.ndim == 1 else np.mean(~ok, axis=-1)


def objective(problem: FitProblem, model: KinematicModel, state: PoseState):
    """Total loss, gradient (PoseState) and the individual terms."""
    w = problem.weights
    X = pose_landmarks(model, state)
    rep, gX = reprojection_from_landmarks(problem, X)
    gX = w.w_2d * gX
    ordl, gz = ordinal_loss(problem.constraints, X[..., 2], problem.tau)
    gX[..., 2] += w.w_ord * gz
    _, grad = landmarks_vjp(model, state, gX)
    reg_b = (state.beta**2).sum(-1)
    reg_t = (state.theta**2).sum(-1)
    total = w.w_2d * rep + w.w_ord * ordl + w.w_beta * reg_b + w.w_theta * reg_t
    grad.beta += 2 * w.w_beta * state.beta
    grad.theta += 2 * w.w_theta * state.theta
    parts = {"reprojection": rep, "ordinal": ordl, "reg_beta": reg_b, "reg_theta": reg_t}
    return total, grad, parts


def initial_translation(problem: FitProblem, model: KinematicModel) -> np.ndarray:
    """Place the rest-pose body so its observed landmarks roughly cover the keypoints."""
    mask = problem.confidence > 0
    rest = pose_landmarks(model, PoseState.identity(model))[mask]
    obs = problem.keypoints[mask]
    cam = problem.camera
    c2 = obs.mean(axis=0)
    spread2 = np.sqrt(((obs - c2) ** 2).sum(axis=1).mean())
    c3 = rest.mean(axis=0)
    spread3 = np.sqrt(((rest[:, :2] - c3[:2]) ** 2).sum(axis=1).mean())
    f = 0.5 * (cam.fx + cam.fy)
    z = f * spread3 / max(spread2, 1e-9)
    centroid = np.array([(c2[0] - cam.cx) * z / cam.fx, (c2[1] - cam.cy) * z / cam.fy, z])
    return centroid - c3


def _restart_states(problem: FitProblem, model: KinematicModel, init: PoseState | None) -> PoseState:
    n = max(1, problem.restarts)
    rng = np.random.default_rng([problem.seed, 7])
    t0 = initial_translation(problem, model)
    r = np.empty((n, 6))
    t = np.empty((n, 3))
    beta = np.zeros((n, model.shape_dim))
    theta = np.zeros((n, model.pose_dim))
    for k in range(n):
        if k == 0:
            r[k], t[k] = IDENTITY_6D, t0
            if init is not None:
                r[k], t[k], beta[k], theta[k] = init.r, init.t, init.beta, init.theta
            continue
        axis = rng.standard_normal(3)
        R = axis_angle_to_matrix(axis, rng.uniform(0.2, 0.6))
        r[k] = matrix_to_rot6d(R)
        t[k] = t0
        theta[k] = 0.3 * rng.standard_normal(model.pose_dim)
    return PoseState(r, t, beta, theta)


@dataclass
class FitReport:
    total_loss: float
    reprojection_loss: float
    ordinal_loss: float | None
    reg_beta: float
    reg_theta: float
    depth_order_error_before: float | None
    depth_order_error_after: float | None
    restart_losses: list
    best_restart: int
    iterations: int
    mpjpe_to_truth_mm: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def fit(problem: FitProblem, model: KinematicModel, init: PoseState | None = None):
    """Multi-restart Adam fit; returns ``(state, FitReport)``.

    All restarts run together as one batch and the lowest final total
    loss wins.  A restart that produces a non-finite loss or pushes a
    landmark behind the camera is dropped.
    """
    if int((problem.confidence > 0).sum()) < 4:
        raise InsufficientObservations("need at least 4 observed keypoints")
    state = _restart_states(problem, model, init)
    x = state.to_vector()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    alive = np.ones(len(x), dtype=bool)
    b1, b2, eps = 0.9, 0.999, 1e-8
    db, dt = model.shape_dim, model.pose_dim

    before = None
    if problem.constraints:
        before = depth_order_error(problem.constraints, pose_landmarks(model, state)[..., 2])

    best_x = x.copy()
    best_total = np.full(len(x), np.inf)
    for it in range(1, problem.iterations + 2):
        cur = PoseState.from_vector(x, db, dt)
        try:
            total, grad, _ = objective(problem, model, cur)
        except BehindCamera:
            total, grad = _per_restart_objective(problem, model, cur, alive)
        g = grad.to_vector()
        bad = ~np.isfinite(total) | ~np.all(np.isfinite(g), axis=-1)
        alive &= ~bad
        if not alive.any():
            raise DivergedError(f"every restart diverged by iteration {it}")
        improved = alive & (total < best_total)
        best_total = np.where(improved, total, best_total)
        best_x[improved] = x[improved]
        if it > problem.iterations:
            break
        g[~alive] = 0.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = problem.step_size * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + eps)
        x = np.where(alive[:, None], x - step, x)

    # each restart reports its lowest-loss iterate, so the result never
    # scores worse than its own starting point
    final = PoseState.from_vector(best_x, db, dt)
    total, _, parts = _per_restart_eval(problem, model, final, alive)
    total = np.where(alive, total, np.inf)
    if not np.isfinite(total).any():
        raise DivergedError("no restart finished with a finite loss")
    best = int(np.argmin(total))
    best_state = final[best]
    X = pose_landmarks(model, best_state)
    after = depth_order_error(problem.constraints, X[..., 2]) if problem.constraints else None
    report = FitReport(
        total_loss=float(total[best]),
        reprojection_loss=float(parts["reprojection"][best]),
        ordinal_loss=float(parts["ordinal"][best]) if problem.constraints else None,
        reg_beta=float(parts["reg_beta"][best]),
        reg_theta=float(parts["reg_theta"][best]),
        depth_order_error_before=None if before is None else float(np.asarray(before)[best]),
        depth_order_error_after=after,
        restart_losses=[float(t) for t in total],
        best_restart=best,
        iterations=problem.iterations,
    )
    if problem.truth is not None:
        report.mpjpe_to_truth_mm = float(mpjpe(
            center_at_hips(X, model.layout),
            center_at_hips(pose_landmarks(model, problem.truth), model.layout),
        ))
    return best_state, report


def _per_restart_objective(problem, model, state, alive):
    n = len(alive)
    total = np.full(n, np.nan)
    grads = PoseState.identity(model, (n,))
    grads.r[:] = 0.0
    for k in range(n):
        if not alive[k]:
            continue
        try:
            tk, gk, _ = objective(problem, model, state[k])
        except BehindCamera:
            continue
        total[k] = tk
        grads.r[k], grads.t[k], grads.beta[k], grads.theta[k] = gk.r, gk.t, gk.beta, gk.theta
    return total, grads


def _per_restart_eval(problem, model, state, alive):
    n = len(alive)
    total = np.full(n, np.inf)
    parts = {k: np.full(n, np.nan) for k in ("reprojection", "ordinal", "reg_beta", "reg_theta")}
    for k in range(n):
        if not alive[k]:
            continue
        try:
            tk, _, pk = objective(problem, model, state[k])
        except BehindCamera:
            continue
        total[k] = tk
        for name in parts:
            parts[name][k] = pk[name]
    return total, None, parts


def constraints_from_state(model, state, rng, count=8, margin=0.1, edges=SKELETON_EDGES):
    """Annotate up to ``count`` edge pairs whose depths differ by more than ``margin`` m."""
    z = pose_landmarks(model, state)[..., 2]
    pairs = []
    for a in range(len(edges)):
        for b in range(a + 1, len(edges)):
            if set(edges[a]) & set(edges[b]):
                continue
            zA = 0.5 * (z[edges[a][0]] + z[edges[a][1]])
            zB = 0.5 * (z[edges[b][0]] + z[edges[b][1]])
            if abs(zA - zB) > margin:
                pairs.append((edges[a], edges[b], A_CLOSER if zA < zB else B_CLOSER))
    if not pairs:
        return []
    pick = rng.permutation(len(pairs))[:count]
    return [OrdinalConstraint(*pairs[i]) for i in sorted(pick)]


def mirror_twin(state: PoseState) -> PoseState:
    """Depth-reflected twin of a state about the plane z = t_z.

    For landmarks lying in the body-frame plane z = 0 the twin projects
    identically under an orthographic camera while every depth order flips.
    """
    D = np.diag([1.0, 1.0, -1.0])
    R = rot6d_to_matrix(state.r)
    return PoseState(matrix_to_rot6d(D @ R @ D), state.t.copy(), state.beta.copy(), state.theta.copy())


def make_mirror_problem(
    model: KinematicModel,
    seed: int,
    distance: float = 40.0,
    focal: float = 13333.0,
    pose_scale: float = 0.1,
    shape_scale: float = 0.0,
    tilt_range=(0.35, 0.7),
    pixel_noise: float = 1.0,
    constraint_count: int = 8,
    planar_only: bool = True,
    weights: FitWeights | None = None,
    **problem_kwargs,
) -> FitProblem:
    """A synthetic fit problem whose keypoints admit a depth-flipped twin.

    The truth is a near-planar pose (small latent pose) tilted out of the
    image plane about both image axes and viewed from far away, so the
    reflected state reprojects almost identically.  With ``planar_only``
    the landmarks that sit off the body plane at rest (face, heels, toes)
    get zero confidence.  Constraints are drawn from the truth with a 0.1 m
    certainty margin.
    """
    rng = np.random.default_rng([seed, 11])
    sx, sy = rng.choice([-1.0, 1.0], size=2)
    ax = sx * rng.uniform(*tilt_range)
    ay = sy * rng.uniform(*tilt_range)
    R = axis_angle_to_matrix([1.0, 0.0, 0.0], ax) @ axis_angle_to_matrix([0.0, 1.0, 0.0], ay)
    truth = PoseState(
        r=matrix_to_rot6d(R),
        t=np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), distance]),
        beta=shape_scale * rng.standard_normal(model.shape_dim),
        theta=pose_scale * rng.standard_normal(model.pose_dim),
    )
    camera = Camera(focal, focal, 640.0, 480.0)
    X = pose_landmarks(model, truth)
    keypoints = project(camera, X) + pixel_noise * rng.standard_normal((len(X), 2))
    constraints = constraints_from_state(model, truth, rng, count=constraint_count)
    confidence = np.ones(len(X))
    if planar_only:
        rest = pose_landmarks(model, PoseState.identity(model))
        confidence[np.abs(rest[:, 2]) > 0.02] = 0.0
    return FitProblem(
        camera=camera,
        keypoints=keypoints,
        confidence=confidence,
        constraints=constraints,
        weights=weights or FitWeights(),
        seed=seed,
        truth=truth,
        **problem_kwargs,
    )


# ---------------------------------------------------------------- file formats

PROBLEM_FORMAT = "bodylift-fit-problem"


def problem_to_dict(problem: FitProblem) -> dict:
    d = {
        "format": PROBLEM_FORMAT,
        "version": 1,
        "camera": asdict(problem.camera),
        "keypoints": problem.keypoints.tolist(),
        "confidence": problem.confidence.tolist(),
        "constraints": [c.to_dict() for c in problem.constraints],
        "weights": asdict(problem.weights),
        "iterations": problem.iterations,
        "step_size": problem.step_size,
        "seed": problem.seed,
        "restarts": problem.restarts,
        "tau": problem.tau,
        "huber_delta": problem.huber_delta,
    }
    if problem.truth is not None:
        d["debug"] = {"truth": problem.truth.to_dict()}
    return d


def problem_from_dict(d: dict) -> FitProblem:
    if d.get("format") != PROBLEM_FORMAT:
        raise FormatError("not a fit problem document")
    try:
        truth = d.get("debug", {}).get("truth")
        return FitProblem(
            camera=Camera(**d["camera"]),
            keypoints=d["keypoints"],
            confidence=d["confidence"],
            constraints=[OrdinalConstraint.from_dict(c) for c in d.get("constraints", [])],
            weights=FitWeights(**d.get("weights", {})),
            iterations=int(d.get("iterations", 300)),
            step_size=float(d.get("step_size", 0.02)),
            seed=int(d.get("seed", 0)),
            restarts=int(d.get("restarts", 3)),
            tau=float(d.get("tau", 0.05)),
            huber_delta=float(d.get("huber_delta", 5.0)),
            truth=None if truth is None else PoseState.from_dict(truth),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid fit problem: {exc}") from exc


def save_problem(problem: FitProblem, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem), indent=1))


def load_problem(path) -> FitProblem:
    """Parse a problem file; JSON syntax errors report the offending line."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return problem_from_dict(doc)


def report_to_dict(report: FitReport, state: PoseState) -> dict:
    return {"format": "bodylift-fit-report", "version": 1, "report": report.to_dict(), "state": state.to_dict()}
