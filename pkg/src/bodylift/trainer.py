"""Lifter loss, Adam, and the training / evaluation loop."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bodylift.body_model import (
    KinematicModel,
    PoseState,
    center_at_hips,
    center_at_hips_vjp,
    landmarks_vjp,
    pose_landmarks,
)
from bodylift.errors import DivergedError, FormatError
from bodylift.metrics import mpjpe, mpjpe_pa
from bodylift.mixer import (
    MixerConfig,
    init_params,
    mixer_backward,
    mixer_forward,
    save_checkpoint,
    zeros_like_params,
)
from bodylift.rotations import geodesic_distance, rot6d_to_matrix, rot6d_to_matrix_vjp
from bodylift.sampling import Dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "train_loss", "eval_mpjpe_mm", "eval_mpjpe_pa_mm", "rot_err_deg", "t_err_mm")


@dataclass(frozen=True)
class LossWeights:
    rot: float = 1.0
    trans: float = 1.0
    beta: float = 0.1
    theta: float = 0.1
    landmarks: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 10000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 500
    seed: int = 0
    warmup_steps: int = 0
    lr_schedule: str = "cosine"  # or "constant"; cosine decays to zero at the last step
    holdout_fraction: float = 0.1
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive, steps >= 0")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning rate and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def lifter_loss(
    model: KinematicModel,
    pred: PoseState,
    target: PoseState,
    weights: LossWeights = LossWeights(),
    target_landmarks=None,
):
    """Batch-mean lifter loss and its gradient w.r.t. the predicted state.

    Per example::

        w_r * angle(R_pred, R_tgt)^2 + w_t |dt|^2 + w_b |dbeta|^2
        + w_th |dtheta|^2 + w_X * MPJPE(pred, tgt)^2

    with MPJPE over hip-centered landmarks in meters.  ``target_landmarks``
    may supply the hip-centered target landmarks when already known.
    """
    batched = pred.batch_shape != ()
    if not batched:
        pred, target = pred[None], target[None]
    B = pred.batch_shape[0]

    Rp = rot6d_to_matrix(pred.r)
    Rt = rot6d_to_matrix(target.r)
    c = (np.trace(np.swapaxes(Rp, -1, -2) @ Rt, axis1=-2, axis2=-1) - 1.0) / 2.0
    c = np.clip(c, -1.0, 1.0)
    ang = np.arccos(c)
    sin = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    # d(ang^2)/dc = -2 ang / sin(ang), which tends to -2 as ang -> 0
    ratio = np.where(ang < 1e-6, 1.0, ang / np.maximum(sin, 1e-12))
    dRp = (-2.0 * ratio)[:, None, None] * Rt / 2.0
    g_r = weights.rot * rot6d_to_matrix_vjp(pred.r, dRp)

    dt = pred.t - target.t
    db = pred.beta - target.beta
    dth = pred.theta - target.theta
    per = (
        weights.rot * ang**2
        + weights.trans * (dt * dt).sum(-1)
        + weights.beta * (db * db).sum(-1)
        + weights.theta * (dth * dth).sum(-1)
    )
    grad = PoseState(g_r, 2 * weights.trans * dt, 2 * weights.beta * db, 2 * weights.theta * dth)

    if weights.landmarks:
        layout = model.layout
        if target_landmarks is None:
            Xt = center_at_hips(pose_landmarks(model, target), layout)
        else:
            Xt = np.asarray(target_landmarks, dtype=np.float64).reshape(B, -1, 3)
        Xp_world, cache_fn = _landmarks_with_pullback(model, pred)
        diff = center_at_hips(Xp_world, layout) - Xt
        dist = np.linalg.norm(diff, axis=-1)
        err = dist.mean(axis=-1)
        per = per + weights.landmarks * err**2
        S = dist.shape[-1]
        unit = np.where(dist[..., None] > 0, diff / np.where(dist > 0, dist, 1.0)[..., None], 0.0)
        gX = (2.0 * weights.landmarks * err / S)[:, None, None] * unit
        gstate = cache_fn(center_at_hips_vjp(gX, layout))
        grad = PoseState(
            grad.r + gstate.r, grad.t + gstate.t, grad.beta + gstate.beta, grad.theta + gstate.theta
        )

    loss = per.mean()
    grad = PoseState(grad.r / B, grad.t / B, grad.beta / B, grad.theta / B)
    if not batched:
        grad = grad[0]
    return float(loss), grad


def _landmarks_with_pullback(model, state):
    from bodylift.body_model import _landmarks_backward, _pose_landmarks

    X, cache = _pose_landmarks(model, state)
    return X, lambda g: _landmarks_backward(model, cache, g)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(zeros_like_params(params), zeros_like_params(params), 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new (params, state)."""
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step)


def predict(params: dict, config: MixerConfig, inputs, chunk: int = 512, dtype=np.float64) -> PoseState:
    p = params if dtype == np.float64 else {k: v.astype(dtype) for k, v in params.items()}
    parts = [mixer_forward(p, inputs[i : i + chunk], config)[0] for i in range(0, len(inputs), chunk)]
    return PoseState(*(np.concatenate([getattr(s, k) for s in parts]) for k in ("r", "t", "beta", "theta")))


def evaluate_predictions(model: KinematicModel, pred: PoseState, target: PoseState) -> dict:
    """MPJPE / MPJPE-PA (mm, hip-centered) and per-group parameter errors."""
    layout = model.layout
    Xp = center_at_hips(pose_landmarks(model, pred), layout)
    Xt = center_at_hips(pose_landmarks(model, target), layout)
    rot = np.degrees(geodesic_distance(rot6d_to_matrix(pred.r), rot6d_to_matrix(target.r)))
    return {
        "count": int(len(Xp)),
        "mpjpe_mm": float(np.mean(mpjpe(Xp, Xt))),
        "mpjpe_pa_mm": float(np.mean(mpjpe_pa(Xp, Xt))),
        "rot_err_deg": float(np.mean(rot)),
        "t_err_mm": float(1000.0 * np.mean(np.linalg.norm(pred.t - target.t, axis=-1))),
        "beta_rmse": float(np.sqrt(np.mean((pred.beta - target.beta) ** 2))),
        "theta_rmse": float(np.sqrt(np.mean((pred.theta - target.theta) ** 2))),
    }


def evaluate(model: KinematicModel, params: dict, config: MixerConfig, dataset: Dataset, dtype=np.float64) -> dict:
    pred = predict(params, config, dataset.inputs, dtype=dtype)
    return evaluate_predictions(model, pred, dataset.targets)


def check_compatible(model: KinematicModel, config: MixerConfig, dataset: Dataset) -> None:
    S = dataset.inputs.shape[1]
    problems = []
    if S != config.tokens:
        problems.append(f"dataset has {S} landmarks, mixer expects {config.tokens}")
    if S != model.landmark_count:
        problems.append(f"dataset has {S} landmarks, model regresses {model.landmark_count}")
    if dataset.targets.beta.shape[-1] != config.shape_dim or dataset.targets.theta.shape[-1] != config.pose_dim:
        problems.append("latent sizes differ between dataset and mixer config")
    if (model.shape_dim, model.pose_dim) != (config.shape_dim, config.pose_dim):
        problems.append("latent sizes differ between model and mixer config")
    mh = dataset.header.get("model_hash")
    if mh and mh != model.content_hash:
        problems.append("dataset was generated from a different model")
    if problems:
        raise FormatError("; ".join(problems))


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_step: int
    log_rows: list
    final_eval: dict
    best_eval: dict
    step_losses: list = field(default_factory=list)


def _fmt(x):
    return repr(float(x))


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        w.writerow([row["step"]] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def train(
    model: KinematicModel,
    dataset: Dataset,
    mixer_config: MixerConfig,
    train_config: TrainConfig,
    checkpoint_path=None,
    log_path=None,
    init_seed: int | None = None,
) -> TrainResult:
    """Train the lifter with Adam on the head of ``dataset``; evaluate on its tail.

    The best checkpoint (lowest held-out MPJPE) is written to
    ``checkpoint_path`` and the metrics log to ``log_path`` when given.
    """
    check_compatible(model, mixer_config, dataset)
    tc = train_config
    train_set, eval_set = dataset.split(tc.holdout_fraction)
    if len(eval_set) == 0:
        eval_set = train_set
    seed = tc.seed if init_seed is None else init_seed
    params = init_params(mixer_config, seed)
    opt = AdamState.zeros(params)
    rng = np.random.default_rng([tc.seed, 1])
    dtype = np.dtype(tc.compute_dtype)
    n = len(train_set)

    rows = []
    best = (np.inf, params, 0, None)
    running, running_n = 0.0, 0
    step_losses = []

    def record(step, train_loss):
        nonlocal best
        ev = evaluate(model, params, mixer_config, eval_set, dtype=dtype)
        row = {
            "step": step,
            "train_loss": train_loss,
            "eval_mpjpe_mm": ev["mpjpe_mm"],
            "eval_mpjpe_pa_mm": ev["mpjpe_pa_mm"],
            "rot_err_deg": ev["rot_err_deg"],
            "t_err_mm": ev["t_err_mm"],
        }
        rows.append(row)
        log.info("step %d loss %.5g mpjpe %.2f mm pa %.2f mm", step, train_loss, ev["mpjpe_mm"], ev["mpjpe_pa_mm"])
        if ev["mpjpe_mm"] < best[0]:
            best = (ev["mpjpe_mm"], {k: v.copy() for k, v in params.items()}, step, ev)
        return ev

    first_loss = _batch_loss(model, params, mixer_config, train_set, np.arange(min(n, tc.batch_size)), tc.weights, dtype)
    record(0, first_loss)

    order = rng.permutation(n)
    cursor = 0
    for step in range(1, tc.steps + 1):
        if cursor + tc.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor : cursor + tc.batch_size])
        cursor += tc.batch_size
        loss, grads = _batch_grad(model, params, mixer_config, train_set, idx, tc.weights, dtype)
        if not np.isfinite(loss):
            raise DivergedError(f"non-finite training loss at step {step}")
        lr = tc.learning_rate
        if tc.warmup_steps:
            lr *= min(1.0, step / tc.warmup_steps)
        if tc.lr_schedule == "cosine":
            lr *= 0.5 * (1.0 + np.cos(np.pi * (step - 1) / tc.steps))
        params, opt = adam_step(params, grads, opt, lr, tc.beta1, tc.beta2, tc.eps)
        step_losses.append(loss)
        running += loss
        running_n += 1
        if step % tc.eval_every == 0 or step == tc.steps:
            record(step, running / running_n)
            running, running_n = 0.0, 0

    final_eval = evaluate(model, params, mixer_config, eval_set, dtype=dtype)
    if not np.isfinite(final_eval["mpjpe_mm"]):
        raise DivergedError("non-finite evaluation metrics")
    _, best_params, best_step, best_eval = best
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, best_params, mixer_config, seed, best_step,
            extra={"train_config": tc.to_dict(), "model_hash": model.content_hash, "eval": best_eval},
        )
    if log_path is not None:
        Path(log_path).write_text(format_log(rows))
    return TrainResult(params, best_params, best_step, rows, final_eval, best_eval, step_losses)


def _cast(params, dtype):
    if dtype == np.float64:
        return params
    return {k: v.astype(dtype) for k, v in params.items()}


def _batch_loss(model, params, config, data, idx, weights, dtype):
    pred, _ = mixer_forward(_cast(params, dtype), data.inputs[idx], config)
    return lifter_loss(model, pred, data.targets[idx], weights, data.clean[idx])[0]


def _batch_grad(model, params, config, data, idx, weights, dtype):
    p = _cast(params, dtype)
    pred, cache = mixer_forward(p, data.inputs[idx], config)
    loss, g_heads = lifter_loss(model, pred, data.targets[idx], weights, data.clean[idx])
    grads, _ = mixer_backward(p, cache, g_heads)
    return loss, grads
