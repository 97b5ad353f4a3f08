"""MLP-Mixer lifter with hand-written reverse mode.

Input landmarks (B, S, 3) are projected token-wise to (B, S, C) by one shared
3 x C matrix.  Each layer applies, with pre-LayerNorm and a residual add,

* token mixing:   an MLP over the S axis, shared across the C channels
* channel mixing: an MLP over the C axis, shared across the S tokens

followed after the last layer by a mean over tokens and four linear heads
for (r, t, beta, theta).

Parameters are a flat ``dict`` of arrays whose key order is the declared
order used by checkpoints; gradients use the same keys.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from bodylift._kernels import gelu, gelu_backward, layer_norm, layer_norm_backward
from bodylift.body_model import PoseState
from bodylift.errors import FormatError, ShapeMismatch, StaleCache
from bodylift.rotations import IDENTITY_6D

LN_EPS = 1e-5
HEADS = ("r", "t", "beta", "theta")
CHECKPOINT_MAGIC = b"BLCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MixerConfig:
    tokens: int = 75
    channels: int = 64
    layers: int = 4
    token_hidden: int = 64
    channel_hidden: int = 128
    shape_dim: int = 8
    pose_dim: int = 32
    layer_norm: bool = True
    residual: bool = True

    def __post_init__(self):
        dims = (self.tokens, self.channels, self.layers, self.token_hidden,
                self.channel_hidden, self.shape_dim, self.pose_dim)
        if min(dims) < 1:
            raise ValueError("all mixer dimensions must be >= 1")

    @property
    def head_dims(self) -> dict:
        return {"r": 6, "t": 3, "beta": self.shape_dim, "theta": self.pose_dim}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        return cls(**d)


def param_shapes(config: MixerConfig) -> dict:
    S, C = config.tokens, config.channels
    Ht, Hc = config.token_hidden, config.channel_hidden
    shapes = {"proj": (3, C)}
    for l in range(config.layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1_g": (C,), p + "ln1_b": (C,),
            p + "tok_w1": (S, Ht), p + "tok_b1": (Ht,),
            p + "tok_w2": (Ht, S), p + "tok_b2": (S,),
            p + "ln2_g": (C,), p + "ln2_b": (C,),
            p + "ch_w1": (C, Hc), p + "ch_b1": (Hc,),
            p + "ch_w2": (Hc, C), p + "ch_b2": (C,),
        })
    for name, dim in config.head_dims.items():
        shapes[f"head_{name}_w"] = (C, dim)
        shapes[f"head_{name}_b"] = (dim,)
    return shapes


def init_params(config: MixerConfig, seed: int) -> dict:
    """Fan-in scaled Gaussian weights, zero biases, unit LayerNorm gains.

    The rotation head's bias is the 6D identity, so an all-zero input
    predicts the identity rotation at initialization.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    params["head_r_b"] = IDENTITY_6D.copy()
    return params


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


class MixerCache:
    """Activations saved by ``mixer_forward`` for ``mixer_backward``."""

    def __init__(self, config, shapes, x):
        self.config = config
        self.shapes = shapes
        self.x = x
        self.layers = []
        self.pooled = None


def mixer_forward(params: dict, x, config: MixerConfig):
    """Predict a batched PoseState from landmarks (S, 3) or (B, S, 3).

    Arithmetic runs in the dtype of ``params`` (float64 or float32); the
    returned state is always float64.
    """
    dtype = params["proj"].dtype
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.tokens, 3):
        raise ShapeMismatch(f"expected input (B, {config.tokens}, 3), got {x.shape}")
    shapes = {k: v.shape for k, v in params.items()}
    if shapes != param_shapes(config):
        raise ShapeMismatch("parameters do not match the mixer config")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input landmarks")
    B, S, C = x.shape[0], config.tokens, config.channels
    cache = MixerCache(config, shapes, x)

    h = x @ params["proj"]
    for l in range(config.layers):
        p = f"layer{l}."
        rec = {}
        if config.layer_norm:
            y, rec["xhat1"], rec["rstd1"] = layer_norm(h, params[p + "ln1_g"], params[p + "ln1_b"], LN_EPS)
        else:
            y = h
        yt = np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(B * C, S)
        a1 = yt @ params[p + "tok_w1"] + params[p + "tok_b1"]
        g1, th1 = gelu(a1)
        z = (g1 @ params[p + "tok_w2"] + params[p + "tok_b2"]).reshape(B, C, S).transpose(0, 2, 1)
        rec.update(yt=yt, a1=a1, g1=g1, th1=th1)
        h = h + z if config.residual else z

        if config.layer_norm:
            y2, rec["xhat2"], rec["rstd2"] = layer_norm(h, params[p + "ln2_g"], params[p + "ln2_b"], LN_EPS)
        else:
            y2 = h
        y2f = y2.reshape(B * S, C)
        a2 = y2f @ params[p + "ch_w1"] + params[p + "ch_b1"]
        g2, th2 = gelu(a2)
        z2 = (g2 @ params[p + "ch_w2"] + params[p + "ch_b2"]).reshape(B, S, C)
        rec.update(y2f=y2f, a2=a2, g2=g2, th2=th2)
        h = h + z2 if config.residual else z2
        cache.layers.append(rec)

    pooled = h.mean(axis=1)
    cache.pooled = pooled
    out = {k: pooled @ params[f"head_{k}_w"] + params[f"head_{k}_b"] for k in HEADS}
    state = PoseState(**out)
    if single:
        state = state[0]
    return state, cache


def mixer_backward(params: dict, cache: MixerCache, grad: PoseState):
    """Gradients of a scalar loss given its gradient at the four heads.

    Returns ``(param_grads, input_grad)``; ``input_grad`` has the shape of
    the forward input batch.
    """
    config = cache.config
    if {k: v.shape for k, v in params.items()} != cache.shapes:
        raise StaleCache("parameter shapes changed since the forward pass")
    B = cache.x.shape[0]
    S, C = config.tokens, config.channels
    dtype = params["proj"].dtype
    heads = {k: np.asarray(getattr(grad, k), dtype=dtype) for k in HEADS}
    for k, g in heads.items():
        if g.ndim == 1:
            heads[k] = g = g[None]
        if g.shape != (B, config.head_dims[k]):
            raise StaleCache(f"head gradient {k} has shape {g.shape}, cache batch is {B}")

    grads = {}
    dpooled = np.zeros((B, C), dtype=dtype)
    for k in HEADS:
        grads[f"head_{k}_w"] = cache.pooled.T @ heads[k]
        grads[f"head_{k}_b"] = heads[k].sum(axis=0)
        dpooled += heads[k] @ params[f"head_{k}_w"].T
    dh = np.broadcast_to(dpooled[:, None, :] / S, (B, S, C)).copy()

    for l in reversed(range(config.layers)):
        p = f"layer{l}."
        rec = cache.layers[l]
        # channel mixing
        dz2 = dh.reshape(B * S, C)
        grads[p + "ch_w2"] = rec["g2"].T @ dz2
        grads[p + "ch_b2"] = dz2.sum(axis=0)
        da2 = gelu_backward(dz2 @ params[p + "ch_w2"].T, rec["a2"], rec["th2"])
        grads[p + "ch_w1"] = rec["y2f"].T @ da2
        grads[p + "ch_b1"] = da2.sum(axis=0)
        dy2 = (da2 @ params[p + "ch_w1"].T).reshape(B, S, C)
        if config.layer_norm:
            dy2, grads[p + "ln2_g"], grads[p + "ln2_b"] = layer_norm_backward(
                dy2, rec["xhat2"], rec["rstd2"], params[p + "ln2_g"])
        else:
            grads[p + "ln2_g"] = np.zeros(C, dtype=dtype)
            grads[p + "ln2_b"] = np.zeros(C, dtype=dtype)
        dh = dh + dy2 if config.residual else dy2

        # token mixing
        dz = dh.transpose(0, 2, 1).reshape(B * C, S)
        grads[p + "tok_w2"] = rec["g1"].T @ dz
        grads[p + "tok_b2"] = dz.sum(axis=0)
        da1 = gelu_backward(dz @ params[p + "tok_w2"].T, rec["a1"], rec["th1"])
        grads[p + "tok_w1"] = rec["yt"].T @ da1
        grads[p + "tok_b1"] = da1.sum(axis=0)
        dy = (da1 @ params[p + "tok_w1"].T).reshape(B, C, S).transpose(0, 2, 1)
        if config.layer_norm:
            dy, grads[p + "ln1_g"], grads[p + "ln1_b"] = layer_norm_backward(
                dy, rec["xhat1"], rec["rstd1"], params[p + "ln1_g"])
        else:
            grads[p + "ln1_g"] = np.zeros(C, dtype=dtype)
            grads[p + "ln1_b"] = np.zeros(C, dtype=dtype)
        dh = dh + dy if config.residual else dy

    x = cache.x
    grads["proj"] = x.reshape(B * S, 3).T @ dh.reshape(B * S, C)
    dx = dh @ params["proj"].T
    ordered = {k: grads[k] for k in params}
    return ordered, dx


def save_checkpoint(path, params: dict, config: MixerConfig, seed: int, step: int, extra=None) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    then every parameter as little-endian float64 in declared order."""
    header = {
        "config": config.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "tensors": [[k, list(v.shape)] for k, v in params.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, config, header)``."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode())
    config = MixerConfig.from_dict(header["config"])
    offset = 12 + hlen
    params = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after tensors")
    if {k: v.shape for k, v in params.items()} != param_shapes(config):
        raise FormatError(f"{path}: tensors disagree with the stored config")
    return params, config, header
