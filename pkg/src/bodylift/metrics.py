"""Landmark error metrics. Inputs are in meters, errors are reported in mm.

All functions accept optional leading batch axes on (..., N, 3) arrays and
return per-batch-element values.
"""
import numpy as np

from bodylift.body_model import LandmarkLayout
from bodylift.errors import DegenerateConfiguration, LayoutMismatch, ZeroHandSize


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise LayoutMismatch(f"landmark arrays differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred, gt):
    """Mean per-landmark Euclidean distance, in millimeters."""
    pred, gt = _check(pred, gt)
    return 1000.0 * np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def procrustes_align(pred, gt, scale=True):
    """Least-squares similarity (s, R, t) with s R pred + t ~ gt (Umeyama).

    R is always a proper rotation; a reflection between the point sets is
    not absorbed.  With ``scale=False`` only a rigid motion is fitted.
    """
    pred, gt = _check(pred, gt)
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    xp, xg = pred - mu_p, gt - mu_g
    sv = np.linalg.svd(xp, compute_uv=False)
    if pred.shape[-2] < 3 or np.any(sv[..., 1] <= 1e-12 * np.maximum(sv[..., 0], 1e-300)):
        raise DegenerateConfiguration("need at least 3 non-collinear points")
    n = pred.shape[-2]
    cov = np.swapaxes(xg, -1, -2) @ xp / n
    U, D, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    d = np.where(d == 0, 1.0, d)
    Sdiag = np.ones(D.shape)
    Sdiag[..., -1] = d
    R = (U * Sdiag[..., None, :]) @ Vt
    if scale:
        var_p = (xp * xp).sum(axis=(-1, -2)) / n
        s = (D * Sdiag).sum(axis=-1) / var_p
    else:
        s = np.ones(D.shape[:-1])
    t = mu_g[..., 0, :] - s[..., None] * np.einsum("...ab,...b->...a", R, mu_p[..., 0, :])
    return s, R, t


def apply_similarity(points, s, R, t):
    points = np.asarray(points, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return s[..., None, None] * np.einsum("...ab,...nb->...na", R, points) + np.asarray(t)[..., None, :]


def mpjpe_pa(pred, gt, scale=True):
    """MPJPE after optimally aligning pred onto gt, in millimeters."""
    s, R, t = procrustes_align(pred, gt, scale=scale)
    return mpjpe(apply_similarity(pred, s, R, t), gt)


def hand_size(hand, layout: LandmarkLayout = LandmarkLayout()):
    hand = np.asarray(hand, dtype=np.float64)
    return np.linalg.norm(hand[..., layout.hand_wrist, :] - hand[..., layout.hand_middle_tip, :], axis=-1)


def normalized_hand_error(pred, gt, layout: LandmarkLayout = LandmarkLayout()):
    """Mean landmark error of a 21-point hand divided by the gt hand size.

    Hand size is the wrist to middle-fingertip distance.
    """
    pred, gt = _check(pred, gt)
    if pred.shape[-2] != layout.left_hand:
        raise LayoutMismatch(f"hands need {layout.left_hand} landmarks")
    size = hand_size(gt, layout)
    if np.any(size <= 1e-12):
        raise ZeroHandSize("ground-truth hand has zero size")
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1) / size
