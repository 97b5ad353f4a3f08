"""Oriented square hand crops from 2D landmarks.

Angle convention: a crop with angle ``a`` has local axes
``Rot(a) @ (1, 0)`` and ``Rot(a) @ (0, 1)`` in image pixels, and the crop's
"up" axis is local +y.  Local coordinates of an image point p are
``Rot(-a) @ (p - center)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bodylift.errors import DegenerateAxis

SEED_FACTOR = 2.0
REFINED_FACTOR = 1.3
# wrist -> middle finger MCP
HAND_AXIS = (0, 9)
# wrist, index MCP, pinky MCP, thumb MCP: the coarse palm points a body
# tracker provides; the axis runs wrist -> index MCP
PALM_SEED = (0, 5, 17, 2)
PALM_AXIS = (0, 1)


def _rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class OrientedCrop:
    center: tuple
    side: float
    angle: float

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("crop side must be positive")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    def corners(self) -> np.ndarray:
        """Four corners, counter-clockwise in the local frame."""
        h = 0.5 * self.side
        local = np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
        return local @ _rot(self.angle).T + np.asarray(self.center)

    def to_local(self, points):
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) @ _rot(self.angle)

    def contains(self, points, tol=1e-9):
        q = self.to_local(points)
        return np.all(np.abs(q) <= 0.5 * self.side + tol, axis=-1)


@dataclass(frozen=True)
class SimilarityTransform2D:
    """p -> scale * Rot(angle) @ p + translation."""

    scale: float
    angle: float
    translation: tuple

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    def matrix(self) -> np.ndarray:
        M = np.eye(3)
        M[:2, :2] = self.scale * _rot(self.angle)
        M[:2, 2] = self.translation
        return M

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ _rot(self.angle).T + np.asarray(self.translation)

    def inverse(self) -> "SimilarityTransform2D":
        s = 1.0 / self.scale
        t = -s * (_rot(-self.angle) @ np.asarray(self.translation))
        return SimilarityTransform2D(s, -self.angle, t)

    def compose(self, other: "SimilarityTransform2D") -> "SimilarityTransform2D":
        """self after other."""
        t = self.scale * (_rot(self.angle) @ np.asarray(other.translation)) + np.asarray(self.translation)
        return SimilarityTransform2D(self.scale * other.scale, self.angle + other.angle, t)


def crop_from_landmarks(points, axis=HAND_AXIS, scale_factor=SEED_FACTOR) -> OrientedCrop:
    """Square crop whose up axis follows points[i] -> points[j].

    The side is ``scale_factor`` times the larger extent of the points in
    the rotated frame, centered on the rotated bounding box, so factor 1
    is a tight bound.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
        raise ValueError("need at least two 2D points")
    i, j = axis
    if i == j:
        raise ValueError("axis endpoints must be distinct indices")
    d = points[j] - points[i]
    if np.hypot(*d) <= 1e-12:
        raise DegenerateAxis("axis endpoints coincide")
    angle = float(np.arctan2(-d[0], d[1])) + 0.0
    R = _rot(angle)
    q = points @ R  # Rot(-a) p for each row
    lo, hi = q.min(axis=0), q.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise DegenerateAxis("points have no extent")
    center = R @ (0.5 * (lo + hi))
    return OrientedCrop(center, scale_factor * extent, angle)


def crop_to_transform(crop: OrientedCrop, resolution: float):
    """(image -> crop pixels, crop pixels -> image) for a square output of ``resolution``.

    The crop's local corner (-side/2, -side/2) lands on output (0, 0).
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    s = resolution / crop.side
    c = np.asarray(crop.center)
    t = -s * (_rot(-crop.angle) @ c) + 0.5 * resolution
    fwd = SimilarityTransform2D(s, -crop.angle, t)
    return fwd, fwd.inverse()


def refine_crop(crop: OrientedCrop, landmarks, scale_factor=REFINED_FACTOR, axis=HAND_AXIS) -> OrientedCrop:
    """Recompute the crop from a full 21-point hand.

    The result depends only on the landmarks; the input crop is returned
    unchanged when the landmarks collapse to a single point.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.size == 0:
        raise ValueError("no landmarks to refine from")
    if np.all(np.ptp(landmarks, axis=0) <= 1e-12):
        return crop
    return crop_from_landmarks(landmarks, axis, scale_factor)


def _clip(subject, a, b):
    # keep the part of polygon `subject` left of the directed edge a->b
    out = []
    n = len(subject)
    ex, ey = b[0] - a[0], b[1] - a[1]
    side = [ex * (p[1] - a[1]) - ey * (p[0] - a[0]) for p in subject]
    for k in range(n):
        p, q = subject[k], subject[(k + 1) % n]
        sp, sq = side[k], side[(k + 1) % n]
        if sp >= 0:
            out.append(p)
        if (sp >= 0) != (sq >= 0):
            w = sp / (sp - sq)
            out.append((p[0] + w * (q[0] - p[0]), p[1] + w * (q[1] - p[1])))
    return out


def _area(poly):
    if len(poly) < 3:
        return 0.0
    x = np.array([p[0] for p in poly])
    y = np.array([p[1] for p in poly])
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def crop_iou(a: OrientedCrop, b: OrientedCrop) -> float:
    """Intersection over union of two oriented squares (exact convex clipping)."""
    poly = [tuple(p) for p in a.corners()]
    cb = b.corners()
    for k in range(4):
        poly = _clip(poly, cb[k], cb[(k + 1) % 4])
        if not poly:
            return 0.0
    inter = _area(poly)
    union = a.side**2 + b.side**2 - inter
    return float(min(max(inter / union, 0.0), 1.0))


# ------------------------------------------------------------ simulated hands

def _template():
    from bodylift.toy_model import HAND_TEMPLATE

    # flip y so the template is a proper (non-mirrored) image-space hand
    return HAND_TEMPLATE * np.array([1.0, -1.0])


def place_hand(rng, image_size=1024.0):
    """Random similarity placement of the canonical hand template (pixels)."""
    size = rng.uniform(80.0, 320.0)
    T = SimilarityTransform2D(size / 0.19, rng.uniform(-np.pi, np.pi), rng.uniform(0.25, 0.75, 2) * image_size)
    return T.apply(_template()), size


@dataclass
class HandTrial:
    ideal: OrientedCrop
    raw: OrientedCrop
    refined: OrientedCrop
    stale: OrientedCrop


def simulate_hand(
    rng,
    seed_noise=0.05,
    landmark_noise=0.02,
    motion_shift=0.15,
    motion_angle=np.deg2rad(10.0),
    motion_scale=0.05,
) -> HandTrial:
    """One synthetic hand and its three crop estimates.

    Noise and motion magnitudes are fractions of the hand size.  The raw
    crop comes from noisy palm seed points; the refined crop from noisy
    21-point landmarks of the current frame; the stale crop refines from
    the previous frame's landmarks, before a small random hand motion.
    """
    hand, size = place_hand(rng)
    ideal = crop_from_landmarks(hand, HAND_AXIS, REFINED_FACTOR)

    seed = hand[list(PALM_SEED)] + seed_noise * size * rng.standard_normal((len(PALM_SEED), 2))
    raw = crop_from_landmarks(seed, PALM_AXIS, SEED_FACTOR)

    lm = hand + landmark_noise * size * rng.standard_normal(hand.shape)
    refined = refine_crop(raw, lm)

    centroid = hand.mean(axis=0)
    ang = motion_angle * rng.standard_normal()
    sc = np.exp(motion_scale * rng.standard_normal())
    shift = motion_shift * size * rng.standard_normal(2)
    prev = sc * (hand - centroid) @ _rot(ang).T + centroid + shift
    prev_lm = prev + landmark_noise * size * rng.standard_normal(hand.shape)
    stale = refine_crop(raw, prev_lm)
    return HandTrial(ideal, raw, refined, stale)


def simulate_pipeline(n=1000, seed=0, **kwargs) -> dict:
    """Mean IoU against the ideal crop for the raw, refined and stale variants."""
    rng = np.random.default_rng(seed)
    ious = np.zeros((n, 3))
    for k in range(n):
        tr = simulate_hand(rng, **kwargs)
        ious[k] = crop_iou(tr.raw, tr.ideal), crop_iou(tr.refined, tr.ideal), crop_iou(tr.stale, tr.ideal)
    mean = ious.mean(axis=0)
    return {"count": n, "raw_iou": float(mean[0]), "refined_iou": float(mean[1]), "stale_iou": float(mean[2])}
