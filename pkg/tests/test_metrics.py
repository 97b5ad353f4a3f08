import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bodylift.errors import DegenerateConfiguration, LayoutMismatch, ZeroHandSize
from bodylift.metrics import apply_similarity, mpjpe, mpjpe_pa, normalized_hand_error, procrustes_align
from bodylift.sampling import sample_haar_so3


def pts(seed, n=75):
    return np.random.default_rng(seed).standard_normal((n, 3)) * 0.3


def test_mpjpe_identical():
    X = pts(0)
    assert mpjpe(X, X) == 0.0


def test_mpjpe_uniform_offset():
    X = pts(0)
    assert mpjpe(X + [0.001, 0, 0], X) == pytest.approx(1.0, rel=1e-9)


def test_mpjpe_two_off():
    X = pts(1)
    Y = X.copy()
    Y[3, 0] += 0.003
    Y[40, 2] -= 0.005
    assert mpjpe(Y, X) == pytest.approx(8 / 75, rel=1e-9)


def test_layout_mismatch():
    with pytest.raises(LayoutMismatch):
        mpjpe(pts(0, 75), pts(0, 74))
    with pytest.raises(LayoutMismatch):
        mpjpe_pa(pts(0, 75), pts(0, 74))


def test_procrustes_identity():
    X = pts(2)
    s, R, t = procrustes_align(X, X)
    assert s == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, 0, atol=1e-12)


def test_procrustes_recovers_known_transform():
    rng = np.random.default_rng(3)
    X = pts(3)
    R0, t0 = sample_haar_so3(rng), rng.standard_normal(3)
    s, R, t = procrustes_align(X, 2 * X @ R0.T + t0)
    assert abs(s - 2) < 1e-9
    assert np.abs(R - R0).max() < 1e-9 and np.abs(t - t0).max() < 1e-9


def test_reflection_not_absorbed():
    X = pts(4)
    Y = X * [1, 1, -1]
    s, R, t = procrustes_align(X, Y)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    assert mpjpe_pa(X, Y) > 1.0


def test_collinear_rejected():
    X = np.outer(np.linspace(0, 1, 10), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(X, X)
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(pts(0, 2), pts(1, 2))


def test_similarity_image_pa_zero():
    rng = np.random.default_rng(5)
    X = pts(5)
    Y = apply_similarity(X, 0.7, sample_haar_so3(rng), rng.standard_normal(3))
    assert mpjpe_pa(X, Y) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_pa_never_exceeds_mpjpe(seed):
    rng = np.random.default_rng(seed)
    X, Y = pts(seed), pts(seed + 1) + 0.01 * rng.standard_normal(3)
    assert mpjpe_pa(X, Y) <= mpjpe(X, Y) + 1e-9


def test_noise_only_pa():
    rng = np.random.default_rng(6)
    X = pts(6, 75)
    sigma = 0.001
    vals = [mpjpe_pa(X + sigma * rng.standard_normal(X.shape), X) for _ in range(1000)]
    expected = 1000 * sigma * 2 * np.sqrt(2 / np.pi)  # mean of a chi(3) scaled to mm
    assert 0.5 * expected <= np.mean(vals) <= 1.5 * expected


def test_pa_invariant_to_similarity_on_pred():
    rng = np.random.default_rng(7)
    X, Y = pts(7), pts(8)
    base = mpjpe_pa(X, Y)
    for _ in range(20):
        Z = apply_similarity(X, rng.uniform(0.2, 5), sample_haar_so3(rng), rng.standard_normal(3))
        assert abs(mpjpe_pa(Z, Y) - base) < 1e-9


def test_pa_is_optimal_against_random_search():
    rng = np.random.default_rng(8)
    X = pts(9)
    Y = apply_similarity(X, 1.2, sample_haar_so3(rng), [0.1, 0, 0]) + 0.02 * rng.standard_normal(X.shape)
    s, R, t = procrustes_align(X, Y)
    # the aligned residual is a least-squares minimum, so compare squared error
    best = np.sum((apply_similarity(X, s, R, t) - Y) ** 2)
    for _ in range(1000):
        dR = sample_haar_so3(rng) if rng.random() < 0.1 else _small_rotation(rng)
        cand = (s * rng.uniform(0.95, 1.05), dR @ R, t + 0.01 * rng.standard_normal(3))
        assert np.sum((apply_similarity(X, *cand) - Y) ** 2) >= best - 1e-12


def _small_rotation(rng):
    from bodylift.rotations import axis_angle_to_matrix

    return axis_angle_to_matrix(rng.standard_normal(3), rng.normal(0, 0.05))


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-10, 10)] * 3))
def test_translation_symmetry(d):
    X, Y = pts(10), pts(11)
    d = np.asarray(d)
    assert abs(mpjpe(X + d, Y + d) - mpjpe(X, Y)) < 1e-6
    assert abs(mpjpe_pa(X + d, Y + d) - mpjpe_pa(X, Y)) < 1e-6


def test_rigid_only_flag():
    rng = np.random.default_rng(12)
    X = pts(12)
    Y = 2.0 * X
    assert mpjpe_pa(X, Y, scale=True) < 1e-6
    assert mpjpe_pa(X, Y, scale=False) > 1.0
    s, R, _ = procrustes_align(X, X @ sample_haar_so3(rng).T, scale=False)
    assert s == 1.0


def _hand(size=0.1):
    H = np.zeros((21, 3))
    H[1:] = np.random.default_rng(13).standard_normal((20, 3)) * 0.02
    H[12] = [0, size, 0]
    return H


def test_hand_identical():
    assert normalized_hand_error(_hand(), _hand()) == 0.0


def test_hand_one_mm_offset():
    gt = _hand(0.1)
    assert normalized_hand_error(gt + [0.001, 0, 0], gt) == pytest.approx(0.01, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100))
def test_hand_scale_homogeneity(lam):
    gt = _hand()
    pred = gt + np.random.default_rng(14).standard_normal(gt.shape) * 0.003
    assert normalized_hand_error(lam * pred, lam * gt) == pytest.approx(normalized_hand_error(pred, gt), rel=1e-9)


def test_zero_hand_size():
    gt = _hand()
    gt[12] = gt[0]
    with pytest.raises(ZeroHandSize):
        normalized_hand_error(gt, gt)


def test_hand_needs_21_points():
    with pytest.raises(LayoutMismatch):
        normalized_hand_error(pts(0, 20), pts(0, 20))
