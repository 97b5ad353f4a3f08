import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bodylift.body_model import PoseState, pose_landmarks
from bodylift.errors import BehindCamera, EmptyConstraints, FormatError, InsufficientObservations
from bodylift.fitting import (
    A_CLOSER,
    B_CLOSER,
    Camera,
    FitProblem,
    FitWeights,
    OrdinalConstraint,
    constraints_from_state,
    depth_order_error,
    fit,
    load_problem,
    make_mirror_problem,
    mirror_twin,
    objective,
    ordinal_loss,
    project,
    reprojection_loss,
    save_problem,
)
from bodylift.rotations import rot6d_to_matrix

from conftest import random_state, rel_err

CAM = Camera(1000.0, 1000.0, 500.0, 500.0)


def _state_at(model, rng, z=3.0, scale=0.5):
    s = random_state(model, rng, scale=scale, t_scale=0.1)
    s.t[2] += z
    return s


def _problem_from_state(model, state, camera=CAM, **kw):
    X = pose_landmarks(model, state)
    return FitProblem(camera, project(camera, X), np.ones(len(X)), **kw)


# ------------------------------------------------------------ projection

def test_project_on_axis():
    np.testing.assert_allclose(project(CAM, [0, 0, 2]), [500, 500])


def test_project_off_axis():
    np.testing.assert_allclose(project(CAM, [0.2, 0, 2]), [600, 500])


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_project_scale_ambiguity(lam, seed):
    p = np.random.default_rng(seed).uniform(-1, 1, 3) + [0, 0, 3]
    np.testing.assert_allclose(project(CAM, lam * p), project(CAM, p), rtol=1e-9)


def test_behind_camera():
    with pytest.raises(BehindCamera):
        project(CAM, [0, 0, 0])
    with pytest.raises(BehindCamera):
        project(CAM, [[0, 0, 1], [0, 0, -1]])


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0)


# ------------------------------------------------------------ reprojection

def test_reprojection_zero_on_own_projection(model):
    s = _state_at(model, np.random.default_rng(0))
    loss, g = reprojection_loss(_problem_from_state(model, s), model, s)
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert np.abs(g.to_vector()).max() < 1e-9


def test_single_pixel_offset(model):
    s = _state_at(model, np.random.default_rng(1))
    p = _problem_from_state(model, s)
    p.keypoints[7, 0] += 1.0
    loss, _ = reprojection_loss(p, model, s)
    assert loss == pytest.approx(0.5 / len(p.keypoints), rel=1e-9)


def test_huber_linear_zone(model):
    s = _state_at(model, np.random.default_rng(1))
    p = _problem_from_state(model, s)
    p.keypoints[7, 0] += 25.0
    loss, _ = reprojection_loss(p, model, s)
    assert loss == pytest.approx(5.0 * (25.0 - 2.5) / len(p.keypoints), rel=1e-9)


def test_zero_confidence_ignored(model):
    s = _state_at(model, np.random.default_rng(2))
    p = _problem_from_state(model, s)
    p.confidence[:10] = 0.0
    p.keypoints[:10] += 1000.0
    loss, _ = reprojection_loss(p, model, s)
    assert loss == pytest.approx(0.0, abs=1e-20)


# ------------------------------------------------------------ ordinal terms

def test_softplus_at_zero():
    c = [OrdinalConstraint((0, 1), (2, 3), A_CLOSER)]
    loss, _ = ordinal_loss(c, np.ones(4), tau=0.05)
    assert loss == pytest.approx(np.log(2), rel=1e-12)


def test_softplus_tail():
    tau = 0.05
    c = [OrdinalConstraint((0, 0), (1, 1), A_CLOSER)]
    loss, _ = ordinal_loss(c, np.array([1.0, 1.0 + 10 * tau]), tau)
    assert loss < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_relation_label_symmetry(za, zb):
    a = ordinal_loss([OrdinalConstraint((0, 0), (1, 1), A_CLOSER)], np.array([za, zb]))[0]
    b = ordinal_loss([OrdinalConstraint((0, 0), (1, 1), B_CLOSER)], np.array([zb, za]))[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)


def test_ordinal_no_overflow():
    c = [OrdinalConstraint((0, 0), (1, 1), A_CLOSER)]
    loss, g = ordinal_loss(c, np.array([100.0, 0.0]), tau=0.05)
    assert np.isfinite(loss) and loss == pytest.approx(2000.0)
    assert np.all(np.isfinite(g))


def test_self_constraint_rejected():
    with pytest.raises(ValueError):
        OrdinalConstraint((1, 2), (2, 1))
    with pytest.raises(ValueError):
        OrdinalConstraint((1, 2), (3, 4), "closer")


def test_depth_order_error_counts():
    cs = [OrdinalConstraint((0, 0), (k, k), A_CLOSER) for k in range(1, 5)]
    z = np.array([0.0, 1, 2, 3, 4])
    assert depth_order_error(cs, z) == 0.0
    assert depth_order_error(cs, -z) == 1.0
    assert depth_order_error(cs, np.array([0.0, 1, 2, 3, -1])) == 0.25
    # a tie is a violation
    assert depth_order_error(cs, np.array([0.0, 0, 2, 3, 4])) == 0.25


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_depth_order_error_scale_invariant(seed, lam):
    rng = np.random.default_rng(seed)
    z = rng.uniform(1, 5, 33)
    idx = [rng.choice(33, 4, replace=False) for _ in range(4)]
    cs = [OrdinalConstraint((i[0], i[1]), (i[2], i[3]), A_CLOSER) for i in idx]
    assert depth_order_error(cs, lam * z) == depth_order_error(cs, z)


def test_empty_constraints():
    with pytest.raises(EmptyConstraints):
        depth_order_error([], np.zeros(3))


# ------------------------------------------------------------ gradients

def test_objective_gradient_fd(model):
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(50):
        truth = _state_at(model, rng)
        p = _problem_from_state(model, truth, weights=FitWeights(1.0, 2.0, 0.1, 0.1))
        p.keypoints += rng.normal(0, 3.0, p.keypoints.shape)
        p.confidence = rng.uniform(0, 1, len(p.confidence))
        p.constraints = constraints_from_state(model, truth, rng, count=6, margin=0.0)
        s = _state_at(model, rng)
        _, g, _ = objective(p, model, s)
        x0 = s.to_vector()
        num = np.zeros_like(x0)
        h = 1e-6
        for i in range(len(x0)):
            e = np.zeros_like(x0)
            e[i] = h
            up = objective(p, model, PoseState.from_vector(x0 + e, model.shape_dim, model.pose_dim))[0]
            dn = objective(p, model, PoseState.from_vector(x0 - e, model.shape_dim, model.pose_dim))[0]
            num[i] = (up - dn) / (2 * h)
        worst = max(worst, rel_err(g.to_vector(), num))
    assert worst < 1e-5


def test_ordinal_gradient_fd():
    rng = np.random.default_rng(4)
    for _ in range(50):
        z = rng.uniform(1, 2, 10)
        idx = [rng.choice(10, 4, replace=False) for _ in range(5)]
        cs = [OrdinalConstraint((i[0], i[1]), (i[2], i[3]), rng.choice([A_CLOSER, B_CLOSER])) for i in idx]
        _, g = ordinal_loss(cs, z, 0.05)
        num = np.array([(ordinal_loss(cs, z + h, 0.05)[0] - ordinal_loss(cs, z - h, 0.05)[0]) / 2e-7
                        for h in np.eye(10) * 1e-7])
        assert rel_err(g, num) < 1e-5


def test_principal_point_translation_invariance(model):
    rng = np.random.default_rng(5)
    truth = _state_at(model, rng)
    p = _problem_from_state(model, truth, constraints=constraints_from_state(model, truth, rng, margin=0.0))
    p.keypoints += rng.normal(0, 4.0, p.keypoints.shape)
    s = _state_at(model, rng)
    base = objective(p, model, s)[0]
    for d in rng.uniform(-300, 300, (10, 2)):
        q = FitProblem(Camera(CAM.fx, CAM.fy, CAM.cx + d[0], CAM.cy + d[1]), p.keypoints + d, p.confidence,
                       p.constraints, p.weights)
        assert objective(q, model, s)[0] == pytest.approx(base, rel=1e-9)


# ------------------------------------------------------------ fit

def test_truth_init_is_a_fixed_point(model):
    p = make_mirror_problem(model, 3, pixel_noise=0.0, restarts=1, iterations=100)
    start = objective(p, model, p.truth)[0]
    state, rep = fit(p, model, init=p.truth)
    assert rep.total_loss <= start
    assert rep.mpjpe_to_truth_mm < 5.0


def test_truth_init_general_view(model):
    truth = _state_at(model, np.random.default_rng(6), z=4.0)
    p = _problem_from_state(model, truth, restarts=1, iterations=100, truth=truth)
    state, rep = fit(p, model, init=truth)
    assert rep.total_loss <= objective(p, model, truth)[0]
    assert rep.mpjpe_to_truth_mm < 5.0
    assert rep.ordinal_loss is None and rep.depth_order_error_after is None


def test_insufficient_observations(model):
    s = _state_at(model, np.random.default_rng(7))
    p = _problem_from_state(model, s)
    p.confidence[:] = 0.0
    p.confidence[:3] = 1.0
    with pytest.raises(InsufficientObservations):
        fit(p, model)


def test_fit_is_deterministic(model):
    p = make_mirror_problem(model, 8, iterations=40)
    a, ra = fit(p, model)
    b, rb = fit(p, model)
    assert np.array_equal(a.to_vector(), b.to_vector()) and ra == rb


def test_large_ordinal_weight_satisfies_constraints(model):
    # constraints drawn from a real pose are jointly satisfiable
    for seed in range(5):
        p = make_mirror_problem(model, 100 + seed, weights=FitWeights(w_ord=50.0), iterations=300)
        _, rep = fit(p, model)
        assert rep.depth_order_error_after == 0.0


def test_mirror_twin_is_a_competing_fit(model):
    import dataclasses

    p = make_mirror_problem(model, 9, pixel_noise=0.0, restarts=1)
    p = dataclasses.replace(p, weights=FitWeights(w_ord=0.0))
    twin = mirror_twin(p.truth)
    assert np.linalg.det(rot6d_to_matrix(twin.r)) == pytest.approx(1.0)
    # without ordinal terms the reflected basin fits the keypoints to
    # sub-pixel residual while every annotated depth order is reversed
    _, rep = fit(p, model, init=twin)
    assert rep.reprojection_loss < 0.5
    assert rep.depth_order_error_after == 1.0


def test_problem_file_round_trip(model, tmp_path):
    p = make_mirror_problem(model, 10)
    save_problem(p, tmp_path / "p.json")
    q = load_problem(tmp_path / "p.json")
    assert q.camera == p.camera and q.constraints == p.constraints and q.weights == p.weights
    np.testing.assert_array_equal(q.keypoints, p.keypoints)
    np.testing.assert_array_equal(q.truth.to_vector(), p.truth.to_vector())


def test_malformed_problem_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "format": "bodylift-fit-problem",\n "camera": {,\n}')
    with pytest.raises(FormatError, match="line 3"):
        load_problem(path)
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(FormatError):
        load_problem(path)


def test_problem_validation():
    with pytest.raises(ValueError):
        FitProblem(CAM, np.zeros((4, 2)), np.full(4, 1.5))
    with pytest.raises(ValueError):
        FitWeights(w_ord=-1)
    with pytest.raises(ValueError):
        FitProblem(CAM, np.zeros((4, 2)), np.ones(4), [OrdinalConstraint((0, 1), (2, 9))])
