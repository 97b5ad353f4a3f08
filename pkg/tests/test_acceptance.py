"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line (shown even when
pytest captures output) and then asserts the same condition.  The
training criterion runs the full default configuration and takes about
a quarter of an hour on one core.
"""
import dataclasses
import time

import numpy as np
import pytest
from scipy import stats

from bodylift.body_model import PoseState, pose_landmarks, rigid_transform_state
from bodylift.cli import main
from bodylift.errors import ShapeMismatch
from bodylift.fitting import fit, make_mirror_problem
from bodylift.metrics import apply_similarity, mpjpe_pa, procrustes_align
from bodylift.mixer import MixerConfig, init_params, mixer_forward
from bodylift.recrop import simulate_pipeline
from bodylift.rotations import rot6d_to_matrix
from bodylift.sampling import SamplerConfig, build_examples, sample_haar_so3
from bodylift.trainer import TrainConfig, train

from conftest import random_state


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return say


def test_criterion_1_lifter_accuracy(model, verdict):
    t0 = time.perf_counter()
    ds = build_examples(model, SamplerConfig(seed=1, noise_sigma=0.0), 20_000)
    res = train(model, ds, MixerConfig(), TrainConfig())
    elapsed = time.perf_counter() - t0
    ev = res.best_eval
    ok = ev["mpjpe_mm"] < 30.0 and ev["mpjpe_pa_mm"] < ev["mpjpe_mm"] and elapsed < 900
    verdict(1, ok, f"held-out MPJPE {ev['mpjpe_mm']:.1f} mm, MPJPE-PA {ev['mpjpe_pa_mm']:.1f} mm, {elapsed:.0f} s")


def test_criterion_2_ordinal_depth(model, verdict):
    t0 = time.perf_counter()
    without, with_ord = [], []
    for seed in range(100):
        p = make_mirror_problem(model, seed)
        off = dataclasses.replace(p, weights=dataclasses.replace(p.weights, w_ord=0.0))
        without.append(fit(off, model)[1].depth_order_error_after)
        with_ord.append(fit(p, model)[1].depth_order_error_after)
    elapsed = time.perf_counter() - t0
    a, b = np.mean(without), np.mean(with_ord)
    ok = a > 0.10 and b < 0.05 and elapsed < 300
    verdict(2, ok, f"depth order error {a:.1%} without, {b:.1%} with constraints, {elapsed:.0f} s")


def test_criterion_3_gradients(verdict):
    # each suite runs >= 50 randomized trials and asserts rel err < 1e-5
    import test_body_model
    import test_fitting
    import test_mixer
    import test_trainer
    from bodylift.toy_model import make_toy_model

    m = make_toy_model()
    failures = []
    suites = [
        ("mixer parameters", lambda: test_mixer.test_parameter_gradients_fd((True, True))),
        ("lifter loss", lambda: test_trainer.test_loss_gradient_fd(m)),
        ("fit objective", lambda: test_fitting.test_objective_gradient_fd(m)),
        ("ordinal", test_fitting.test_ordinal_gradient_fd),
        ("FK/LBS Jacobian", lambda: test_body_model.test_landmark_jacobian_finite_differences(m)),
    ]
    for name, run in suites:
        try:
            run()
        except AssertionError:
            failures.append(name)
    verdict(3, not failures, "all suites within 1e-5" if not failures else "failed: " + ", ".join(failures))


def test_criterion_4_haar(verdict):
    rng = np.random.default_rng(2024)
    n = 100_000
    R = sample_haar_so3(rng, size=n)
    Q = sample_haar_so3(np.random.default_rng(7))
    tr = np.trace(R, axis1=1, axis2=2)
    tr_q = np.trace(Q @ sample_haar_so3(rng, size=n), axis1=1, axis2=2)
    p_ks = stats.ks_2samp(tr_q, tr).pvalue
    theta = np.arccos(np.clip((tr - 1) / 2, -1, 1))
    edges = np.linspace(0, np.pi, 21)
    observed, _ = np.histogram(theta, edges)
    # integral of (1 - cos t) / pi over each bin
    cdf = (edges - np.sin(edges)) / np.pi
    expected = n * np.diff(cdf)
    p_chi = stats.chisquare(observed, expected).pvalue
    verdict(4, p_ks > 1e-3 and p_chi > 1e-3, f"KS p={p_ks:.3f}, chi2 p={p_chi:.3f}")


def test_criterion_5_procrustes(verdict):
    rng = np.random.default_rng(5)
    worst_param, worst_pa = 0.0, 0.0
    for _ in range(1000):
        X = rng.standard_normal((75, 3)) * 0.3
        s0, R0, t0 = rng.uniform(0.1, 10), sample_haar_so3(rng), rng.standard_normal(3)
        Y = apply_similarity(X, s0, R0, t0)
        s, R, t = procrustes_align(X, Y)
        worst_param = max(worst_param, abs(s - s0), np.abs(R - R0).max(), np.abs(t - t0).max())
        worst_pa = max(worst_pa, mpjpe_pa(X, Y))
    verdict(5, worst_param < 1e-9 and worst_pa < 1e-6, f"max param err {worst_param:.1e}, max PA {worst_pa:.1e} mm")


def test_criterion_6_rigid_equivariance(model, verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        s = random_state(model, rng)
        base = PoseState(np.array([1.0, 0, 0, 0, 1, 0]), np.zeros(3), s.beta, s.theta)
        R, t = rot6d_to_matrix(s.r), s.t
        lhs = pose_landmarks(model, s)
        rhs = pose_landmarks(model, base) @ R.T + t
        worst = max(worst, np.abs(lhs - rhs).max())
        moved = rigid_transform_state(s, sample_haar_so3(rng), rng.standard_normal(3))
        again = rigid_transform_state(base, rot6d_to_matrix(moved.r), moved.t)
        worst = max(worst, np.abs(pose_landmarks(model, moved) - pose_landmarks(model, again)).max())
    verdict(6, worst < 1e-9, f"max deviation {worst:.1e} m")


def test_criterion_7_token_contract(verdict):
    cfg = MixerConfig()
    params = init_params(cfg, 0)
    accepted = mixer_forward(params, np.zeros((2, 75, 3)), cfg)[0].r.shape == (2, 6)
    rejected = 0
    counts = [0, 1, 33, 54, 74, 76, 96, 150]
    for S in counts:
        try:
            mixer_forward(params, np.zeros((2, S, 3)), cfg)
        except ShapeMismatch:
            rejected += 1
    ok = cfg.tokens == 75 and accepted and rejected == len(counts)
    verdict(7, ok, f"S=75 accepted, {rejected}/{len(counts)} other counts rejected")


def test_criterion_8_recrop(verdict):
    r = simulate_pipeline(n=1000, seed=0)
    ok = r["refined_iou"] > r["raw_iou"] and r["refined_iou"] > r["stale_iou"]
    verdict(8, ok, f"IoU refined {r['refined_iou']:.3f}, raw {r['raw_iou']:.3f}, stale {r['stale_iou']:.3f}")


def test_criterion_9_determinism(tmp_path, verdict, capsys):
    for k in ("a", "b"):
        assert main(["generate", "--count", "500", "--seed", "9", "--out", str(tmp_path / f"{k}.bin")]) == 0
        assert main(["train", "--dataset", str(tmp_path / f"{k}.bin"), "--steps", "40", "--eval-every", "10",
                     "--seed", "9", "--out", str(tmp_path / f"{k}.ck")]) == 0
    same = lambda name: (tmp_path / f"a{name}").read_bytes() == (tmp_path / f"b{name}").read_bytes()
    ok = same(".bin") and same(".ck.csv") and same(".ck")
    verdict(9, ok, "datasets, logs and checkpoints byte-identical" if ok else "outputs differ")
