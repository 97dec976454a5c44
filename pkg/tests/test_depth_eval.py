import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from colonpipe.depth_eval import (AlignmentError, AlignmentParams, DepthSequence, align_scale_shift,
                                  alignment_objective, apply_alignment, bootstrap_ci, compute_metrics, evaluate)
from oracles import naive_metrics


def random_pair(rng, f=4, h=6, w=5):
    gt = rng.uniform(5, 80, (f, h, w))
    pred = gt * rng.uniform(0.7, 1.4, gt.shape)
    mask = rng.uniform(size=gt.shape) > 0.2
    return DepthSequence(np.where(mask, pred, 0), mask), DepthSequence(np.where(mask, gt, 0), mask), mask


def test_metrics_match_naive_loop(rng):
    for _ in range(10):
        p, g, m = random_pair(rng)
        rep = compute_metrics(p, g)
        ref = naive_metrics(p.values, g.values, m)
        for k, v in ref.items():
            assert rep.value(k) == pytest.approx(v, abs=1e-12)
        assert rep.n_pixels == m.sum()


def test_gt_as_prediction_is_perfect(rng):
    _, g, _ = random_pair(rng)
    rep = compute_metrics(g, g)
    assert (rep.delta1, rep.abs_rel, rep.sq_rel, rep.rmse_mm) == (1.0, 0.0, 0.0, 0.0)


def test_delta1_threshold_is_strict():
    gt = DepthSequence.from_arrays(np.full((1, 1, 2), 4.0))
    pred = DepthSequence.from_arrays(np.array([[[5.0, 4.99]]]))  # ratios 1.25 and just under
    assert compute_metrics(pred, gt).delta1 == 0.5


def test_sequence_validation():
    with pytest.raises(ValueError):
        DepthSequence(np.array([[[1.0, -1.0]]]), np.array([[[True, True]]]))
    with pytest.raises(ValueError):
        DepthSequence(np.ones((2, 3, 3)), np.ones((2, 3, 4), bool))
    seq = DepthSequence.from_arrays(np.array([[[1.0, np.nan, 0.0, 2.0]]]))
    assert seq.mask.tolist() == [[[True, False, False, True]]]


def test_alignment_matches_normal_equations(rng):
    p, g, m = random_pair(rng)
    x, y = p.values[m], g.values[m]
    a = np.array([[x @ x, x.sum()], [x.sum(), m.sum()]])
    ref = np.linalg.solve(a, [x @ y, y.sum()])
    par = align_scale_shift(p, g)
    assert (par.alpha, par.beta) == pytest.approx(tuple(ref), abs=1e-9)
    assert par.n_pixels == m.sum()


def test_alignment_is_sequence_global(rng):
    gt = rng.uniform(10, 50, (3, 4, 4))
    pred = gt.copy()
    pred[1] = 2 * gt[1]  # a per-frame fit would absorb this; a global one cannot
    par = align_scale_shift(DepthSequence.from_arrays(pred), DepthSequence.from_arrays(gt))
    assert not par.alpha == pytest.approx(1.0)


def test_affine_recovery():
    gt = DepthSequence.from_arrays(np.linspace(10, 90, 60).reshape(3, 4, 5))
    pred = DepthSequence.from_arrays(2 * gt.values + 3)
    par = align_scale_shift(pred, gt)
    assert par.alpha == pytest.approx(0.5, abs=1e-12)
    assert par.beta == pytest.approx(-1.5, abs=1e-12)
    rep = compute_metrics(apply_alignment(pred, par), gt)
    assert rep.rmse_mm < 1e-12


def test_disparity_alignment_inverts_back(rng):
    gt = DepthSequence.from_arrays(rng.uniform(5, 60, (2, 8, 8)))
    pred = DepthSequence.from_arrays(1.0 / (3.0 / gt.values + 0.01))  # affine in disparity
    par = align_scale_shift(pred, gt, "disparity")
    out = apply_alignment(pred, par)
    np.testing.assert_allclose(out.values, gt.values, rtol=1e-9)


def test_disparity_nonpositive_excluded():
    pred = DepthSequence.from_arrays(np.array([[[1.0, 2.0, 4.0]]]))
    out = apply_alignment(pred, AlignmentParams(1.0, -0.6, "disparity"))
    # 1/d - 0.6 is 0.4, -0.1, -0.35: two pixels drop
    assert out.mask.tolist() == [[[True, False, False]]]
    assert out.n_excluded == 2
    assert out.values[0, 0, 0] == pytest.approx(2.5)


def test_degenerate_and_empty():
    gt = DepthSequence.from_arrays(np.array([[[1.0, 2.0, 3.0]]]))
    const = DepthSequence.from_arrays(np.full((1, 1, 3), 5.0))
    par = align_scale_shift(const, gt)
    assert par.degenerate and par.alpha == 1.0 and par.beta == pytest.approx(-3.0)
    empty = DepthSequence(np.zeros((1, 1, 3)), np.zeros((1, 1, 3), bool))
    with pytest.raises(AlignmentError):
        align_scale_shift(empty, gt)
    with pytest.raises(ValueError):
        align_scale_shift(gt, gt, "log")


@given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 1000))
def test_alignment_is_optimal(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    p, g, _ = random_pair(rng, 2, 4, 4)
    par = align_scale_shift(p, g)
    best = alignment_objective(p, g, par.alpha, par.beta)
    assert best <= alignment_objective(p, g, alpha, beta) * (1 + 1e-12) + 1e-9


def test_bootstrap_deterministic_and_brackets(rng):
    p, g, _ = random_pair(rng, f=12)
    a = bootstrap_ci(p, g, 300, seed=5)
    b = bootstrap_ci(p, g, 300, seed=5)
    assert a.to_json() == b.to_json()
    assert bootstrap_ci(p, g, 300, seed=6).to_json() != a.to_json()
    for m in ("delta1", "abs_rel", "sq_rel", "rmse_mm"):
        assert a.ci_low[m] <= a.value(m) <= a.ci_high[m]
    px = bootstrap_ci(p, g, 100, seed=1, unit="pixel")
    assert px.resample_unit == "pixel"


def test_bootstrap_single_frame_flags_degenerate(rng):
    p, g, _ = random_pair(rng, f=1)
    rep = bootstrap_ci(p, g, 50)
    assert rep.degenerate_ci
    assert rep.ci_low["abs_rel"] == rep.ci_high["abs_rel"] == rep.abs_rel


def test_evaluate_without_bootstrap(rng):
    p, g, _ = random_pair(rng)
    par, rep = evaluate(p, g, n_resamples=0)
    assert rep.ci_low == {} and par.domain == "depth"
