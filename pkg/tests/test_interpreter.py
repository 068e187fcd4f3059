import json

import numpy as np
import pytest

from sci.interpreter import (
    Theta,
    TrainingDiverged,
    accuracy,
    attribution_matrix,
    draw_masks,
    forward,
    grad_sp,
    init_theta,
    interpret,
    loss_and_grad,
    sp_theta_value,
    stochastic_pass,
    target_clarity,
    train,
)


def _central_diff(fn, vec, eps=1e-6):
    g = np.zeros_like(vec)
    for i in range(vec.size):
        old = vec[i]
        vec[i] = old + eps
        up = fn()
        vec[i] = old - eps
        dn = fn()
        vec[i] = old
        g[i] = (up - dn) / (2 * eps)
    return g


def test_zero_theta_gives_uniform_heads():
    th = Theta(d=5, n_classes=3, n_markers=8)
    f = forward(th, np.zeros(5))
    assert np.allclose(f.y[0], 1 / 3)
    assert np.allclose(f.q[0], 1 / 8)


def test_temperature_scales_task_logits_only():
    th = init_theta(4, 3, 5, seed=0)
    x = np.array([0.3, -0.2, 0.8, 0.1])
    base = forward(th, x)
    th2 = th.copy()
    th2.temperature = 2.0
    hot = forward(th2, x)
    assert np.allclose(hot.task_logits, base.task_logits / 2.0)
    assert np.allclose(hot.marker_logits, base.marker_logits)


def test_inverted_dropout_is_unbiased():
    th = init_theta(4, 2, 4, seed=1)
    x = np.array([0.5, -0.4, 0.2, 0.9])
    det = forward(th, x)
    rng = np.random.default_rng(7)
    acc = np.zeros_like(det.h0)
    n = 4000
    for _ in range(n):
        acc += stochastic_pass(th, x, rng).h
    assert np.allclose(acc / n, det.h0, atol=0.05)


def test_dropout_mask_values():
    rng = np.random.default_rng(0)
    m = draw_masks(rng, 100, 32)
    assert set(np.unique(m)) <= {0.0, 2.0}
    assert abs(m.mean() - 1.0) < 0.05


def test_grad_sp_matches_finite_differences():
    th = init_theta(4, 3, 5, seed=2, hidden=8)
    x = np.array([0.4, -1.2, 0.7, 0.3])
    g = grad_sp(th, x)
    fd = _central_diff(lambda: sp_theta_value(th, x), th.vec)
    denom = max(np.linalg.norm(fd), 1e-12)
    assert np.linalg.norm(g - fd) / denom < 1e-6


def test_grad_sp_task_head_coordinates_are_zero():
    th = init_theta(6, 4, 8, seed=3)
    g = grad_sp(th, np.linspace(-1, 1, 6))
    _, _, gWt, gbt, _, _ = th.views(g)
    assert np.all(gWt == 0.0) and np.all(gbt == 0.0)


def test_grad_sp_vanishes_at_uniform_markers():
    th = Theta(d=3, n_classes=2, n_markers=4)  # all-zero parameters
    g = grad_sp(th, np.array([0.5, -0.5, 1.0]))
    assert np.linalg.norm(g) < 1e-8


def test_sharpening_marker_head_raises_clarity():
    th = init_theta(4, 2, 6, seed=4)
    x = np.array([0.9, 0.1, -0.6, 0.4])
    W1, b1, Wt, bt, Wm, bm = th.views()
    wm0, bm0 = Wm.copy(), bm.copy()
    vals = []
    for t in (0.5, 1.0, 2.0, 4.0):
        Wm[:] = t * wm0
        bm[:] = t * bm0
        vals.append(sp_theta_value(th, x))
    assert all(vals[i] <= vals[i + 1] + 1e-12 for i in range(len(vals) - 1))
    assert vals[-1] > vals[0]


def test_attribution_matches_finite_differences():
    th = init_theta(5, 2, 4, seed=5, hidden=8)
    x = np.array([0.7, -0.3, 0.5, 1.1, -0.9])
    a = attribution_matrix(th, x)
    eps = 1e-6
    for s in range(5):
        for m in range(4):
            xp, xm = x.copy(), x.copy()
            xp[s] += eps
            xm[s] -= eps
            d = (forward(th, xp).marker_logits[0, m]
                 - forward(th, xm).marker_logits[0, m]) / (2 * eps)
            assert a[s, m] == pytest.approx(x[s] * d, rel=1e-5, abs=1e-9)


def test_interpret_zero_input_has_no_rationale():
    th = init_theta(4, 2, 4, seed=6)
    out = interpret(th, np.zeros(4), ["f0", "f1", "f2", "f3"], [1, 1, 1, 1])
    assert all(t is None for t in out.top_feats)
    assert all(len(r) == 0 for r in out.rationales)


def test_interpret_single_live_feature_dominates():
    th = init_theta(3, 2, 4, seed=7)
    x = np.array([0.0, 2.0, 0.0])
    out = interpret(th, x, ["a", "b", "c"], [1, 1, 1])
    for m, top in enumerate(out.top_feats):
        assert top is not None
        name, sign = top
        assert name == "b"
        a = attribution_matrix(th, x)
        assert sign == (1 if a[1, m] > 0 else -1)


def test_interpret_caps_rationale_length():
    th = init_theta(20, 2, 4, seed=8)
    x = np.linspace(0.1, 2.0, 20)
    out = interpret(th, x, [f"f{i}" for i in range(20)], [1] * 20)
    assert all(len(r) <= 8 for r in out.rationales)
    # stored in decreasing |contribution|
    for r in out.rationales:
        mags = [abs(v) for _, v in r]
        assert mags == sorted(mags, reverse=True)


def test_target_clarity_reference_points():
    r, sp = target_clarity(np.array([0.75, 0.25]))
    assert r == pytest.approx(0.5)
    assert sp == pytest.approx(0.5, abs=1e-12)
    r, sp = target_clarity(np.array([1.0, 0.0]))
    assert r == pytest.approx(1.0)
    assert sp == pytest.approx(0.9525741268224334, abs=1e-12)
    r, sp = target_clarity(np.array([0.5, 0.5]))
    assert r == pytest.approx(0.0)
    assert sp == pytest.approx(0.0474258731775668, abs=1e-12)


def test_target_clarity_regression_mode():
    r, sp = target_clarity(np.array(1.0), truth=1.0, mode="regression")
    assert r == pytest.approx(1.0)
    r2, _ = target_clarity(np.array(3.0), truth=1.0, mode="regression")
    # huber(2) with delta 1 = 1.5 -> exp(-1.5)
    assert r2 == pytest.approx(np.exp(-1.5))
    with pytest.raises(ValueError):
        target_clarity(np.array(1.0), mode="regression")
    with pytest.raises(ValueError):
        target_clarity(np.array([0.5, 0.5]), mode="nonsense")


def _toy_batch(seed, d=4, h=8, c=3, k=5, n=6):
    rng = np.random.default_rng(seed)
    th = init_theta(d, c, k, seed=seed, hidden=h)
    x = rng.normal(0, 1, (n, d))
    labels = rng.integers(0, c, n)
    sp_targets = rng.uniform(0.2, 0.9, n)
    masks = draw_masks(rng, n, h)
    x_jit = x + 0.01 * rng.normal(0, 1, (n, d))
    return th, x, labels, sp_targets, masks, x_jit


def test_loss_grad_matches_finite_differences_small():
    # ten-parameter network: every coordinate individually checkable
    rng = np.random.default_rng(9)
    th = init_theta(1, 2, 2, seed=9, hidden=1)
    x = rng.normal(0, 1, (5, 1))
    labels = rng.integers(0, 2, 5)
    sp_targets = rng.uniform(0.2, 0.9, 5)
    masks = draw_masks(rng, 5, 1)
    x_jit = x + 0.01 * rng.normal(0, 1, (5, 1))
    assert th.size() == 10

    def total():
        parts, _ = loss_and_grad(th, x, labels, sp_targets, masks, x_jit)
        return parts.total

    _, g = loss_and_grad(th, x, labels, sp_targets, masks, x_jit)
    fd = _central_diff(total, th.vec)
    assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-6


def test_loss_grad_matches_finite_differences_full():
    th, x, labels, sp_targets, masks, x_jit = _toy_batch(10)

    def total():
        parts, _ = loss_and_grad(th, x, labels, sp_targets, masks, x_jit,
                                 lam_v=0.5, gamma_reg=0.1)
        return parts.total

    _, g = loss_and_grad(th, x, labels, sp_targets, masks, x_jit,
                         lam_v=0.5, gamma_reg=0.1)
    fd = _central_diff(total, th.vec)
    rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
    assert rel < 1e-3  # analytic-vs-numeric gradient agreement
    assert rel < 1e-6  # and in practice far tighter


def test_diversity_term_reference_values():
    # marker head forced one-hot: bias 100 on marker 0, everything else zero
    th = Theta(d=2, n_classes=2, n_markers=4, hidden=2)
    _, _, _, _, _, bm = th.views()
    bm[0] = 100.0
    rng = np.random.default_rng(11)
    x = rng.normal(0, 1, (4, 2))
    labels = np.array([0, 1, 0, 1])
    masks = np.ones((4, 2))
    parts, _ = loss_and_grad(th, x, labels, np.full(4, 0.5), masks, x.copy())
    assert parts.div == pytest.approx(np.log(4), abs=1e-12)

    # all-zero parameters: exactly uniform markers, divergence exactly zero
    th0 = Theta(d=2, n_classes=2, n_markers=4, hidden=2)
    parts0, _ = loss_and_grad(th0, x, labels, np.full(4, 0.5), masks, x.copy())
    assert parts0.div == pytest.approx(0.0, abs=1e-12)


def test_training_reduces_loss_and_fits_separable_data():
    rng = np.random.default_rng(12)
    n = 128
    d = 6
    x = rng.normal(0, 0.3, (n, d))
    labels = rng.integers(0, 2, n)
    x[:, 0] += np.where(labels == 1, 1.5, -1.5)
    th = init_theta(d, 2, 8, seed=12)
    report = train(th, x, labels, epochs=10, seed=13)
    assert report.epochs[-1]["total"] < report.epochs[0]["total"]
    assert accuracy(th, x, labels) >= 0.98
    assert report.steps == len(report.recorded_targets)


def test_targets_recorded_before_step():
    rng = np.random.default_rng(14)
    n = 16
    x = rng.normal(0, 1, (n, 3))
    labels = rng.integers(0, 2, n)
    th = init_theta(3, 2, 4, seed=14)
    before = th.copy()
    report = train(th, x, labels, epochs=1, seed=15, batch=n)
    # replicate the single batch's row order
    order = np.random.default_rng(15).permutation(n)
    det = forward(before, x[order])
    expected = np.array([target_clarity(row)[1] for row in det.y])
    assert np.allclose(report.recorded_targets[0], expected, atol=0)
    # post-step network yields different targets: they were constants
    det_after = forward(th, x[order])
    after = np.array([target_clarity(row)[1] for row in det_after.y])
    assert np.max(np.abs(after - expected)) > 0


def test_non_finite_loss_aborts_with_diagnostics():
    rng = np.random.default_rng(16)
    th = init_theta(3, 2, 4, seed=16)
    th.vec[0] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(th, rng.normal(0, 1, (8, 3)), rng.integers(0, 2, 8), epochs=1, seed=16)
    assert "epoch" in err.value.diagnostics
    assert "parts" in err.value.diagnostics


def test_theta_round_trip_and_schema_guard():
    th = init_theta(5, 3, 6, seed=17)
    th.version = 9
    th.temperature = 1.5
    back = Theta.from_json(th.to_json())
    assert back.d == th.d and back.n_classes == th.n_classes
    assert back.n_markers == th.n_markers and back.hidden == th.hidden
    assert back.version == 9 and back.temperature == 1.5
    assert np.array_equal(back.vec, th.vec)

    bad = json.loads(th.to_json())
    bad["schema"] = "other/1"
    with pytest.raises(ValueError):
        Theta.from_json(json.dumps(bad))
    tampered = json.loads(th.to_json())
    tampered["d"] = th.d + 1
    with pytest.raises(ValueError):
        Theta.from_json(json.dumps(tampered))


def test_views_share_memory_with_flat_vector():
    th = init_theta(3, 2, 4, seed=18)
    W1, b1, Wt, bt, Wm, bm = th.views()
    th.vec[0] = 123.456
    assert W1[0, 0] == 123.456
    bm[-1] = -9.0
    assert th.vec[-1] == -9.0
