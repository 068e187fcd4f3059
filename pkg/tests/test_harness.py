import json

import numpy as np
import pytest

from sci.harness import (
    COVERAGE_GRID,
    allocation_stats,
    auroc,
    auroc_pairs,
    auroc_ranksum,
    feedback_convergence,
    load_report,
    lyapunov_toy,
    risk_coverage,
    seed_metrics,
    strip_volatile,
)


def test_auroc_reference_three_quarters():
    # pairs: (.8>.5) (.8>.1) (.3<.5) (.3>.1) -> 3 of 4
    err = [0.8, 0.3]
    cor = [0.5, 0.1]
    assert auroc_pairs(err, cor) == pytest.approx(0.75, abs=1e-15)
    assert auroc_ranksum(err, cor) == pytest.approx(0.75, abs=1e-15)


def test_auroc_identical_multisets_is_half():
    vals = [0.2, 0.4, 0.4, 0.9]
    assert auroc_pairs(vals, vals) == pytest.approx(0.5, abs=1e-15)
    assert auroc_ranksum(vals, vals) == pytest.approx(0.5, abs=1e-15)


def test_auroc_perfect_and_inverted():
    assert auroc_pairs([5.0, 6.0], [1.0, 2.0]) == 1.0
    assert auroc_pairs([1.0, 2.0], [5.0, 6.0]) == 0.0


def test_auroc_empty_side_raises():
    with pytest.raises(ValueError):
        auroc_pairs([], [1.0])
    with pytest.raises(ValueError):
        auroc_ranksum([1.0], [])


def test_auroc_pair_count_matches_rank_sum():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ne = rng.integers(1, 30)
        nc = rng.integers(1, 30)
        if rng.random() < 0.5:
            # continuous scores
            err = rng.normal(0.5, 1.0, ne)
            cor = rng.normal(0.0, 1.0, nc)
        else:
            # heavy ties from a small grid
            err = rng.integers(0, 5, ne) / 4.0
            cor = rng.integers(0, 5, nc) / 4.0
        assert abs(auroc_pairs(err, cor) - auroc_ranksum(err, cor)) <= 1e-12


def test_auroc_dispatch_consistent_across_limit():
    rng = np.random.default_rng(1)
    err = rng.normal(1.0, 1.0, 150)
    cor = rng.normal(0.0, 1.0, 150)       # 22500 pairs: rank-sum path
    assert abs(auroc(err, cor) - auroc_pairs(err, cor)) <= 1e-12


def test_risk_coverage_reference_curve():
    # error sits on the highest score; half coverage removes it
    scores = [0.9, 0.7, 0.3, 0.1]
    correct = [False, True, True, True]
    ids = [0, 1, 2, 3]
    rc = risk_coverage(scores, correct, ids, coverages=(0.5, 1.0))
    assert rc[0] == {"coverage": 0.5, "kept": 2, "error": 0.0}
    assert rc[1] == {"coverage": 1.0, "kept": 4, "error": 0.25}


def test_risk_coverage_is_permutation_invariant():
    rng = np.random.default_rng(2)
    scores = list(rng.random(40))
    correct = list(rng.random(40) > 0.3)
    ids = list(range(40))
    base = risk_coverage(scores, correct, ids)
    perm = rng.permutation(40)
    shuffled = risk_coverage([scores[i] for i in perm],
                             [correct[i] for i in perm],
                             [ids[i] for i in perm])
    assert base == shuffled


def test_risk_coverage_full_grid_monotone_kept():
    scores = list(np.linspace(0, 1, 17))
    correct = [True] * 17
    rc = risk_coverage(scores, correct, list(range(17)), COVERAGE_GRID)
    kept = [row["kept"] for row in rc]
    assert kept == sorted(kept)
    assert kept[-1] == 17


def test_allocation_reference_and_missing_sides():
    out = allocation_stats([3], [10])
    assert out["ratio"] == pytest.approx(10.0 / 3.0)
    assert "ratio" not in allocation_stats([], [5])
    assert "ratio" not in allocation_stats([5], [])
    assert allocation_stats([], []) == {}


def _row(seq, correct, outcome, gap, steps):
    return {"seq": seq, "correct": correct, "outcome": outcome,
            "safety_gap": gap, "steps_used": steps, "label": 0,
            "prediction": 0, "sp_final": 0.9}


def test_seed_metrics_hand_case():
    rows = [
        _row(0, True, "stopped", 0.05, 3),
        _row(1, True, "stopped", 0.02, 4),
        _row(2, False, "stopped", 0.40, 20),
        _row(3, True, "abstained", 0.80, 25),
    ]
    fixed = {4: [_row(i, i != 2, "fixed", 0.1, 4) for i in range(4)]}
    m = seed_metrics(rows, fixed, count_abstain_as_error=True)
    assert m["n"] == 4
    assert m["n_errors"] == 2                    # miss + abstention
    assert m["error_rate"] == 0.5
    assert m["prediction_error_rate"] == 0.25
    assert m["abstention_rate"] == 0.25
    assert m["sci"]["accuracy"] == 0.75
    assert m["sci"]["mean_steps"] == pytest.approx(13.0)
    assert m["allocation"]["ratio"] == pytest.approx(22.5 / 3.5)
    assert m["fixed_k"]["4"] == {"accuracy": 0.75, "mean_steps": 4.0}
    # gaps separate perfectly here
    assert m["auroc"] == 1.0


def test_seed_metrics_abstain_flag_flips_error_rate():
    rows = [
        _row(0, True, "stopped", 0.1, 3),
        _row(1, True, "abstained", 0.9, 25),
    ]
    strict = seed_metrics(rows, {}, count_abstain_as_error=True)
    soft = seed_metrics(rows, {}, count_abstain_as_error=False)
    assert strict["error_rate"] == 0.5
    assert soft["error_rate"] == 0.0


def test_strip_volatile_removes_clocks_recursively():
    rep = {"wall_clock_s": 1.0,
           "a": {"wall_clock_s": 2.0, "keep": 1},
           "b": [{"wall_clock_ms": 3.0, "x": 2}]}
    out = strip_volatile(rep)
    assert out == {"a": {"keep": 1}, "b": [{"x": 2}]}


def test_load_report_round_trip(tmp_path):
    report = {"preset": "x", "seeds": [1], "aggregate": {}, "per_seed": {}}
    (tmp_path / "report.json").write_text(json.dumps(report))
    assert load_report(str(tmp_path)) == report


def test_lyapunov_toy_zero_gain_descends():
    out = lyapunov_toy(n_seeds=3, n_steps=120, gain_mode="zero")
    assert out["gain_mode"] == "zero"
    assert len(out["per_seed_fraction"]) == 3
    assert out["pooled_fraction"] < 0.05


def test_lyapunov_toy_budget_gain_descends():
    out = lyapunov_toy(n_seeds=3, n_steps=120, gain_mode="budget")
    assert out["pooled_fraction"] < 0.10


def test_lyapunov_toy_rejects_unknown_mode():
    with pytest.raises(ValueError):
        lyapunov_toy(n_seeds=1, n_steps=10, gain_mode="both")


def test_feedback_convergence_single_seed_structure():
    out = feedback_convergence(n_seeds=1)
    assert len(out["with_feedback"]) == 1
    assert len(out["without_feedback"]) == 1
    assert out["censored_with"] == 0
    assert out["censored_without"] == 0
    # the guided arm wins on this seed (full 20-seed claim lives in the
    # acceptance suite)
    assert out["median_with"] < out["median_without"]
