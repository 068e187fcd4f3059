"""Evaluation harness: batch episode sweeps, discrimination metrics,
stability experiments, and deterministic run reports.

The batch path freezes the trained parameters and replays the evaluation
stream as independent episodes (pure functions of window, parameters, and
seed), which is what the compute-allocation and selective-prediction
metrics are defined over. The closed-loop path runs the same stream through
a live session and writes the audit trail, the gap-energy series, and the
descent diagnostics. Two synthetic experiments round it out: a quadratic
toy that checks the controller's descent guarantee arm by arm, and an
oracle-feedback race that measures whether a well-scheduled human channel
actually shortens convergence.

Every run artifact except wall-clock timings is a deterministic function of
(preset, seed), and reports exclude timings from their canonical form so
repeated runs can be compared byte for byte.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import os
import time

import numpy as np
import scipy.stats

from .controller import estimate_curvature, gain_budget, monitor
from .controller import ControllerState, rollback_check
from .controller import step as controller_step
from .decomp import decompose
from .mcloop import fixed_k, run_episode
from .presets import Artifacts, Preset, build_artifacts, eval_windows, get_preset
from .session import Session, audit_line
from .sigsim import write_stream
from .spcore import Calibrator

log = logging.getLogger(__name__)

REPORT_SCHEMA = "sci.report/1"
COVERAGE_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
FIXED_KS = (1, 2, 4, 8, 16)
PAIR_LIMIT = 10_000
EPISODE_STREAM = 29        # rng tag for batch episodes
FIXED_STREAM = 31          # rng tag for fixed-budget baselines


# ---------------------------------------------------------------------------
# Discrimination metrics


def auroc_pairs(err_scores, cor_scores) -> float:
    """P(error score > correct score) by exhaustive pair counting, ties 0.5."""
    err = np.asarray(err_scores, dtype=np.float64)
    cor = np.asarray(cor_scores, dtype=np.float64)
    if err.size == 0 or cor.size == 0:
        raise ValueError("need at least one score on each side")
    wins = 0.0
    for e in err:
        wins += np.sum(e > cor) + 0.5 * np.sum(e == cor)
    return float(wins / (err.size * cor.size))


def auroc_ranksum(err_scores, cor_scores) -> float:
    """Same statistic via midranks: U / (n_e * n_c) with average-tied ranks."""
    err = np.asarray(err_scores, dtype=np.float64)
    cor = np.asarray(cor_scores, dtype=np.float64)
    if err.size == 0 or cor.size == 0:
        raise ValueError("need at least one score on each side")
    ranks = scipy.stats.rankdata(np.concatenate([err, cor]))
    u = float(np.sum(ranks[: err.size])) - err.size * (err.size + 1) / 2.0
    return u / (err.size * cor.size)


def auroc(err_scores, cor_scores) -> float:
    """Dispatch: exact pair counting when cheap, midrank form otherwise."""
    n = len(err_scores) * len(cor_scores)
    if n <= PAIR_LIMIT:
        return auroc_pairs(err_scores, cor_scores)
    return auroc_ranksum(err_scores, cor_scores)


def risk_coverage(scores, correct, ids, coverages=COVERAGE_GRID) -> list[dict]:
    """Selective error at each coverage, keeping the lowest-score episodes.

    Ties in score break by episode id so the curve is reproducible. At each
    coverage c the first round(c * n) episodes are kept and the error rate
    among them reported (None when nothing is kept).
    """
    order = sorted(range(len(scores)), key=lambda i: (scores[i], ids[i]))
    n = len(order)
    out = []
    for c in coverages:
        kept = int(np.floor(c * n + 0.5))
        kept = min(kept, n)
        if kept == 0:
            out.append({"coverage": c, "kept": 0, "error": None})
            continue
        errs = sum(0 if correct[i] else 1 for i in order[:kept])
        out.append({"coverage": c, "kept": kept, "error": errs / kept})
    return out


def allocation_stats(steps_correct, steps_wrong) -> dict:
    """Mean episode length on each side; the ratio needs both sides present."""
    out: dict = {}
    if len(steps_correct) > 0:
        out["mean_steps_correct"] = float(np.mean(steps_correct))
    if len(steps_wrong) > 0:
        out["mean_steps_wrong"] = float(np.mean(steps_wrong))
    if "mean_steps_correct" in out and "mean_steps_wrong" in out:
        if out["mean_steps_correct"] > 0:
            out["ratio"] = out["mean_steps_wrong"] / out["mean_steps_correct"]
    return out


# ---------------------------------------------------------------------------
# Batch episode sweeps


def episode_rows(art: Artifacts, windows) -> list[dict]:
    """Adaptive episodes over the evaluation stream with frozen parameters."""
    cfg = art.preset.decomp_config(projection=art.projection)
    rows = []
    for w in windows:
        feats = decompose(w, cfg)
        x = art.normalizer.apply(np.concatenate([f.value for f in feats]))
        rng = np.random.default_rng([art.seed, EPISODE_STREAM, w.seq])
        ep = run_episode(art.theta, x, art.preset.policy, seed=rng,
                         label=w.label, seq=w.seq)
        rows.append({
            "seq": w.seq,
            "label": w.label,
            "prediction": ep.prediction,
            "correct": bool(ep.correct),
            "outcome": ep.outcome,
            "steps_used": ep.steps_used,
            "sp_final": ep.sp_final,
            "safety_gap": ep.delta_sp_final,
        })
    return rows


def fixed_rows(art: Artifacts, windows, k: int) -> list[dict]:
    """Fixed-budget baseline at exactly k passes per window."""
    cfg = art.preset.decomp_config(projection=art.projection)
    rows = []
    for w in windows:
        feats = decompose(w, cfg)
        x = art.normalizer.apply(np.concatenate([f.value for f in feats]))
        rng = np.random.default_rng([art.seed, FIXED_STREAM, k, w.seq])
        ep = fixed_k(art.theta, x, k, seed=rng, label=w.label)
        rows.append({
            "seq": w.seq,
            "label": w.label,
            "prediction": ep.prediction,
            "correct": bool(ep.correct),
            "steps_used": ep.steps_used,
        })
    return rows


def seed_metrics(rows: list[dict], fixed_by_k: dict[int, list[dict]],
                 count_abstain_as_error: bool = True) -> dict:
    """All per-seed batch metrics from the episode tables."""
    n = len(rows)
    abstained = [r for r in rows if r["outcome"] == "abstained"]
    strict_err = [
        (not r["correct"]) or r["outcome"] == "abstained" for r in rows
    ]
    pred_err = [not r["correct"] for r in rows]
    err_flags = strict_err if count_abstain_as_error else pred_err

    scores = [r["safety_gap"] for r in rows]
    ids = [r["seq"] for r in rows]

    err_scores = [s for s, e in zip(scores, err_flags) if e]
    cor_scores = [s for s, e in zip(scores, err_flags) if not e]
    auroc_strict = auroc(err_scores, cor_scores) if err_scores and cor_scores else None

    stopped = [r for r in rows if r["outcome"] == "stopped"]
    exc_err = [r["safety_gap"] for r in stopped if not r["correct"]]
    exc_cor = [r["safety_gap"] for r in stopped if r["correct"]]
    auroc_excluded = auroc(exc_err, exc_cor) if exc_err and exc_cor else None

    steps_correct = [r["steps_used"] for r, e in zip(rows, err_flags) if not e]
    steps_wrong = [r["steps_used"] for r, e in zip(rows, err_flags) if e]

    rc = risk_coverage(scores, [not e for e in err_flags], ids)

    fixed_table = {}
    for k, fr in sorted(fixed_by_k.items()):
        fixed_table[str(k)] = {
            "accuracy": float(np.mean([r["correct"] for r in fr])),
            "mean_steps": float(k),
        }

    return {
        "n": n,
        "n_errors": int(sum(err_flags)),
        "error_rate": float(np.mean(err_flags)),
        "prediction_error_rate": float(np.mean(pred_err)),
        "abstention_rate": len(abstained) / n if n else 0.0,
        "allocation": allocation_stats(steps_correct, steps_wrong),
        "auroc": auroc_strict,
        "auroc_abstain_excluded": auroc_excluded,
        "n_errors_excluded": len(exc_err),
        "risk_coverage": rc,
        "sci": {
            "accuracy": float(np.mean([r["correct"] for r in rows])),
            "accuracy_strict": float(np.mean([not e for e in err_flags])),
            "mean_steps": float(np.mean([r["steps_used"] for r in rows])),
        },
        "fixed_k": fixed_table,
    }


# ---------------------------------------------------------------------------
# Closed-loop run over the evaluation stream


def session_run(art: Artifacts, windows, out_dir: str | None = None) -> dict:
    """Drive a live session over the stream; write audit + gap-energy files."""
    sess = Session(art)
    records = []
    for w in windows:
        records.append(sess.cycle(w))

    if out_dir is not None:
        tag = f"{art.preset.name}_{art.seed}"
        audit_path = os.path.join(out_dir, f"audit_{tag}.ndjson")
        with open(audit_path, "w") as fh:
            for rec in records:
                fh.write(audit_line(rec) + "\n")
        csv_path = os.path.join(out_dir, f"lyapunov_{tag}.csv")
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["seq", "v", "event"])
            for rec in records:
                wr.writerow([rec["seq"], repr(rec["v"]), rec["event"]])

    vs = np.array([rec["v"] for rec in records])
    events = ["init"] + [rec["event"] for rec in records[:-1]]
    diag = monitor(vs, events, sess.cstate.eta,
                   estimate_curvature(sess.cstate, default=1.0))
    return {
        "n_cycles": len(records),
        "final_sp": records[-1]["sp"] if records else None,
        "mean_sp": float(np.mean([rec["sp"] for rec in records])) if records else None,
        "monitor": diag,
        "event_counts": {
            e: sum(1 for rec in records if rec["event"] == e)
            for e in sorted({rec["event"] for rec in records})
        },
    }


# ---------------------------------------------------------------------------
# Preset runs and reports


def run_seed(preset: Preset, seed: int, out_dir: str | None = None,
             n_eval: int | None = None) -> dict:
    """Everything for one (preset, seed): build, sweep, closed loop, metrics."""
    t0 = time.perf_counter()
    art = build_artifacts(preset, seed)
    windows = eval_windows(preset, seed, n=n_eval)

    rows = episode_rows(art, windows)
    fixed_by_k = {k: fixed_rows(art, windows, k) for k in FIXED_KS}
    metrics = seed_metrics(rows, fixed_by_k,
                           count_abstain_as_error=preset.count_abstain_as_error)
    metrics["train_accuracy"] = art.train_accuracy
    metrics["cal_accuracy"] = art.cal_accuracy
    metrics["marker_map"] = {str(k): v for k, v in sorted(art.marker_map.items())}

    if out_dir is not None:
        tag = f"{preset.name}_{seed}"
        cfg = dataclasses.replace(preset.stream, seed=seed)
        write_stream(os.path.join(out_dir, f"stream_{tag}.ndjson"), windows, cfg)
        with open(os.path.join(out_dir, f"episodes_{tag}.ndjson"), "w") as fh:
            for r in rows:
                fh.write(audit_line(r) + "\n")

    metrics["session"] = session_run(art, windows, out_dir)
    metrics["wall_clock_s"] = time.perf_counter() - t0
    return metrics


def run_preset(name: str, seeds, out_dir: str | None = None,
               n_eval: int | None = None) -> dict:
    """Full multi-seed run; writes report.json when out_dir is given."""
    preset = get_preset(name)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    per_seed = {}
    for seed in seeds:
        log.info("running preset %s seed %d", name, seed)
        per_seed[str(seed)] = run_seed(preset, seed, out_dir, n_eval=n_eval)

    vals = list(per_seed.values())
    aurocs = [m["auroc"] for m in vals if m["auroc"] is not None]
    ratios = [m["allocation"].get("ratio") for m in vals]
    ratios = [r for r in ratios if r is not None]
    msc = [m["allocation"].get("mean_steps_correct") for m in vals]
    msw = [m["allocation"].get("mean_steps_wrong") for m in vals]
    msc = [v for v in msc if v is not None]
    msw = [v for v in msw if v is not None]

    halves = []
    fulls = []
    for m in vals:
        rc = {p["coverage"]: p["error"] for p in m["risk_coverage"]}
        if rc.get(0.5) is not None and rc.get(1.0) is not None:
            halves.append(rc[0.5])
            fulls.append(rc[1.0])

    aggregate = {
        "mean_error_rate": float(np.mean([m["error_rate"] for m in vals])),
        "pooled_errors": int(sum(m["n_errors"] for m in vals)),
        "mean_auroc": float(np.mean(aurocs)) if aurocs else None,
        "mean_steps_correct": float(np.mean(msc)) if msc else None,
        "mean_steps_wrong": float(np.mean(msw)) if msw else None,
        "allocation_ratio": (
            float(np.mean(msw) / np.mean(msc)) if msc and msw and np.mean(msc) > 0 else None
        ),
        "mean_abstention_rate": float(np.mean([m["abstention_rate"] for m in vals])),
        "error_at_half_coverage": float(np.mean(halves)) if halves else None,
        "error_at_full_coverage": float(np.mean(fulls)) if fulls else None,
        "mean_sci_accuracy": float(np.mean([m["sci"]["accuracy"] for m in vals])),
        "mean_sci_steps": float(np.mean([m["sci"]["mean_steps"] for m in vals])),
        "mean_fixed16_accuracy": float(
            np.mean([m["fixed_k"]["16"]["accuracy"] for m in vals])
        ),
        "mean_descent_violation_fraction": float(
            np.mean([m["session"]["monitor"]["fraction"] for m in vals])
        ),
    }

    report = {
        "schema": REPORT_SCHEMA,
        "preset": name,
        "seeds": [int(s) for s in seeds],
        "per_seed": per_seed,
        "aggregate": aggregate,
        "wall_clock_s": time.perf_counter() - t0,
    }
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(strip_volatile(report), fh, sort_keys=True, indent=1)
            fh.write("\n")
    return report


def strip_volatile(obj):
    """Drop wall-clock entries so reports compare byte for byte."""
    if isinstance(obj, dict):
        return {
            k: strip_volatile(v)
            for k, v in obj.items()
            if not str(k).startswith("wall_clock")
        }
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def load_report(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "report.json")) as fh:
        return json.load(fh)


def render_report(report: dict) -> str:
    """Plain-text summary of a run report."""
    lines = []
    agg = report["aggregate"]
    lines.append(f"preset: {report['preset']}   seeds: {report['seeds']}")
    lines.append(f"error rate (abstain counted): {agg['mean_error_rate']:.4f}"
                 f"   pooled errors: {agg['pooled_errors']}")
    if agg.get("mean_auroc") is not None:
        lines.append(f"safety-gap AUROC (seed mean): {agg['mean_auroc']:.4f}")
    if agg.get("allocation_ratio") is not None:
        lines.append(
            "steps correct/wrong: "
            f"{agg['mean_steps_correct']:.2f} / {agg['mean_steps_wrong']:.2f}"
            f"   ratio: {agg['allocation_ratio']:.2f}"
        )
    if agg.get("error_at_half_coverage") is not None:
        lines.append(
            f"selective error at 50% coverage: {agg['error_at_half_coverage']:.4f}"
            f"   (full coverage {agg['error_at_full_coverage']:.4f})"
        )
    lines.append(
        f"adaptive accuracy {agg['mean_sci_accuracy']:.4f} at "
        f"{agg['mean_sci_steps']:.2f} mean passes; fixed-16 accuracy "
        f"{agg['mean_fixed16_accuracy']:.4f}"
    )
    lines.append(
        f"abstention rate: {agg['mean_abstention_rate']:.4f}   "
        f"descent violations: {agg['mean_descent_violation_fraction']:.4f}"
    )
    lines.append("")
    lines.append("per seed:")
    for seed, m in sorted(report["per_seed"].items(), key=lambda kv: int(kv[0])):
        al = m["allocation"]
        ratio = f"{al['ratio']:.2f}" if "ratio" in al else "n/a"
        au = f"{m['auroc']:.3f}" if m["auroc"] is not None else "n/a"
        lines.append(
            f"  seed {seed}: err {m['error_rate']:.3f} ({m['n_errors']}), "
            f"auroc {au}, steps ratio {ratio}, "
            f"mean steps {m['sci']['mean_steps']:.2f}, "
            f"abstain {m['abstention_rate']:.3f}"
        )
    lines.append("")
    lines.append("fixed-budget sweep (accuracy @ passes), seed means:")
    ks = sorted({int(k) for m in report["per_seed"].values() for k in m["fixed_k"]})
    for k in ks:
        acc = float(np.mean([m["fixed_k"][str(k)]["accuracy"]
                             for m in report["per_seed"].values()]))
        lines.append(f"  k={k:>2}: {acc:.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Quadratic descent toy


def lyapunov_toy(n_seeds: int = 20, n_steps: int = 500, dim: int = 8,
                 gain_mode: str = "zero", base_seed: int = 0) -> dict:
    """Controller descent check on a noiseless quadratic clarity surface.

    gain_mode "zero" runs pure self-regulation; "budget" adds a random unit
    human direction every step at 90% of the current stability budget, with
    probes feeding the gain estimator exactly as a live session would.
    """
    if gain_mode not in ("zero", "budget"):
        raise ValueError("gain_mode must be 'zero' or 'budget'")
    per_seed = []
    pooled_v = 0
    pooled_e = 0
    for s in range(n_seeds):
        rng = np.random.default_rng([base_seed, 41, s])
        theta_star = rng.normal(0.0, 1.0, dim)
        off = rng.normal(0.0, 1.0, dim)
        off *= 0.8 / np.linalg.norm(off)
        state = ControllerState(theta=theta_star + off)

        def sp_fn(vec):
            return 1.0 - 0.5 * float(np.sum((vec - theta_star) ** 2))

        sp_star = 1.0
        vs = [0.5 * (sp_star - sp_fn(state.theta)) ** 2]
        names = ["init"]
        for _ in range(n_steps):
            sp = sp_fn(state.theta)
            delta = sp_star - sp
            grad = -(state.theta - theta_star)
            if gain_mode == "budget":
                u = rng.normal(0.0, 1.0, dim)
                u /= np.linalg.norm(u)
                probe = state.theta + 1e-2 * u
                state.note_probe(abs(sp_fn(probe) - sp) / 1e-2)
                lam = 0.9 * gain_budget(state)
            else:
                u = None
                lam = 0.0
            ev = controller_step(state, delta, grad, u, lam, 0.0, sp, sp_fn)
            rb = rollback_check(state)
            names.append(rb["event"] if rb is not None else ev["event"])
            vs.append(0.5 * (sp_star - sp_fn(state.theta)) ** 2)
        diag = monitor(np.array(vs), names, state.eta, 1.0)
        per_seed.append(diag["fraction"])
        pooled_v += diag["violations"]
        pooled_e += diag["eligible"]
    return {
        "gain_mode": gain_mode,
        "per_seed_fraction": per_seed,
        "pooled_fraction": pooled_v / pooled_e if pooled_e else 0.0,
        "pooled_violations": pooled_v,
        "pooled_eligible": pooled_e,
    }


# ---------------------------------------------------------------------------
# Oracle-feedback convergence race


def feedback_convergence(n_seeds: int = 20, max_cycles: int = 300,
                         threshold: float = 0.05, base_seed: int = 500,
                         eta: float = 0.25, lambda_on: float = 0.3) -> dict:
    """Median cycles to close the clarity gap, with vs without feedback.

    Each seed trains a deliberately under-fit model on a separable,
    near-noiseless stream, then races two sessions over the same windows:
    one receives oracle feedback every cycle (confirm the true class's
    marker; deny the displayed marker when it is wrong) at the configured
    gain, the other runs pure self-regulation. The stream is kept almost
    deterministic so the per-window aggregate barely fluctuates and the
    race is decided by the parameter trajectory, not by a lucky window;
    the larger step size gives the correction term enough travel per cycle
    to tell the two arms apart within the horizon. A session that never
    reaches |gap| < threshold scores max_cycles + 1 (censored).
    """
    preset = get_preset("synthetic-class")
    small = dataclasses.replace(
        preset,
        stream=dataclasses.replace(preset.stream, difficulty=0.0,
                                   noise_sigma=0.5),
        n_train=240, n_cal=24, epochs=6, rules_file=None,
    )
    with_fb = []
    without_fb = []
    for i in range(n_seeds):
        seed = base_seed + i
        art = build_artifacts(small, seed)
        art.calibrators = [Calibrator() for _ in range(4)]  # smooth aggregate
        windows = eval_windows(small, seed, n=max_cycles)
        for lam, store, oracle in (
            (lambda_on, with_fb, True),
            (0.0, without_fb, False),
        ):
            a = copy.deepcopy(art)
            sess = Session(a, lambda_h_init=lam, eta=eta)
            hit = max_cycles + 1
            for j, w in enumerate(windows):
                rec = sess.cycle(w)
                if abs(rec["delta_sp"]) < threshold:
                    hit = j + 1
                    break
                if oracle and w.label in a.marker_map:
                    true_m = a.marker_map[w.label]
                    sess.submit_feedback({
                        "event_id": f"oracle-{seed}-{j}",
                        "window_seq": w.seq,
                        "marker_id": true_m,
                        "verdict": "confirm",
                        "severity": 1.0,
                        "theta_version": sess.theta_version,
                        "timestamp": float(j),
                    })
                    shown = int(np.argmax(rec["markers"]))
                    if shown != true_m:
                        sess.submit_feedback({
                            "event_id": f"oracle-deny-{seed}-{j}",
                            "window_seq": w.seq,
                            "marker_id": shown,
                            "verdict": "deny",
                            "severity": 1.0,
                            "theta_version": sess.theta_version,
                            "timestamp": float(j),
                        })
            store.append(hit)
    return {
        "with_feedback": with_fb,
        "without_feedback": without_fb,
        "median_with": float(np.median(with_fb)),
        "median_without": float(np.median(without_fb)),
        "censored_with": int(sum(1 for c in with_fb if c > max_cycles)),
        "censored_without": int(sum(1 for c in without_fb if c > max_cycles)),
    }
