"""Clarity-gated sequential inference over dropout passes.

For one input, draw one stochastic pass per step, maintain the running mean
of the predictive distributions, and after each step score

    SP(t) = 1 - H(p_mean_t) / log K_classes.

The episode stops once SP(t) has met the target for ``patience`` consecutive
steps ("stopped"), or gives up at ``t_max`` passes ("abstained"); at least
one pass is always spent. Easy inputs therefore cost a couple of passes and
ambiguous ones run long, which is the compute-allocation behavior the
harness measures. The terminal target gap |SP* - SP| doubles as a safety
score for selective prediction: abstentions and barely-stopped episodes
carry large gaps.

Scoring on the running mean is the default; ``sp_on="pass"`` scores each
step's own distribution instead (higher variance, kept for comparison).
The fixed-budget baseline spends exactly K passes with no feedback.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .interpreter import Theta, stochastic_pass
from .spcore import clarity


@dataclasses.dataclass(frozen=True)
class EpisodePolicy:
    sp_star: float = 0.85
    t_max: int = 25
    patience: int = 3
    sp_on: str = "mean"        # "mean": running-mean entropy; "pass": per-pass

    def __post_init__(self) -> None:
        if self.t_max < 1 or self.patience < 1:
            raise ValueError("t_max and patience must be >= 1")
        if self.sp_on not in ("mean", "pass"):
            raise ValueError("sp_on must be 'mean' or 'pass'")


@dataclasses.dataclass
class Episode:
    steps_used: int
    outcome: str               # "stopped" | "abstained"
    prediction: int
    p_mean: np.ndarray
    sp_final: float
    delta_sp_final: float      # |sp_star - sp_final|
    sp_trace: list[float]
    passes: list[np.ndarray]
    label: int | None = None
    correct: bool | None = None
    seq: int | None = None


def episode_safety_score(ep: Episode) -> float:
    """Terminal target gap; larger means less trustworthy."""
    return ep.delta_sp_final


def run_episode(
    theta: Theta,
    x: np.ndarray,
    policy: EpisodePolicy,
    seed: int | np.random.Generator = 0,
    label: int | None = None,
    seq: int | None = None,
) -> Episode:
    """Run one clarity-gated episode; fully determined by (theta, x, policy, seed)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p_sum = np.zeros(theta.n_classes)
    sp_trace: list[float] = []
    passes: list[np.ndarray] = []
    hits = 0
    outcome = "abstained"
    t = 0
    while t < policy.t_max:
        t += 1
        p_t = stochastic_pass(theta, x, rng).y[0]
        passes.append(p_t)
        p_sum += p_t
        p_mean = p_sum / t
        sp = clarity(p_mean if policy.sp_on == "mean" else p_t)
        sp_trace.append(sp)
        if sp >= policy.sp_star:
            hits += 1
            if hits >= policy.patience:
                outcome = "stopped"
                break
        else:
            hits = 0
    p_mean = p_sum / t
    sp_final = sp_trace[-1]
    pred = int(np.argmax(p_mean))
    return Episode(
        steps_used=t,
        outcome=outcome,
        prediction=pred,
        p_mean=p_mean,
        sp_final=sp_final,
        delta_sp_final=abs(policy.sp_star - sp_final),
        sp_trace=sp_trace,
        passes=passes,
        label=label,
        correct=None if label is None else (pred == label),
        seq=seq,
    )


def fixed_k(
    theta: Theta,
    x: np.ndarray,
    k: int,
    seed: int | np.random.Generator = 0,
    label: int | None = None,
) -> Episode:
    """Fixed-budget baseline: exactly k passes, mean prediction, no gating."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p_sum = np.zeros(theta.n_classes)
    passes = []
    for _ in range(k):
        p_t = stochastic_pass(theta, x, rng).y[0]
        passes.append(p_t)
        p_sum += p_t
    p_mean = p_sum / k
    pred = int(np.argmax(p_mean))
    sp_final = clarity(p_mean)
    return Episode(
        steps_used=k,
        outcome="stopped",
        prediction=pred,
        p_mean=p_mean,
        sp_final=sp_final,
        delta_sp_final=abs(1.0 - sp_final),
        sp_trace=[sp_final],
        passes=passes,
        label=label,
        correct=None if label is None else (pred == label),
    )
