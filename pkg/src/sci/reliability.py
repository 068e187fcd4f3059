"""Per-feature reliability scoring and soft routing weights.

Each feature f gets a score

    z_f = log(SNR_f) + alpha * Pers_f + beta * Coh_f

with alpha = 0.3 and beta = 0.4. SNR is a robust energy-to-noise ratio over a
trailing window of recent feature values (median energy over a MAD-based
noise floor, both floored at 1e-12 before the log). Pers is lag-1
autocorrelation of the same trailing window mapped onto [0, 1]. Coh is the
feature's associated cross-channel coherence (1.0 when the feature has no
pair, e.g. the compact projections).

Scores become simplex weights through a temperature softmax (gamma = 2.0,
max-subtracted for stability) and the published weights move by a rate-
limited EMA: per step the raw EMA delta is clipped to +/- max_delta per
coordinate and the result renormalized onto the simplex. Renormalization can
add slack on top of the clip, bounded by another max_delta at the default
rates; the post-update assertion uses 2 * max_delta. Failed features are
masked to zero weight and the remainder renormalized.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from typing import Sequence

import numpy as np

from .decomp import Feature

ALPHA_PERS = 0.3
BETA_COH = 0.4
GAMMA_TEMP = 2.0
EMA_ALPHA = 0.1
MAX_DELTA = 0.05
TRAIL_LEN = 16
FLOOR = 1e-12


def combine_score(snr: float, pers: float, coh: float,
                  alpha: float = ALPHA_PERS, beta: float = BETA_COH) -> float:
    """z = log(max(snr, floor)) + alpha * pers + beta * coh."""
    return float(np.log(max(snr, FLOOR)) + alpha * pers + beta * coh)


def softmax_weights(z: np.ndarray, gamma: float = GAMMA_TEMP) -> np.ndarray:
    """Temperature softmax with max subtraction; returns a simplex vector."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(gamma * (z - np.max(z)))
    return e / np.sum(e)


def snr_estimate(values: np.ndarray) -> float:
    """Robust energy over a MAD noise floor for one feature's trail."""
    v = np.asarray(values, dtype=np.float64)
    energy = float(np.median(np.abs(v))) ** 2
    med = float(np.median(v))
    mad = float(np.median(np.abs(v - med)))
    return max(energy, FLOOR) / max(mad * mad, FLOOR)


def persistence_estimate(values: np.ndarray) -> float:
    """Lag-1 autocorrelation of the trail mapped onto [0, 1]; 0.5 if too short."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 4:
        return 0.5
    a, b = v[:-1], v[1:]
    sa, sb = a.std(), b.std()
    if sa < FLOOR or sb < FLOOR:
        return 0.5
    rho = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return 0.5 * (np.clip(rho, -1.0, 1.0) + 1.0)


@dataclasses.dataclass
class ReliabilityState:
    """Trailing evidence and current published weights for one feature bank."""

    names: list[str]
    alpha: float = ALPHA_PERS
    beta: float = BETA_COH
    gamma: float = GAMMA_TEMP
    ema_alpha: float = EMA_ALPHA
    max_delta: float = MAX_DELTA
    trail_len: int = TRAIL_LEN
    weights: np.ndarray = dataclasses.field(default=None)  # type: ignore[assignment]
    trails: list[deque] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        n = len(self.names)
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        if not self.trails:
            self.trails = [deque(maxlen=self.trail_len) for _ in range(n)]

    def observe(self, feats: Sequence[Feature]) -> None:
        """Push the new feature values (first scalar of each) onto the trails."""
        for trail, f in zip(self.trails, feats):
            trail.append(float(f.value[0]))

    def scores(self, feats: Sequence[Feature]) -> np.ndarray:
        """Current z_f per feature from trails plus associated coherence."""
        coh_by_channel: dict[int, list[float]] = {}
        for f in feats:
            if f.kind == "coherence":
                i, j = f.meta["pair"]
                coh_by_channel.setdefault(i, []).append(f.scalar)
                coh_by_channel.setdefault(j, []).append(f.scalar)
        out = np.zeros(len(feats))
        for idx, f in enumerate(feats):
            trail = np.asarray(self.trails[idx], dtype=np.float64)
            if trail.size == 0:
                trail = np.asarray(f.value[:1])
            snr = snr_estimate(trail)
            pers = persistence_estimate(trail)
            if f.kind == "coherence":
                coh = f.scalar
            elif "channel" in f.meta and f.meta["channel"] in coh_by_channel:
                coh = float(np.mean(coh_by_channel[f.meta["channel"]]))
            else:
                coh = 1.0
            out[idx] = combine_score(snr, pers, coh, self.alpha, self.beta)
        return out


def ema_update(w_prev: np.ndarray, z: np.ndarray, state: ReliabilityState) -> np.ndarray:
    """Rate-limited EMA step toward softmax(gamma * z).

    w_raw = a * softmax(gamma z) + (1 - a) * w_prev, the per-coordinate delta
    is clipped to +/- max_delta, and the clipped result is renormalized onto
    the simplex. Asserts the documented 2 * max_delta per-step bound.
    """
    w_prev = np.asarray(w_prev, dtype=np.float64)
    target = softmax_weights(z, state.gamma)
    w_raw = state.ema_alpha * target + (1.0 - state.ema_alpha) * w_prev
    delta = np.clip(w_raw - w_prev, -state.max_delta, state.max_delta)
    w = w_prev + delta
    total = float(np.sum(w))
    if total <= 0:
        w = np.full_like(w, 1.0 / w.size)
    else:
        w = w / total
    if np.max(np.abs(w - w_prev)) > 2.0 * state.max_delta + 1e-9:
        raise AssertionError("EMA step exceeded the 2*max_delta variation bound")
    return w


def mask_failed(w: np.ndarray, healthy: Sequence[bool]) -> np.ndarray:
    """Zero failed features' weights and renormalize the survivors."""
    w = np.asarray(w, dtype=np.float64).copy()
    healthy = np.asarray(healthy, dtype=bool)
    w[~healthy] = 0.0
    total = float(np.sum(w))
    if total <= 0:
        # nothing healthy carries weight: spread uniformly over healthy slots
        if healthy.any():
            w[healthy] = 1.0 / int(healthy.sum())
        else:
            raise ValueError("no healthy features to carry weight")
        return w
    return w / total


def step(state: ReliabilityState, feats: Sequence[Feature], healthy: Sequence[bool]) -> np.ndarray:
    """One full reliability cycle: observe, score, EMA, mask.

    Publishes (and stores) the masked weights; the unmasked EMA state is kept
    internally so a transient failure does not erase a feature's standing.
    """
    state.observe(feats)
    z = state.scores(feats)
    state.weights = ema_update(state.weights, z, state)
    return mask_failed(state.weights, healthy)


def weighted_view(values: np.ndarray, w: np.ndarray, widths: Sequence[int]) -> np.ndarray:
    """Scale flattened feature values by per-feature weights.

    Weights are simplex-normalized, so they are multiplied by the feature
    count before scaling: uniform weights reproduce the unweighted view, and
    a masked feature still zeroes out. ``widths`` gives each feature's value
    width so vector-valued features share their single weight.
    """
    w = np.asarray(w, dtype=np.float64)
    gain = np.repeat(w * w.size, widths)
    return np.asarray(values, dtype=np.float64) * gain
