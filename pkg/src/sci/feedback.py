"""Operator feedback: bounded intake and the aggregated correction direction.

Feedback arrives as confirm/deny verdicts on a displayed marker, optionally
with an attribution nudge ("this feature should pull the other way"), a
severity in (0, 1], and the parameter version the operator was looking at.
Events from a stale version are acknowledged but never applied: after the
parameters move, an old verdict may no longer describe the model.

The correction direction u_h is an ascent direction assembled from hand
gradients at the deterministic network on the window the operator saw:

* confirm marker m: severity * grad log q_m (sharpen the confirmed marker);
* deny marker m: severity * grad log(1 - q_m) (drain it);
* nudge (feature f, sign s) on marker m: hinge max(0, margin - s * a_mf)
  on the gradient-times-input attribution, margin 0.1, pushed through by
  severity * s * grad a_mf while the hinge is active.

Contributions are summed (linear in the severities) and the total is
rescaled onto the ball ||u_h|| <= U, the bound the controller's gain budget
assumes. Disagreement, the deny fraction among fresh events, feeds gain
scheduling.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import deque
from typing import Sequence

import numpy as np

from .interpreter import Theta, forward

log = logging.getLogger(__name__)

BUFFER_CAP = 256
HINGE_MARGIN = 0.1


class FeedbackError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class FeedbackEvent:
    event_id: str
    window_seq: int
    marker_id: int
    verdict: str                       # "confirm" | "deny"
    severity: float
    theta_version: int
    timestamp: float
    nudge: tuple[str, int] | None = None   # (feature name, +1/-1)

    def __post_init__(self) -> None:
        if not self.event_id:
            raise FeedbackError("event_id required")
        if self.verdict not in ("confirm", "deny"):
            raise FeedbackError(f"verdict must be confirm/deny, got {self.verdict!r}")
        if not (0.0 < self.severity <= 1.0):
            raise FeedbackError("severity must lie in (0, 1]")
        if self.window_seq is None or self.window_seq < 0:
            raise FeedbackError("window_seq required")
        if self.theta_version is None or self.theta_version < 0:
            raise FeedbackError("theta_version required")
        if self.nudge is not None and self.nudge[1] not in (-1, 1):
            raise FeedbackError("nudge sign must be +1 or -1")


class FeedbackBuffer:
    """Bounded FIFO; a full buffer drops the oldest event with a log note."""

    def __init__(self, cap: int = BUFFER_CAP) -> None:
        self._q: deque[FeedbackEvent] = deque()
        self.cap = cap
        self.dropped = 0

    def __len__(self) -> int:
        return len(self._q)

    def enqueue(self, ev: FeedbackEvent) -> None:
        if len(self._q) >= self.cap:
            old = self._q.popleft()
            self.dropped += 1
            log.warning("feedback buffer full; dropped oldest event %s", old.event_id)
        self._q.append(ev)

    def drain(self) -> list[FeedbackEvent]:
        out = list(self._q)
        self._q.clear()
        return out


def _marker_logit_ascent(theta: Theta, x: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Gradient of (dz . marker logits) wrt theta at the deterministic net."""
    x = np.asarray(x, dtype=np.float64).ravel()
    W1, b1, Wt, bt, Wm, bm = theta.views()
    pre = x @ W1 + b1
    h0 = np.tanh(pre)
    out = np.zeros(theta.size())
    gW1, gb1, gWt, gbt, gWm, gbm = theta.views(out)
    gWm += np.outer(h0, dz)
    gbm += dz
    dh = Wm @ dz
    dpre = dh * (1.0 - h0**2)
    gW1 += np.outer(x, dpre)
    gb1 += dpre
    return out


def _attribution_grad(theta: Theta, x: np.ndarray, marker: int,
                      scalar_idx: np.ndarray) -> tuple[float, np.ndarray]:
    """(a_mf, grad a_mf) for the feature whose scalars are scalar_idx."""
    x = np.asarray(x, dtype=np.float64).ravel()
    W1, b1, Wt, bt, Wm, bm = theta.views()
    pre = x @ W1 + b1
    th = np.tanh(pre)
    g = 1.0 - th**2
    wmk = Wm[:, marker]
    # t_j: the feature's own contribution to each pre-activation
    t = x[scalar_idx] @ W1[scalar_idx, :]
    a = float(np.sum(t * g * wmk))

    out = np.zeros(theta.size())
    gW1, gb1, gWt, gbt, gWm, gbm = theta.views(out)
    # direct term: only the feature's rows of W1
    gW1[scalar_idx, :] += np.outer(x[scalar_idx], g * wmk)
    # curvature term: every W1 column shifts pre_j, bending g_j
    dg_dpre = -2.0 * th * g
    col = t * wmk * dg_dpre                 # (h,)
    gW1 += np.outer(x, col)
    gb1 += col
    gWm[:, marker] += t * g
    return a, out


def build_u_h(
    events: Sequence[FeedbackEvent],
    theta: Theta,
    current_version: int,
    inputs: dict[int, np.ndarray],
    names: list[str],
    widths: list[int],
    u_bound: float = 1.0,
) -> tuple[np.ndarray, float, list[str], list[str]]:
    """Aggregate fresh events into (u_h, disagreement, applied, discarded).

    Discards (with a log note) events whose theta_version is stale or whose
    window has left the input cache. The sum over events is linear in the
    severities; only the final rescale onto ||u_h|| <= u_bound is not.
    """
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    name_to_slice = {nm: (offsets[i], offsets[i + 1]) for i, nm in enumerate(names)}

    u = np.zeros(theta.size())
    applied: list[str] = []
    discarded: list[str] = []
    denies = 0
    fresh = 0
    for ev in events:
        if ev.theta_version != current_version:
            discarded.append(ev.event_id)
            log.info("feedback %s stale (v%d != v%d), ignored",
                     ev.event_id, ev.theta_version, current_version)
            continue
        x = inputs.get(ev.window_seq)
        if x is None:
            discarded.append(ev.event_id)
            log.info("feedback %s references evicted window %d, ignored",
                     ev.event_id, ev.window_seq)
            continue
        if not (0 <= ev.marker_id < theta.n_markers):
            discarded.append(ev.event_id)
            log.warning("feedback %s names unknown marker %d, ignored",
                        ev.event_id, ev.marker_id)
            continue
        fresh += 1
        if ev.verdict == "deny":
            denies += 1

        q = forward(theta, x).q[0]
        ek = np.zeros(theta.n_markers)
        ek[ev.marker_id] = 1.0
        if ev.verdict == "confirm":
            dz = ek - q                                   # grad log q_m
        else:
            qm = min(q[ev.marker_id], 1.0 - 1e-12)
            dz = (qm / (1.0 - qm)) * (q - ek)             # grad log(1 - q_m)
        u += ev.severity * _marker_logit_ascent(theta, x, dz)

        if ev.nudge is not None:
            fname, sign = ev.nudge
            sl = name_to_slice.get(fname)
            if sl is None:
                log.warning("feedback %s nudges unknown feature %r, nudge skipped",
                            ev.event_id, fname)
            else:
                idx = np.arange(sl[0], sl[1])
                a, ga = _attribution_grad(theta, x, ev.marker_id, idx)
                if HINGE_MARGIN - sign * a > 0.0:
                    u += ev.severity * sign * ga
        applied.append(ev.event_id)

    norm = float(np.linalg.norm(u))
    if norm > u_bound and norm > 0.0:
        u = u * (u_bound / norm)
    disagreement = denies / fresh if fresh else 0.0
    return u, disagreement, applied, discarded
