"""Clarity scoring: the scalar the loop regulates.

The primitive is normalized-entropy clarity over a discrete distribution,

    clarity(q) = 1 - H(q) / log k,

which is 1 for a point mass and 0 for the uniform distribution. Four
component signals are aggregated into the published clarity score:

    k1  clarity of the marker distribution;
    k2  marker margin, p(1) - p(2);
    k3  fraction of constrained markers whose top rationale feature
        satisfies the declared domain constraints;
    k4  rolling outcome accuracy with exponential decay 0.95 over the last
        64 lagged outcomes (0.5 before any outcome arrives).

Each component passes through a fitted monotone calibrator (identity until
one is fitted): isotonic regression by pool-adjacent-violators, or a
two-parameter logistic fit by Newton iterations when fewer than 8 pairs are
available. The aggregate is a fixed positive convex combination
SP = w . kappa with default w = (0.4, 0.2, 0.2, 0.2), so improving any
component never lowers the score. Tracking state (rolling SP buffer, MAD
no-op band) lives in SPState.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from typing import Sequence

import numpy as np

W_KAPPA = (0.4, 0.2, 0.2, 0.2)
ROLL_DECAY = 0.95
OUTCOME_BUF = 64
SP_BUF = 64
NOOP_MAD_FACTOR = 1.5
MIN_ISOTONIC_PAIRS = 8


class ConfigurationError(ValueError):
    pass


def clarity(q: np.ndarray) -> float:
    """1 - H(q)/log k over a distribution q on k >= 2 outcomes.

    Zero probabilities contribute zero entropy. Rejects k < 2 (log 1 = 0)
    and non-distributions.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size < 2:
        raise ConfigurationError("clarity needs a 1-D distribution on k >= 2 outcomes")
    if np.any(q < -1e-12) or abs(float(np.sum(q)) - 1.0) > 1e-6:
        raise ConfigurationError("clarity argument must be a probability vector")
    qc = np.clip(q, 0.0, 1.0)
    nz = qc > 0.0
    h = -float(np.sum(qc[nz] * np.log(qc[nz])))
    return 1.0 - h / np.log(q.size)


def marker_margin(q: np.ndarray) -> float:
    """Top-1 minus top-2 probability of the marker distribution."""
    q = np.sort(np.asarray(q, dtype=np.float64))[::-1]
    return float(q[0] - q[1])


# ---------------------------------------------------------------------------
# Monotone calibrators


def _pav(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators for a nondecreasing fit in index order."""
    y = y.astype(np.float64).copy()
    w = w.astype(np.float64).copy()
    n = y.size
    # block-merge implementation: values, weights, sizes
    vals: list[float] = []
    wts: list[float] = []
    sizes: list[int] = []
    for i in range(n):
        vals.append(y[i])
        wts.append(w[i])
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / (wts[-2] + wts[-1])
            wt = wts[-2] + wts[-1]
            sz = sizes[-2] + sizes[-1]
            vals = vals[:-2] + [v]
            wts = wts[:-2] + [wt]
            sizes = sizes[:-2] + [sz]
    out = np.empty(n)
    pos = 0
    for v, sz in zip(vals, sizes):
        out[pos : pos + sz] = v
        pos += sz
    return out


@dataclasses.dataclass
class Calibrator:
    """Monotone nondecreasing map from a raw component score into [0, 1].

    kind "identity" passes through (clipped); "isotonic" applies a stepwise
    map learned by PAV; "logistic" applies sigmoid(a * x + b) with a >= 0.
    """

    kind: str = "identity"
    knots_x: np.ndarray | None = None
    knots_y: np.ndarray | None = None
    a: float = 1.0
    b: float = 0.0

    def apply(self, x: float) -> float:
        if self.kind == "identity":
            return float(np.clip(x, 0.0, 1.0))
        if self.kind == "isotonic":
            xs, ys = self.knots_x, self.knots_y
            idx = np.searchsorted(xs, x, side="right") - 1
            if idx < 0:
                return float(ys[0])
            return float(ys[min(idx, ys.size - 1)])
        if self.kind == "logistic":
            return float(1.0 / (1.0 + np.exp(-(self.a * x + self.b))))
        raise ConfigurationError(f"unknown calibrator kind {self.kind!r}")


def fit_calibrator(raw: np.ndarray, target: np.ndarray, kind: str = "isotonic") -> Calibrator:
    """Fit a monotone calibrator on (raw score, target in [0, 1]) pairs.

    Isotonic fits need at least MIN_ISOTONIC_PAIRS pairs; fewer falls back
    to the logistic form (with a log note via the returned kind). The
    logistic slope is constrained nonnegative so the map stays monotone
    nondecreasing; constant targets yield the constant map.
    """
    raw = np.asarray(raw, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if raw.size != target.size or raw.size == 0:
        raise ConfigurationError("calibrator needs matching nonempty raw/target arrays")
    if np.any(target < 0.0) or np.any(target > 1.0):
        raise ConfigurationError("calibrator targets must lie in [0, 1]")

    if kind == "isotonic" and raw.size < MIN_ISOTONIC_PAIRS:
        kind = "logistic"

    if kind == "isotonic":
        order = np.argsort(raw, kind="stable")
        xs = raw[order]
        ys = _pav(target[order], np.ones(raw.size))
        # collapse duplicate x knots to their last (largest) fitted value
        keep = np.ones(xs.size, dtype=bool)
        keep[:-1] = xs[:-1] != xs[1:]
        return Calibrator(kind="isotonic", knots_x=xs[keep], knots_y=ys[keep])

    if kind == "logistic":
        if np.allclose(target, target[0]):
            t = float(np.clip(target[0], 1e-9, 1.0 - 1e-9))
            return Calibrator(kind="logistic", a=0.0, b=float(np.log(t / (1.0 - t))))
        a, b = 1.0, 0.0
        x = raw
        t = target
        for _ in range(50):
            p = 1.0 / (1.0 + np.exp(-(a * x + b)))
            # gradient of mean log-loss wrt (a, b)
            r = p - t
            ga = float(np.mean(r * x))
            gb = float(np.mean(r))
            s = np.maximum(p * (1.0 - p), 1e-9)
            haa = float(np.mean(s * x * x)) + 1e-9
            hab = float(np.mean(s * x))
            hbb = float(np.mean(s)) + 1e-9
            det = haa * hbb - hab * hab
            if abs(det) < 1e-18:
                break
            da = (gb * hab - ga * hbb) / det
            db = (ga * hab - gb * haa) / det
            a, b = a + da, b + db
            if max(abs(da), abs(db)) < 1e-10:
                break
        a = max(a, 0.0)
        return Calibrator(kind="logistic", a=float(a), b=float(b))

    raise ConfigurationError(f"unknown calibrator kind {kind!r}")


# ---------------------------------------------------------------------------
# Constraint rules for k3


@dataclasses.dataclass(frozen=True)
class ConstraintRule:
    """Domain constraint on a marker's top rationale feature.

    A marker matching ``marker`` satisfies the rule when its top feature's
    kind is in ``kinds`` (if given) and, for band features, the band lies
    within ``band_within`` (if given).
    """

    marker: int
    kinds: tuple[str, ...] | None = None
    band_within: tuple[float, float] | None = None


def constraint_satisfaction(
    top_feat_meta: Sequence[dict | None], rules: Sequence[ConstraintRule]
) -> float:
    """Fraction of ruled markers whose top feature satisfies its rules.

    ``top_feat_meta[m]`` describes marker m's top feature (keys: kind, meta)
    or None when the marker produced no rationale. Markers without rules do
    not enter the fraction; with no applicable rules the component is 1.0.
    """
    ruled = 0
    passed = 0
    by_marker: dict[int, list[ConstraintRule]] = {}
    for r in rules:
        by_marker.setdefault(r.marker, []).append(r)
    for m, info in enumerate(top_feat_meta):
        if m not in by_marker:
            continue
        ruled += 1
        if info is None:
            continue
        ok = True
        for r in by_marker[m]:
            if r.kinds is not None and info.get("kind") not in r.kinds:
                ok = False
            if r.band_within is not None:
                band = (info.get("meta") or {}).get("band")
                if band is None:
                    ok = False
                else:
                    lo, hi = r.band_within
                    if not (lo <= band[0] and band[1] <= hi):
                        ok = False
        if ok:
            passed += 1
    if ruled == 0:
        return 1.0
    return passed / ruled


def rolling_accuracy(outcomes: Sequence[bool], decay: float = ROLL_DECAY) -> float:
    """Exponentially decayed accuracy over lagged outcomes, newest last.

    Returns 0.5 when no outcome has arrived yet.
    """
    if len(outcomes) == 0:
        return 0.5
    o = np.asarray(outcomes, dtype=np.float64)
    ages = np.arange(o.size - 1, -1, -1, dtype=np.float64)
    w = decay**ages
    return float(np.sum(w * o) / np.sum(w))


# ---------------------------------------------------------------------------
# Aggregate state


@dataclasses.dataclass
class SPState:
    """Published clarity, its components, and the tracking machinery."""

    sp_star: float = 0.95
    w_kappa: np.ndarray = dataclasses.field(
        default_factory=lambda: np.array(W_KAPPA)
    )
    calibrators: list[Calibrator] = dataclasses.field(
        default_factory=lambda: [Calibrator() for _ in range(4)]
    )
    rules: tuple[ConstraintRule, ...] = ()
    outcomes: deque = dataclasses.field(default_factory=lambda: deque(maxlen=OUTCOME_BUF))
    sp_buffer: deque = dataclasses.field(default_factory=lambda: deque(maxlen=SP_BUF))
    kappa: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(4))
    sp: float = 0.0
    delta_sp: float = 0.0
    v: float = 0.0
    gamma_noop: float = 0.0

    def __post_init__(self) -> None:
        w = np.asarray(self.w_kappa, dtype=np.float64)
        if w.size != 4 or np.any(w <= 0):
            raise ConfigurationError("w_kappa must be 4 strictly positive weights")
        if abs(float(np.sum(w)) - 1.0) > 1e-9:
            raise ConfigurationError("w_kappa must sum to 1")
        self.w_kappa = w

    def push_outcome(self, correct: bool) -> None:
        self.outcomes.append(bool(correct))


def mad(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return 0.0
    med = float(np.median(v))
    return float(np.median(np.abs(v - med)))


def components(
    q: np.ndarray,
    top_feat_meta: Sequence[dict | None],
    outcomes: Sequence[bool],
    rules: Sequence[ConstraintRule] = (),
    calibrators: Sequence[Calibrator] | None = None,
) -> np.ndarray:
    """The four clarity components, each through its calibrator."""
    raw = np.array(
        [
            clarity(q),
            marker_margin(q),
            constraint_satisfaction(top_feat_meta, rules),
            rolling_accuracy(outcomes),
        ]
    )
    if calibrators is None:
        return raw
    return np.array([c.apply(float(x)) for c, x in zip(calibrators, raw)])


def evaluate(state: SPState, q: np.ndarray, top_feat_meta: Sequence[dict | None]) -> SPState:
    """One evaluation cycle: components, aggregate, tracking quantities.

    Updates state in place (kappa, sp, delta_sp, v, sp buffer, no-op band)
    and returns it. delta_sp is signed: sp_star - sp.
    """
    state.kappa = components(
        q, top_feat_meta, list(state.outcomes), state.rules, state.calibrators
    )
    state.sp = float(np.dot(state.w_kappa, state.kappa))
    state.delta_sp = state.sp_star - state.sp
    state.v = 0.5 * state.delta_sp**2
    state.sp_buffer.append(state.sp)
    state.gamma_noop = NOOP_MAD_FACTOR * mad(np.asarray(state.sp_buffer))
    return state
