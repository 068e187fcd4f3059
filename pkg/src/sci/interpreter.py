"""The interpretable head: a small stochastic network over the feature bank.

Architecture: one tanh hidden layer of width 32 with dropout p = 0.5 on the
hidden units (inverted scaling, survivors divided by the keep rate), a linear
task head producing class probabilities through an optional calibration
temperature, and a linear marker head producing k marker logits. Clarity of
the marker distribution, SP = 1 - H(softmax(marker logits)) / log k, is the
quantity the outer loop regulates, and its gradient with respect to every
parameter is computed analytically here (no autograd anywhere in the
package; each derivative is derived by hand and checked against central
finite differences in the test suite).

Attribution is gradient-times-input through the deterministic network: for
marker m and input scalar s, a = x_s * d(logit_m)/d(x_s). Contributions are
aggregated per named feature, the eight largest by magnitude are kept, and
the top feature (name, sign) feeds the constraint component of the clarity
score.

Per-example clarity targets follow the confidence-margin link: for
classification R = max(0, p_top1 - p_top2), for regression
R = exp(-huber(error)); the target SP* = sigmoid(6 * (R - 0.5)). Targets
are recorded before each update and treated as constants by every gradient
("stop-gradient"): perturbing parameters never rewrites an already-recorded
target.

Training minimizes

    L = CE(task) + lam_v * mean (SP* - SP)^2
        + gamma_reg * (R_div + R_band + R_stab)

by minibatch SGD (batch 32, lr 0.01, momentum 0.9), where R_div pulls the
batch-mean marker distribution toward uniform use of the marker vocabulary,
R_band keeps mean clarity near 0.65, and R_stab penalizes clarity shifts
under a 1 percent input jitter.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import logging

import numpy as np

from .spcore import clarity

log = logging.getLogger(__name__)

HIDDEN = 32
DROPOUT_P = 0.5
ALPHA_LINK = 6.0
BETA_LINK = 0.5
BAND_CENTER = 0.65
JITTER_FRAC = 0.01
TOP_K_RATIONALE = 8
LR = 0.01
MOMENTUM = 0.9
BATCH = 32
THETA_SCHEMA = "sci.theta/1"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclasses.dataclass
class Theta:
    """Flat parameter vector with named views.

    vec layout: [W1 (d*H), b1 (H), Wt (H*C), bt (C), Wm (H*k), bm (k)].
    The flat layout is what the outer controller steps, checkpoints, and
    projects; views below are windows into the same memory.
    """

    d: int
    n_classes: int
    n_markers: int
    hidden: int = HIDDEN
    temperature: float = 1.0
    version: int = 0
    vec: np.ndarray = dataclasses.field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.vec is None:
            self.vec = np.zeros(self.size(), dtype=np.float64)
        self.vec = np.ascontiguousarray(self.vec, dtype=np.float64)
        if self.vec.size != self.size():
            raise ValueError("theta vector size mismatch")

    def size(self) -> int:
        d, h, c, k = self.d, self.hidden, self.n_classes, self.n_markers
        return d * h + h + h * c + c + h * k + k

    def _bounds(self) -> list[int]:
        d, h, c, k = self.d, self.hidden, self.n_classes, self.n_markers
        sizes = [d * h, h, h * c, c, h * k, k]
        return np.cumsum(sizes).tolist()

    def views(self, vec: np.ndarray | None = None):
        """(W1, b1, Wt, bt, Wm, bm) views into vec (default: own vector)."""
        v = self.vec if vec is None else vec
        d, h, c, k = self.d, self.hidden, self.n_classes, self.n_markers
        b = self._bounds()
        return (
            v[0 : b[0]].reshape(d, h),
            v[b[0] : b[1]],
            v[b[1] : b[2]].reshape(h, c),
            v[b[2] : b[3]],
            v[b[3] : b[4]].reshape(h, k),
            v[b[4] : b[5]],
        )

    def copy(self) -> "Theta":
        return Theta(
            d=self.d,
            n_classes=self.n_classes,
            n_markers=self.n_markers,
            hidden=self.hidden,
            temperature=self.temperature,
            version=self.version,
            vec=self.vec.copy(),
        )

    def schema_hash(self) -> str:
        meta = json.dumps(
            {"d": self.d, "hidden": self.hidden, "classes": self.n_classes,
             "markers": self.n_markers, "layout": "W1,b1,Wt,bt,Wm,bm"},
            sort_keys=True,
        )
        return hashlib.sha256(meta.encode()).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": THETA_SCHEMA,
                "schema_hash": self.schema_hash(),
                "d": self.d,
                "hidden": self.hidden,
                "n_classes": self.n_classes,
                "n_markers": self.n_markers,
                "temperature": self.temperature,
                "version": self.version,
                "vec_b64": base64.b64encode(self.vec.tobytes()).decode(),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "Theta":
        obj = json.loads(text)
        if obj.get("schema") != THETA_SCHEMA:
            raise ValueError(f"unsupported theta schema {obj.get('schema')!r}")
        th = Theta(
            d=obj["d"],
            n_classes=obj["n_classes"],
            n_markers=obj["n_markers"],
            hidden=obj["hidden"],
            temperature=obj["temperature"],
            version=obj["version"],
            vec=np.frombuffer(base64.b64decode(obj["vec_b64"]), dtype=np.float64).copy(),
        )
        if th.schema_hash() != obj["schema_hash"]:
            raise ValueError("theta schema hash mismatch")
        return th


def init_theta(d: int, n_classes: int, n_markers: int, seed: int = 0,
               hidden: int = HIDDEN, scale: float = 0.3) -> Theta:
    """Small random initialization (scaled by fan-in on the first layer)."""
    rng = np.random.default_rng(seed)
    th = Theta(d=d, n_classes=n_classes, n_markers=n_markers, hidden=hidden)
    W1, b1, Wt, bt, Wm, bm = th.views()
    W1[:] = rng.normal(0.0, scale / np.sqrt(d), W1.shape)
    Wt[:] = rng.normal(0.0, scale / np.sqrt(hidden), Wt.shape)
    Wm[:] = rng.normal(0.0, scale / np.sqrt(hidden), Wm.shape)
    # biases start at zero: zero input -> uniform heads
    return th


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def draw_masks(rng: np.random.Generator, n: int, hidden: int, p: float = DROPOUT_P) -> np.ndarray:
    """Dropout masks already divided by the keep rate (inverted dropout)."""
    keep = 1.0 - p
    return (rng.random((n, hidden)) < keep).astype(np.float64) / keep


@dataclasses.dataclass
class Forward:
    """Cached activations of one (batched) pass."""

    x: np.ndarray            # (n, d)
    pre: np.ndarray          # (n, h) pre-activation
    h0: np.ndarray           # (n, h) tanh output before dropout
    h: np.ndarray            # (n, h) after dropout scaling
    mask: np.ndarray | None  # (n, h) or None for deterministic passes
    task_logits: np.ndarray  # (n, C), already divided by temperature
    y: np.ndarray            # (n, C)
    marker_logits: np.ndarray  # (n, k)
    q: np.ndarray            # (n, k)


def forward(theta: Theta, x: np.ndarray, mask: np.ndarray | None = None) -> Forward:
    """One pass; pass a dropout mask for a stochastic sample, None for the
    deterministic (expectation) network."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    W1, b1, Wt, bt, Wm, bm = theta.views()
    pre = x @ W1 + b1
    h0 = np.tanh(pre)
    h = h0 if mask is None else h0 * mask
    tl = (h @ Wt + bt) / theta.temperature
    ml = h @ Wm + bm
    return Forward(
        x=x, pre=pre, h0=h0, h=h, mask=mask,
        task_logits=tl, y=_softmax(tl), marker_logits=ml, q=_softmax(ml),
    )


def stochastic_pass(theta: Theta, x: np.ndarray, rng: np.random.Generator) -> Forward:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return forward(theta, x, draw_masks(rng, x.shape[0], theta.hidden))


# ---------------------------------------------------------------------------
# Interpretation and attribution


@dataclasses.dataclass
class Interpretation:
    """Deterministic read-out for one window: markers plus rationales."""

    q: np.ndarray                         # (k,) marker distribution
    y: np.ndarray                         # (C,) task distribution
    prediction: int
    sp_theta: float                       # clarity of q
    rationales: list[list[tuple[str, float]]]   # per marker, top (name, value)
    top_feats: list[tuple[str, int] | None]     # per marker (name, sign)
    theta_version: int


def attribution_matrix(theta: Theta, x: np.ndarray) -> np.ndarray:
    """Signed contribution of every input scalar to every marker logit.

    Gradient-times-input at the deterministic network: (d, k) matrix with
    a[s, m] = x_s * d(marker logit m)/d(x_s).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    W1, b1, Wt, bt, Wm, bm = theta.views()
    pre = x @ W1 + b1
    g = 1.0 - np.tanh(pre) ** 2          # (h,)
    grads = W1 @ (g[:, None] * Wm)       # (d, k)
    return x[:, None] * grads


def aggregate_by_feature(contrib: np.ndarray, widths: list[int]) -> np.ndarray:
    """Sum scalar contributions into per-feature signed contributions."""
    out = np.zeros((len(widths), contrib.shape[1]))
    pos = 0
    for i, w in enumerate(widths):
        out[i] = contrib[pos : pos + w].sum(axis=0)
        pos += w
    return out


def interpret(theta: Theta, x: np.ndarray, names: list[str], widths: list[int]) -> Interpretation:
    """Deterministic forward plus per-marker rationales over named features."""
    f = forward(theta, x)
    q = f.q[0]
    y = f.y[0]
    contrib = aggregate_by_feature(attribution_matrix(theta, x), widths)  # (F, k)
    rationales: list[list[tuple[str, float]]] = []
    top_feats: list[tuple[str, int] | None] = []
    for m in range(theta.n_markers):
        c = contrib[:, m]
        order = np.argsort(-np.abs(c), kind="stable")[:TOP_K_RATIONALE]
        entries = [(names[i], float(c[i])) for i in order if c[i] != 0.0]
        rationales.append(entries)
        if entries:
            top_feats.append((entries[0][0], 1 if entries[0][1] > 0 else -1))
        else:
            top_feats.append(None)
    return Interpretation(
        q=q,
        y=y,
        prediction=int(np.argmax(y)),
        sp_theta=clarity(q),
        rationales=rationales,
        top_feats=top_feats,
        theta_version=theta.version,
    )


# ---------------------------------------------------------------------------
# Clarity targets


def _huber(e: float, delta: float = 1.0) -> float:
    a = abs(e)
    return 0.5 * e * e if a <= delta else delta * (a - 0.5 * delta)


def target_clarity(y: np.ndarray, truth: float | None = None,
                   mode: str = "classification", delta: float = 1.0) -> tuple[float, float]:
    """Per-example clarity target (R, SP*).

    Classification: R = max(0, p_top1 - p_top2) from the predictive
    distribution. Regression: R = exp(-huber(y - truth, delta)), requiring
    ``truth``. SP* = sigmoid(ALPHA_LINK * (R - BETA_LINK)). The caller
    records these values; gradients never flow into them.
    """
    if mode == "classification":
        p = np.sort(np.asarray(y, dtype=np.float64))[::-1]
        r = max(0.0, float(p[0] - p[1]))
    elif mode == "regression":
        if truth is None:
            raise ValueError("regression targets need ground truth")
        r = float(np.exp(-_huber(float(y) - float(truth), delta)))
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    sp_star = float(1.0 / (1.0 + np.exp(-ALPHA_LINK * (r - BETA_LINK))))
    return r, sp_star


# ---------------------------------------------------------------------------
# Analytic gradients


def _sp_rows(q: np.ndarray) -> np.ndarray:
    """Row-wise clarity of distributions (n, k) -> (n,)."""
    k = q.shape[1]
    ql = np.where(q > 0, q, 1.0)
    h = -np.sum(q * np.log(ql), axis=1)
    return 1.0 - h / np.log(k)


def _dsp_dz(q: np.ndarray) -> np.ndarray:
    """Row-wise d clarity / d marker-logits: q * (log q + H) / log k."""
    k = q.shape[1]
    ql = np.where(q > 0, q, 1.0)
    logq = np.log(ql)
    h = -np.sum(q * logq, axis=1, keepdims=True)
    return q * (logq + h) / np.log(k)


def _backprop(theta: Theta, f: Forward, d_task: np.ndarray | None,
              d_marker: np.ndarray | None, grad: np.ndarray) -> None:
    """Accumulate d(loss)/d(theta) into grad given upstream logit gradients.

    d_task is with respect to the scaled task logits (already includes the
    temperature division applied in forward), d_marker with respect to the
    marker logits.
    """
    W1, b1, Wt, bt, Wm, bm = theta.views()
    gW1, gb1, gWt, gbt, gWm, gbm = theta.views(grad)
    dh = np.zeros_like(f.h)
    if d_task is not None:
        dt = d_task / theta.temperature
        gWt += f.h.T @ dt
        gbt += dt.sum(axis=0)
        dh += dt @ Wt.T
    if d_marker is not None:
        gWm += f.h.T @ d_marker
        gbm += d_marker.sum(axis=0)
        dh += d_marker @ Wm.T
    if f.mask is not None:
        dh = dh * f.mask
    dpre = dh * (1.0 - f.h0**2)
    gW1 += f.x.T @ dpre
    gb1 += dpre.sum(axis=0)


def grad_sp(theta: Theta, x: np.ndarray) -> np.ndarray:
    """Exact gradient of deterministic marker clarity with respect to theta.

    Task-head coordinates are identically zero; at exactly uniform markers
    (zero logits) the gradient vanishes, which is the fixed point the no-op
    zone protects.
    """
    f = forward(theta, np.atleast_2d(x))
    grad = np.zeros(theta.size())
    _backprop(theta, f, None, _dsp_dz(f.q), grad)
    return grad


def sp_theta_value(theta: Theta, x: np.ndarray) -> float:
    """Deterministic marker clarity at x."""
    f = forward(theta, np.atleast_2d(x))
    return float(_sp_rows(f.q)[0])


# ---------------------------------------------------------------------------
# Training loss


@dataclasses.dataclass
class LossParts:
    total: float
    task: float
    v: float
    div: float
    band: float
    stab: float


def loss_and_grad(
    theta: Theta,
    x: np.ndarray,
    labels: np.ndarray,
    sp_targets: np.ndarray,
    masks: np.ndarray,
    x_jit: np.ndarray,
    lam_v: float = 0.5,
    gamma_reg: float = 0.1,
) -> tuple[LossParts, np.ndarray]:
    """Full training loss and its analytic gradient for one batch.

    Everything stochastic (dropout masks, the jittered inputs) and every
    recorded target is passed in, so the function is deterministic in theta
    and finite-difference checkable. sp_targets are constants by contract.
    """
    n = x.shape[0]
    k = theta.n_markers
    f = forward(theta, x, masks)
    fj = forward(theta, x_jit, masks)

    # task cross-entropy
    idx = np.arange(n)
    py = np.clip(f.y[idx, labels], 1e-300, None)
    l_task = float(-np.mean(np.log(py)))
    d_task = f.y.copy()
    d_task[idx, labels] -= 1.0
    d_task /= n

    sp = _sp_rows(f.q)
    spj = _sp_rows(fj.q)
    dsp = _dsp_dz(f.q)
    dspj = _dsp_dz(fj.q)

    # clarity regulation energy against recorded targets
    diff = sp_targets - sp
    l_v = float(np.mean(diff**2))
    d_marker = (-2.0 * lam_v / n) * diff[:, None] * dsp

    # marker-vocabulary diversity on the batch-mean distribution
    qbar = f.q.mean(axis=0)
    qb = np.clip(qbar, 1e-300, None)
    l_div = float(np.sum(qbar * np.log(k * qb)))
    g_bar = np.log(k * qb) + 1.0
    inner = f.q @ g_bar
    d_marker += (gamma_reg / n) * f.q * (g_bar[None, :] - inner[:, None])

    # clarity band
    sbar = float(np.mean(sp))
    l_band = (sbar - BAND_CENTER) ** 2
    d_marker += gamma_reg * (2.0 * (sbar - BAND_CENTER) / n) * dsp

    # stability under jitter
    sdiff = spj - sp
    l_stab = float(np.mean(sdiff**2))
    d_marker += gamma_reg * (-2.0 / n) * sdiff[:, None] * dsp
    d_marker_j = gamma_reg * (2.0 / n) * sdiff[:, None] * dspj

    grad = np.zeros(theta.size())
    _backprop(theta, f, d_task, d_marker, grad)
    _backprop(theta, fj, None, d_marker_j, grad)

    total = l_task + lam_v * l_v + gamma_reg * (l_div + l_band + l_stab)
    return LossParts(total, l_task, l_v, l_div, l_band, l_stab), grad


@dataclasses.dataclass
class TrainReport:
    epochs: list[dict]
    recorded_targets: list[np.ndarray]
    steps: int


def train(
    theta: Theta,
    x: np.ndarray,
    labels: np.ndarray,
    epochs: int = 10,
    seed: int = 0,
    lr: float = LR,
    momentum: float = MOMENTUM,
    batch: int = BATCH,
    lam_v: float = 0.5,
    gamma_reg: float = 0.1,
) -> TrainReport:
    """Minibatch SGD with momentum on the combined objective.

    Mutates theta.vec in place. Per batch: draw dropout masks and the 1
    percent jitter, record the clarity targets from the current deterministic
    predictions (constants thereafter), then take one momentum step. A
    non-finite loss aborts with diagnostics rather than continuing.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    vel = np.zeros(theta.size())
    feat_std = x.std(axis=0)
    feat_std = np.where(feat_std < 1e-12, 1.0, feat_std)
    report = TrainReport(epochs=[], recorded_targets=[], steps=0)

    for ep in range(epochs):
        order = rng.permutation(x.shape[0])
        ep_parts = np.zeros(6)
        nb = 0
        for lo in range(0, x.shape[0], batch):
            sel = order[lo : lo + batch]
            xb, yb = x[sel], labels[sel]
            masks = draw_masks(rng, xb.shape[0], theta.hidden)
            x_jit = xb + JITTER_FRAC * feat_std * rng.standard_normal(xb.shape)
            det = forward(theta, xb)
            targets = np.array([target_clarity(row)[1] for row in det.y])
            report.recorded_targets.append(targets)
            parts, grad = loss_and_grad(
                theta, xb, yb, targets, masks, x_jit, lam_v=lam_v, gamma_reg=gamma_reg
            )
            if not np.isfinite(parts.total):
                raise TrainingDiverged(
                    "non-finite training loss",
                    {
                        "epoch": ep,
                        "batch": nb,
                        "parts": dataclasses.asdict(parts),
                        "grad_norm": float(np.linalg.norm(grad)),
                    },
                )
            vel = momentum * vel - lr * grad
            theta.vec += vel
            ep_parts += np.array(
                [parts.total, parts.task, parts.v, parts.div, parts.band, parts.stab]
            )
            nb += 1
            report.steps += 1
        ep_parts /= max(nb, 1)
        report.epochs.append(
            {
                "epoch": ep,
                "total": ep_parts[0],
                "task": ep_parts[1],
                "v": ep_parts[2],
                "div": ep_parts[3],
                "band": ep_parts[4],
                "stab": ep_parts[5],
            }
        )
    return report


def accuracy(theta: Theta, x: np.ndarray, labels: np.ndarray) -> float:
    """Deterministic top-1 accuracy."""
    f = forward(theta, np.asarray(x, dtype=np.float64))
    return float(np.mean(np.argmax(f.y, axis=1) == np.asarray(labels)))
