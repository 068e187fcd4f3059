"""Window decomposition into a named feature bank.

Per window the bank holds, in a fixed documented order:

1. band powers, channel-major then band order (``bp_<lo>_<hi>_ch<i>``),
   integrated from an averaged-periodogram (Welch) PSD: eight segments at
   50 percent overlap under a Hann taper;
2. one trend feature per channel (``trend_ch<i>``), a robust LOESS fit
   (tricube kernel, local linear, two bisquare reweighting passes) whose
   value is the 2-vector [endpoint level, endpoint slope per second];
3. one coherence feature per channel pair (``coh_ch<i>_ch<j>_broad``),
   magnitude-squared coherence from Welch auto-/cross-spectra averaged over
   a broad band;
4. two compact features ``pc1``/``pc2``, a frozen linear projection of the
   scalars above onto the first two principal directions fit once on the
   warm-up split. Before a projection is frozen they are emitted as 0.0.

Feature count is therefore n_channels*n_bands + n_channels + n_pairs + 2.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .sigsim import FAILED, Window

log = logging.getLogger(__name__)

N_SEGMENTS = 8
LOESS_SPAN = 0.15
LOESS_ITERS = 2          # bisquare reweighting passes after the first fit
BROAD_BAND_NAME = "broad"


@dataclasses.dataclass
class Feature:
    """One named diagnostic feature.

    value is a float for band power and coherence, a length-2 array
    [level, slope] for trend, and a float for pc projections. ``kind`` is one
    of band/trend/coherence/compact; ``meta`` carries units and provenance
    needed by constraint checks (band edges, channel, pair).
    """

    name: str
    kind: str
    value: np.ndarray      # always stored 1-D, length 1 or 2
    units: str
    meta: dict

    @property
    def scalar(self) -> float:
        return float(self.value[0])

    def width(self) -> int:
        return int(self.value.size)


@dataclasses.dataclass
class CompactProjection:
    """Frozen 2-component linear map fit once on a warm-up feature matrix."""

    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray    # (2, d)

    def apply(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return self.components @ z


@dataclasses.dataclass
class DecompConfig:
    bands: tuple[tuple[float, float], ...] = ((10.0, 50.0), (50.0, 100.0), (100.0, 140.0), (160.0, 320.0))
    coherence_band: tuple[float, float] | None = None   # None: [f1, nyquist/2]
    span: float = LOESS_SPAN
    projection: CompactProjection | None = None


def _segment_length(n: int) -> int:
    """Segment length giving N_SEGMENTS half-overlapping segments."""
    return max(16, (2 * n) // (N_SEGMENTS + 1))


def welch_psd(x: np.ndarray, sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided averaged-periodogram PSD, Hann taper, 50 percent overlap."""
    nper = min(_segment_length(x.size), x.size)
    f, p = sps.welch(
        x,
        fs=sample_rate,
        window="hann",
        nperseg=nper,
        noverlap=nper // 2,
        detrend=False,
        scaling="density",
    )
    return f, p


def band_power(w: Window, bands: Sequence[tuple[float, float]]) -> list[Feature]:
    """Integrated PSD per channel and band.

    Bin assignment is half-open (lo <= f < hi) so a complete partition of
    [0, nyquist] conserves total Welch power exactly up to rounding.
    """
    nyq = w.sample_rate / 2.0
    feats: list[Feature] = []
    for ch in range(w.channels.shape[0]):
        f, p = welch_psd(w.channels[ch], w.sample_rate)
        df = f[1] - f[0]
        for lo, hi in bands:
            if not (0.0 <= lo < hi <= nyq + df):
                raise ValueError(f"band [{lo}, {hi}] outside [0, {nyq}]")
            m = (f >= lo) & (f < hi)
            val = float(np.sum(p[m]) * df)
            feats.append(
                Feature(
                    name=f"bp_{lo:g}_{hi:g}_ch{ch}",
                    kind="band",
                    value=np.array([val]),
                    units="power",
                    meta={"channel": ch, "band": (float(lo), float(hi))},
                )
            )
    return feats


def total_power(w: Window, channel: int = 0) -> float:
    """Total integrated Welch power of one channel (DC..nyquist)."""
    f, p = welch_psd(w.channels[channel], w.sample_rate)
    return float(np.sum(p) * (f[1] - f[0]))


def _tricube(u: np.ndarray) -> np.ndarray:
    a = np.clip(1.0 - np.abs(u) ** 3, 0.0, None)
    return a**3


def _bisquare(u: np.ndarray) -> np.ndarray:
    a = np.clip(1.0 - u**2, 0.0, None)
    return a**2


def _wls_line(x: np.ndarray, y: np.ndarray, w: np.ndarray, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise weighted straight-line fit evaluated at x0.

    x, y, w are (m, q); x0 is (m,). Returns (value at x0, slope). Falls back
    to the weighted mean (slope 0) where the design is degenerate.
    """
    sw = np.sum(w, axis=1)
    sw = np.where(sw <= 0, 1.0, sw)
    xm = np.sum(w * x, axis=1) / sw
    ym = np.sum(w * y, axis=1) / sw
    xc = x - xm[:, None]
    sxx = np.sum(w * xc * xc, axis=1)
    sxy = np.sum(w * xc * (y - ym[:, None]), axis=1)
    slope = np.where(sxx > 1e-300, sxy / np.where(sxx > 1e-300, sxx, 1.0), 0.0)
    value = ym + slope * (x0 - xm)
    return value, slope


LOESS_GRID_STRIDE = 8


def loess_trend(y: np.ndarray, sample_rate: float, span: float = LOESS_SPAN) -> tuple[np.ndarray, float, float]:
    """Robust LOESS smoother over one channel.

    Local linear fits with tricube weights over the ``span`` fraction of
    nearest samples (contiguous neighborhoods, clamped at the edges), then
    LOESS_ITERS bisquare reweighting passes against the residuals. For speed
    the local fits are evaluated on a stride-LOESS_GRID_STRIDE grid (always
    including both ends) and interpolated linearly in between, the standard
    LOESS surface approximation; on straight lines both steps are exact.

    Returns (fitted curve, endpoint value, trend slope in units per second).
    The slope is a least-squares line through the interior of the smoothed
    curve, excluding half a neighborhood at each boundary where one-sided
    fits leak oscillatory energy into the local slope.

    Windows shorter than 3/span samples degrade to one global robust line.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    q = int(np.ceil(span * n))
    x = np.arange(n, dtype=np.float64)
    if n < int(np.ceil(3.0 / span)) or q < 4:
        # global robust straight line
        w = np.ones(n)
        val = slope = np.zeros(1)
        for _ in range(1 + LOESS_ITERS):
            val, slope = _wls_line(x[None, :], y[None, :], w[None, :], np.array([0.0]))
            fit = val[0] + slope[0] * x
            res = y - fit
            s = np.median(np.abs(res))
            w = _bisquare(res / (6.0 * s)) if s > 0 else np.ones(n)
        return fit, float(fit[-1]), float(slope[0] * sample_rate)

    grid = np.arange(0, n, LOESS_GRID_STRIDE)
    if grid[-1] != n - 1:
        grid = np.append(grid, n - 1)
    m = grid.size
    starts = np.clip(grid - (q - 1) // 2, 0, n - q)
    win = np.lib.stride_tricks.sliding_window_view  # (n-q+1, q) views
    xw = win(x, q)[starts]                          # (m, q)
    yw = win(y, q)[starts]
    xg = x[grid]
    dist = np.abs(xw - xg[:, None])
    dmax = np.maximum(dist[:, -1], dist[:, 0])
    dmax = np.where(dmax <= 0, 1.0, dmax)
    kern = _tricube(dist / dmax[:, None])

    robust = np.ones(n)
    fit_g = y[grid].copy()
    for _ in range(1 + LOESS_ITERS):
        rw = win(robust, q)[starts]
        wgt = kern * rw
        fit_g, _ = _wls_line(xw, yw, wgt, xg)
        fit = np.interp(x, xg, fit_g)
        res = y - fit
        s = np.median(np.abs(res))
        robust = _bisquare(res / (6.0 * s)) if s > 0 else np.ones(n)

    fit = np.interp(x, xg, fit_g)
    half = q // 2
    interior = (grid >= half) & (grid <= n - 1 - half)
    if interior.sum() >= 2:
        coef = np.polyfit(xg[interior], fit_g[interior], 1)
        slope = float(coef[0])
    else:
        coef = np.polyfit(xg, fit_g, 1)
        slope = float(coef[0])
    return fit, float(fit[-1]), slope * sample_rate


def trend(w: Window, span: float = LOESS_SPAN) -> list[Feature]:
    """Per-channel robust trend: value = [endpoint level, endpoint slope/s]."""
    feats = []
    for ch in range(w.channels.shape[0]):
        _, level, slope = loess_trend(w.channels[ch], w.sample_rate, span)
        feats.append(
            Feature(
                name=f"trend_ch{ch}",
                kind="trend",
                value=np.array([level, slope]),
                units="amplitude, amplitude/s",
                meta={"channel": ch, "span": span},
            )
        )
    return feats


def coherence(
    w: Window,
    pairs: Sequence[tuple[int, int]],
    band: tuple[float, float] | None = None,
) -> list[Feature]:
    """Band-averaged magnitude-squared coherence per channel pair.

    Uses Welch auto- and cross-spectra with the same segmentation as
    band_power: coh = |S_xy|^2 / (S_xx * S_yy), averaged over ``band``
    (default: [first nonzero bin, nyquist/2]). Identical channel indices are
    answered with 1.0 plus a warning rather than an error.
    """
    n = w.channels.shape[1]
    nper = min(_segment_length(n), n)
    feats = []
    for i, j in pairs:
        if i == j:
            log.warning("coherence requested for identical channels (%d, %d)", i, j)
            val = 1.0
        else:
            f, cxy = sps.coherence(
                w.channels[i],
                w.channels[j],
                fs=w.sample_rate,
                window="hann",
                nperseg=nper,
                noverlap=nper // 2,
                detrend=False,
            )
            lo, hi = band if band is not None else (f[1], w.sample_rate / 4.0)
            m = (f >= lo) & (f <= hi)
            val = float(np.mean(cxy[m])) if m.any() else 0.0
        feats.append(
            Feature(
                name=f"coh_ch{i}_ch{j}_{BROAD_BAND_NAME}",
                kind="coherence",
                value=np.array([val]),
                units="coherence",
                meta={"pair": (i, j), "band": band},
            )
        )
    return feats


def fit_compact_projection(feature_matrix: np.ndarray) -> CompactProjection:
    """Fit the frozen 2-component projection on warm-up feature rows.

    Rows are per-window base-feature scalars (everything except pc1/pc2).
    Columns are standardized before the principal directions are extracted,
    so heavy-tailed power features do not dominate by scale alone.
    """
    m = np.asarray(feature_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError("need at least 2 warm-up rows to fit the projection")
    mean = m.mean(axis=0)
    scale = m.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    z = (m - mean) / scale
    # principal directions of the standardized matrix
    _, _, vt = np.linalg.svd(z, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    return CompactProjection(mean=mean, scale=scale, components=comps)


def base_scalars(feats: Sequence[Feature]) -> np.ndarray:
    """Flatten non-compact feature values into one vector (bank order)."""
    vals = [f.value for f in feats if f.kind != "compact"]
    return np.concatenate(vals) if vals else np.zeros(0)


def decompose(w: Window, cfg: DecompConfig | None = None) -> list[Feature]:
    """Full per-window feature bank in deterministic order."""
    cfg = cfg or DecompConfig()
    n_ch = w.channels.shape[0]
    feats = band_power(w, cfg.bands)
    feats += trend(w, cfg.span)
    pairs = [(i, j) for i in range(n_ch) for j in range(i + 1, n_ch)]
    feats += coherence(w, pairs, cfg.coherence_band)
    base = base_scalars(feats)
    if cfg.projection is not None:
        pc = cfg.projection.apply(base)
    else:
        pc = np.zeros(2)
    for k in range(2):
        feats.append(
            Feature(
                name=f"pc{k + 1}",
                kind="compact",
                value=np.array([float(pc[k])]),
                units="a.u.",
                meta={"frozen": cfg.projection is not None},
            )
        )
    for f in feats:
        f.meta.setdefault("window_seq", w.seq)
    return feats


def feature_health(feats: Sequence[Feature], w: Window) -> list[bool]:
    """Per-feature health mask: False when a source channel has failed."""
    ok = []
    for f in feats:
        if f.kind == "band" or f.kind == "trend":
            ok.append(w.health[f.meta["channel"]] != FAILED)
        elif f.kind == "coherence":
            i, j = f.meta["pair"]
            ok.append(w.health[i] != FAILED and w.health[j] != FAILED)
        else:
            ok.append(True)
    return ok
