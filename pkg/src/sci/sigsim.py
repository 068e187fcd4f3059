"""Synthetic vibration and classification streams.

Generates windowed sensor records for three stream families:

* ``bearing`` -- a two-channel rotating-machine rig. Healthy windows carry a
  30 Hz shaft tone in broadband Gaussian noise. Faulty windows add a 120 Hz
  impulse train (decaying exponentials, time constant 1/(8*120) s, amplitude
  three times the shaft tone) the way an inner-race defect strikes once per
  ball pass. The second channel is a scaled copy of the deterministic motion
  plus independent sensor noise, so cross-channel coherence is high exactly
  where the machine, not the noise, is speaking.
* ``tones`` -- a two-class stream for graded-difficulty classification. Each
  class is a tone at its own frequency; ``difficulty`` linearly mixes the two
  class tones into each other until, at difficulty 1.0, the class-conditional
  distributions coincide and no classifier can beat chance.
* obliteration -- any window can be re-noised to an exact SNR, which is how
  the out-of-distribution exam erases structure while keeping scale.

Windows advance by half a window length (50 percent overlap in the timebase).
Deterministic components are phase-continuous across windows because they are
evaluated on absolute time; noise is drawn fresh per window. Every sample is
a pure function of ``(config, window seq)``, so streams replay exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

OK = "ok"
DEGRADED = "degraded"
FAILED = "failed"

HEALTH_LEVELS = (OK, DEGRADED, FAILED)

# Gap handling thresholds (fractions of window samples flagged per channel).
GAP_INTERP_MAX = 0.05   # at or below: linear interpolation, health kept
GAP_FAILED_MIN = 0.50   # at or above: channel declared failed
STREAM_SCHEMA = "sci.stream/1"


class StreamError(ValueError):
    """Raised when a raw window violates the stream contract."""


@dataclasses.dataclass(frozen=True)
class StreamConfig:
    """Full parameterization of a synthetic stream.

    ``(config, seed)`` determines every emitted sample. ``kind`` selects the
    generator family ("bearing" or "tones"); fields not used by a family are
    ignored by it.
    """

    kind: str = "bearing"
    seed: int = 0
    n_channels: int = 2
    window_len: int = 2048
    sample_rate: float = 10240.0
    # bearing family
    shaft_hz: float = 30.0
    shaft_amp: float = 1.0
    fault_hz: float = 120.0
    fault_amp_ratio: float = 3.0     # impulse amplitude / shaft amplitude
    # tones family
    tone_hz: tuple[float, float] = (200.0, 400.0)
    tone_amp: float = 1.0
    difficulty: float = 0.0          # 0 = separable, 1 = identical classes
    # shared
    noise_sigma: float = 1.0
    fault_prob: float = 0.5          # P(label == 1)
    cross_gain: float = 0.8          # deterministic motion gain on channel 1

    def hop(self) -> int:
        return self.window_len // 2


@dataclasses.dataclass
class Window:
    """One windowed multi-channel record.

    channels has shape (n_channels, window_len). ``gaps``, when present, is a
    boolean mask of the same shape marking samples flagged invalid upstream;
    ingestion resolves it. ``label`` is the ground-truth class when known.
    """

    seq: int
    t_start: float
    sample_rate: float
    channels: np.ndarray
    health: list[str]
    label: int | None = None
    gaps: np.ndarray | None = None

    def copy(self) -> "Window":
        return Window(
            seq=self.seq,
            t_start=self.t_start,
            sample_rate=self.sample_rate,
            channels=self.channels.copy(),
            health=list(self.health),
            label=self.label,
            gaps=None if self.gaps is None else self.gaps.copy(),
        )


def _rng(*keys: int) -> np.random.Generator:
    """Deterministic generator keyed on a tuple of non-negative ints."""
    return np.random.default_rng([int(k) & 0x7FFFFFFF for k in keys])


def _times(cfg: StreamConfig, seq: int) -> np.ndarray:
    t0 = seq * cfg.hop() / cfg.sample_rate
    return t0 + np.arange(cfg.window_len) / cfg.sample_rate


def _impulse_train(t: np.ndarray, hz: float, tau: float) -> np.ndarray:
    """Sum of causal decaying exponentials fired every 1/hz seconds."""
    out = np.zeros_like(t)
    # include impulses shortly before the window whose tails still matter
    k0 = int(np.floor((t[0] - 10.0 * tau) * hz))
    k1 = int(np.floor(t[-1] * hz))
    for k in range(k0, k1 + 1):
        tk = k / hz
        active = t >= tk
        out[active] += np.exp(-(t[active] - tk) / tau)
    return out


def _draw_label(cfg: StreamConfig, seq: int) -> int:
    return int(_rng(cfg.seed, 11, seq).random() < cfg.fault_prob)


def generate_bearing(cfg: StreamConfig, seq: int, label: int | None = None) -> Window:
    """Synthesize one bearing window.

    Parameters
    ----------
    cfg : StreamConfig
        Stream parameters; ``cfg.kind`` is not consulted.
    seq : int
        Window sequence number; fixes the timebase and the noise draw.
    label : int, optional
        0 healthy, 1 faulty. Drawn from ``cfg.fault_prob`` when omitted.

    Returns
    -------
    Window
        Two-channel record with ``label`` set and all channels healthy.
    """
    if label is None:
        label = _draw_label(cfg, seq)
    t = _times(cfg, seq)
    phase = 2.0 * np.pi * _rng(cfg.seed, 7).random()

    motion = cfg.shaft_amp * np.sin(2.0 * np.pi * cfg.shaft_hz * t + phase)
    if label == 1:
        tau = 1.0 / (8.0 * cfg.fault_hz)
        motion = motion + (cfg.fault_amp_ratio * cfg.shaft_amp) * _impulse_train(
            t, cfg.fault_hz, tau
        )

    rng = _rng(cfg.seed, 13, seq)
    gains = [1.0, cfg.cross_gain] + [0.5] * max(0, cfg.n_channels - 2)
    chans = np.stack(
        [
            g * motion + rng.normal(0.0, cfg.noise_sigma, t.size)
            for g in gains[: cfg.n_channels]
        ]
    )
    return Window(
        seq=seq,
        t_start=float(t[0]),
        sample_rate=cfg.sample_rate,
        channels=chans,
        health=[OK] * cfg.n_channels,
        label=int(label),
    )


def generate_tones(cfg: StreamConfig, seq: int, label: int | None = None) -> Window:
    """Synthesize one two-class tone window.

    Class c carries tone ``tone_hz[c]``; ``difficulty`` d mixes in the other
    class's tone with weight d/2, so at d=1 both classes emit the identical
    half-and-half mixture and separation vanishes.
    """
    if label is None:
        label = _draw_label(cfg, seq)
    t = _times(cfg, seq)
    # phases are a property of each tone, not of the class, so that at
    # difficulty 1 both classes emit the same signal
    ph = 2.0 * np.pi * _rng(cfg.seed, 7).random(2)

    mix = 0.5 * float(np.clip(cfg.difficulty, 0.0, 1.0))
    f_own = cfg.tone_hz[label]
    f_other = cfg.tone_hz[1 - label]
    motion = cfg.tone_amp * (
        (1.0 - mix) * np.sin(2.0 * np.pi * f_own * t + ph[label])
        + mix * np.sin(2.0 * np.pi * f_other * t + ph[1 - label])
    )

    rng = _rng(cfg.seed, 13, seq)
    gains = [1.0, cfg.cross_gain] + [0.5] * max(0, cfg.n_channels - 2)
    chans = np.stack(
        [
            g * motion + rng.normal(0.0, cfg.noise_sigma, t.size)
            for g in gains[: cfg.n_channels]
        ]
    )
    return Window(
        seq=seq,
        t_start=float(t[0]),
        sample_rate=cfg.sample_rate,
        channels=chans,
        health=[OK] * cfg.n_channels,
        label=int(label),
    )


_GENERATORS = {"bearing": generate_bearing, "tones": generate_tones}


def generate(cfg: StreamConfig, seq: int, label: int | None = None) -> Window:
    try:
        fn = _GENERATORS[cfg.kind]
    except KeyError:
        raise StreamError(f"unknown stream kind {cfg.kind!r}") from None
    return fn(cfg, seq, label)


def make_stream(cfg: StreamConfig, n_windows: int, start_seq: int = 0) -> list[Window]:
    """Generate ``n_windows`` consecutive windows starting at ``start_seq``."""
    return [generate(cfg, s) for s in range(start_seq, start_seq + n_windows)]


def obliterate(w: Window, snr_db: float, seed: int = 0) -> Window:
    """Re-noise a window to an exact signal-to-noise ratio.

    Noise variance per channel is ``P_ch * 10**(-snr_db/10)`` where P_ch is
    that channel's mean square. A zero-power channel uses reference power 1.0,
    so the output is then pure noise at the variance the ratio requests.
    Label, seq, timebase, and health are preserved.
    """
    out = w.copy()
    rng = _rng(seed, 17, w.seq)
    for ch in range(out.channels.shape[0]):
        p_sig = float(np.mean(out.channels[ch] ** 2))
        p_ref = p_sig if p_sig > 0.0 else 1.0
        sigma = np.sqrt(p_ref * 10.0 ** (-snr_db / 10.0))
        out.channels[ch] = out.channels[ch] + rng.normal(
            0.0, sigma, out.channels.shape[1]
        )
    return out


class StreamIngestor:
    """Validates and repairs raw windows at the loop boundary.

    Enforces monotone seq / t_start within a session, resolves flagged gaps
    (linear interpolation when at most ``GAP_INTERP_MAX`` of a channel's
    samples are flagged; zero-hold plus a degraded mark for longer gaps;
    ``failed`` at ``GAP_FAILED_MIN`` or worse), and never touches unflagged
    samples. Ingesting an already-clean window is a no-op, so the operation
    is idempotent.
    """

    def __init__(self) -> None:
        self._last_seq: int | None = None
        self._last_t: float | None = None

    def ingest(self, raw: Window) -> Window:
        if self._last_seq is not None and raw.seq <= self._last_seq:
            raise StreamError(
                f"non-monotone seq: {raw.seq} after {self._last_seq}"
            )
        if self._last_t is not None and raw.t_start <= self._last_t:
            raise StreamError(
                f"non-monotone t_start: {raw.t_start} after {self._last_t}"
            )
        if raw.channels.ndim != 2:
            raise StreamError("channels must be 2-D (n_channels, n_samples)")

        w = raw.copy()
        if raw.gaps is not None:
            gaps = raw.gaps
            for ch in range(w.channels.shape[0]):
                g = gaps[ch]
                frac = float(np.mean(g))
                if frac == 0.0:
                    continue
                if frac >= GAP_FAILED_MIN:
                    w.channels[ch, g] = 0.0
                    w.health[ch] = FAILED
                elif frac > GAP_INTERP_MAX:
                    w.channels[ch, g] = 0.0
                    if w.health[ch] == OK:
                        w.health[ch] = DEGRADED
                    log.warning(
                        "window %d ch%d: %.1f%% gap zero-held, health degraded",
                        w.seq, ch, 100.0 * frac,
                    )
                else:
                    good = np.flatnonzero(~g)
                    if good.size == 0:
                        w.channels[ch, :] = 0.0
                        w.health[ch] = FAILED
                    else:
                        w.channels[ch, g] = np.interp(
                            np.flatnonzero(g), good, w.channels[ch, good]
                        )
            w.gaps = None

        bad = ~np.isfinite(w.channels)
        if bad.any():
            for ch in range(w.channels.shape[0]):
                if bad[ch].any():
                    w.channels[ch, bad[ch]] = 0.0
                    w.health[ch] = FAILED
                    log.warning("window %d ch%d: non-finite samples, channel failed", w.seq, ch)
        if all(h == FAILED for h in w.health):
            raise StreamError(f"window {w.seq}: all channels failed")

        self._last_seq = w.seq
        self._last_t = w.t_start
        return w


# ---------------------------------------------------------------------------
# On-disk stream format: one JSON object per line, header first.

def write_stream(path: str, windows: Sequence[Window], cfg: StreamConfig | None = None) -> None:
    with open(path, "w") as fh:
        header: dict = {"schema": STREAM_SCHEMA}
        if cfg is not None:
            header["config"] = dataclasses.asdict(cfg)
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for w in windows:
            rec = {
                "seq": w.seq,
                "t_start": w.t_start,
                "sample_rate": w.sample_rate,
                "label": w.label,
                "health": w.health,
                "channels": w.channels.tolist(),
            }
            if w.gaps is not None:
                rec["gaps"] = w.gaps.astype(int).tolist()
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_stream(path: str) -> tuple[StreamConfig | None, list[Window]]:
    windows: list[Window] = []
    cfg = None
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != STREAM_SCHEMA:
            raise StreamError(f"unsupported stream schema {header.get('schema')!r}")
        if header.get("config") is not None:
            raw = dict(header["config"])
            raw["tone_hz"] = tuple(raw.get("tone_hz", (200.0, 400.0)))
            cfg = StreamConfig(**raw)
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            gaps = rec.get("gaps")
            windows.append(
                Window(
                    seq=rec["seq"],
                    t_start=rec["t_start"],
                    sample_rate=rec["sample_rate"],
                    channels=np.asarray(rec["channels"], dtype=np.float64),
                    health=list(rec["health"]),
                    label=rec["label"],
                    gaps=None if gaps is None else np.asarray(gaps, dtype=bool),
                )
            )
    return cfg, windows


def iter_stream(path: str) -> Iterator[Window]:
    """Stream windows lazily from disk (header consumed and discarded)."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != STREAM_SCHEMA:
            raise StreamError(f"unsupported stream schema {header.get('schema')!r}")
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            gaps = rec.get("gaps")
            yield Window(
                seq=rec["seq"],
                t_start=rec["t_start"],
                sample_rate=rec["sample_rate"],
                channels=np.asarray(rec["channels"], dtype=np.float64),
                health=list(rec["health"]),
                label=rec["label"],
                gaps=None if gaps is None else np.asarray(gaps, dtype=bool),
            )
