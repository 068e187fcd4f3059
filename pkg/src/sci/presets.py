"""Named experiment presets and the per-seed artifact build.

A preset bundles everything a run needs: the stream recipe, the feature
decomposition bands, the episode stopping policy, interpreter training
settings, and the domain constraint list for the rationale component. The
three shipped presets are

* ``bearing``        -- two-channel vibration rig, healthy vs fault;
* ``synthetic-class``-- graded-difficulty two-tone classification stream
                        tuned to a low-teens base error rate;
* ``ood-exam``       -- the bearing recipe whose evaluation windows are
                        re-noised to an exact (very poor) SNR, erasing the
                        structure the model was trained on.

``build_artifacts(preset, seed)`` performs the deterministic per-seed build:
generate the training stream, decompose it, freeze the compact projection on
the warm-up split, fit the feature normalizer, train the interpreter, fit
the clarity calibrators on a held-out calibration split against correctness
targets, and map markers to classes by co-occurrence so constraint rules and
simulated operator feedback can name concrete marker ids.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
import json
import logging

import numpy as np

from .decomp import CompactProjection, DecompConfig, base_scalars, decompose, fit_compact_projection
from .interpreter import Theta, init_theta, interpret, train
from .mcloop import EpisodePolicy, run_episode
from .sigsim import StreamConfig, Window, generate, obliterate
from .spcore import Calibrator, ConstraintRule, clarity, fit_calibrator, marker_margin

log = logging.getLogger(__name__)

N_MARKERS = 8
NORM_CLIP = 8.0
WARMUP_ROWS = 64
TEMP_GRID = (1.0, 0.8, 0.65, 0.5, 0.4, 0.3, 0.25, 0.2, 0.15)
ABSTAIN_BAND = 0.08
TEMP_STREAM = 37          # rng tag for temperature-selection episodes


class PresetError(KeyError):
    pass


@dataclasses.dataclass(frozen=True)
class Preset:
    """Static description of one experiment domain."""

    name: str
    stream: StreamConfig
    policy: EpisodePolicy
    bands: tuple[tuple[float, float], ...]
    n_train: int
    n_cal: int
    n_eval: int
    epochs: int
    lam_v: float = 0.5
    gamma_reg: float = 0.1
    hidden: int = 32
    n_markers: int = N_MARKERS
    ood_snr_db: float | None = None      # evaluation windows re-noised when set
    rules_file: str | None = None
    count_abstain_as_error: bool = True
    abstain_band: float = ABSTAIN_BAND   # tolerated abstention when sharpening

    def decomp_config(self, projection: CompactProjection | None = None) -> DecompConfig:
        return DecompConfig(bands=self.bands, projection=projection)


_BANDS = ((10.0, 50.0), (50.0, 100.0), (100.0, 140.0), (160.0, 320.0))

PRESETS: dict[str, Preset] = {
    "bearing": Preset(
        name="bearing",
        stream=StreamConfig(kind="bearing", noise_sigma=4.0),
        policy=EpisodePolicy(sp_star=0.85, t_max=25, patience=3),
        bands=_BANDS,
        n_train=240,
        n_cal=120,
        n_eval=300,
        epochs=8,
        rules_file="bearing_rules.json",
        # wide tolerance: ambiguous windows should run long and abstain,
        # which is what makes the terminal gap a useful error signal
        abstain_band=0.30,
    ),
    "synthetic-class": Preset(
        name="synthetic-class",
        stream=StreamConfig(kind="tones", difficulty=0.82, noise_sigma=2.0),
        policy=EpisodePolicy(sp_star=0.85, t_max=25, patience=3),
        bands=((150.0, 250.0), (350.0, 450.0), (50.0, 150.0), (450.0, 650.0)),
        n_train=240,
        n_cal=120,
        n_eval=400,
        epochs=8,
        rules_file="synthetic_class_rules.json",
        # difficulty and tolerance tuned together for a low-teens base error
        # with most of it concentrated in long, abstaining episodes
        abstain_band=0.14,
    ),
    "ood-exam": Preset(
        name="ood-exam",
        stream=StreamConfig(kind="bearing", noise_sigma=4.0),
        policy=EpisodePolicy(sp_star=0.85, t_max=25, patience=3),
        bands=_BANDS,
        n_train=240,
        n_cal=120,
        n_eval=300,
        epochs=8,
        ood_snr_db=-40.0,
        rules_file="bearing_rules.json",
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise PresetError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None


@dataclasses.dataclass
class Normalizer:
    """Per-scalar z-score with symmetric clipping."""

    mean: np.ndarray
    std: np.ndarray
    clip: float = NORM_CLIP

    def apply(self, values: np.ndarray) -> np.ndarray:
        z = (np.asarray(values, dtype=np.float64) - self.mean) / self.std
        return np.clip(z, -self.clip, self.clip)


def fit_normalizer(rows: np.ndarray, clip: float = NORM_CLIP) -> Normalizer:
    rows = np.asarray(rows, dtype=np.float64)
    std = rows.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return Normalizer(mean=rows.mean(axis=0), std=std, clip=clip)


@dataclasses.dataclass
class Artifacts:
    """Everything a session or evaluation run needs, built from one seed."""

    preset: Preset
    seed: int
    theta: Theta
    normalizer: Normalizer
    projection: CompactProjection
    calibrators: list[Calibrator]
    rules: tuple[ConstraintRule, ...]
    marker_map: dict[int, int]           # class label -> marker id
    names: list[str]
    widths: list[int]
    train_accuracy: float
    cal_accuracy: float

    def feature_vector(self, feats) -> np.ndarray:
        """Normalized flat feature vector for one decomposed window."""
        values = np.concatenate([f.value for f in feats])
        return self.normalizer.apply(values)


def _load_rules(preset: Preset, marker_map: dict[int, int]) -> tuple[ConstraintRule, ...]:
    """Instantiate the preset's constraint list against concrete marker ids.

    Rule files name marker roles ("fault" = class-1 marker, "healthy" =
    class-0 marker); the co-occurrence map resolves roles to ids per seed.
    """
    if preset.rules_file is None:
        return ()
    text = (
        importlib.resources.files("sci").joinpath("data", preset.rules_file).read_text()
    )
    spec = json.loads(text)
    role_to_marker = {"healthy": marker_map.get(0), "fault": marker_map.get(1)}
    rules = []
    for r in spec["rules"]:
        marker = role_to_marker.get(r["role"])
        if marker is None:
            log.warning("rule role %r has no mapped marker; rule skipped", r["role"])
            continue
        band = r.get("band_within")
        rules.append(
            ConstraintRule(
                marker=int(marker),
                kinds=tuple(r["kinds"]) if r.get("kinds") else None,
                band_within=tuple(band) if band else None,
            )
        )
    return tuple(rules)


def _calibrate_temperature(
    theta: Theta, x_cal: np.ndarray, policy: EpisodePolicy, seed: int,
    band: float = ABSTAIN_BAND,
) -> tuple[float, float]:
    """Mildest decision sharpening that keeps abstentions in band.

    The stopping rule compares running-mean prediction clarity against a
    fixed target, so an otherwise accurate model whose softmax is soft
    abstains constantly. Dividing the task logits by a temperature below 1
    sharpens every pass without changing any argmax, the markers, or their
    gradients; this picks the largest grid temperature whose abstention
    rate on the calibration split is acceptable (the sharpest one if none
    qualifies).
    """
    rate = 1.0
    for t in TEMP_GRID:
        theta.temperature = float(t)
        n_abs = 0
        for i, x in enumerate(x_cal):
            ep = run_episode(
                theta, x, policy, seed=np.random.default_rng([seed, TEMP_STREAM, i])
            )
            n_abs += ep.outcome == "abstained"
        rate = n_abs / len(x_cal)
        if rate <= band:
            return float(t), rate
    log.warning("temperature floor reached with abstention rate %.3f", rate)
    return float(TEMP_GRID[-1]), rate


def _decompose_rows(
    windows: list[Window], cfg: DecompConfig
) -> tuple[np.ndarray, list, list[str], list[int]]:
    """Feature rows (n_windows, n_scalars) plus names/widths of the bank."""
    rows = []
    banks = []
    names: list[str] = []
    widths: list[int] = []
    for w in windows:
        feats = decompose(w, cfg)
        banks.append(feats)
        rows.append(np.concatenate([f.value for f in feats]))
        if not names:
            names = [f.name for f in feats]
            widths = [f.width() for f in feats]
    return np.asarray(rows), banks, names, widths


def build_artifacts(preset: Preset, seed: int) -> Artifacts:
    """Deterministic per-seed build of the trained loop state."""
    cfg = dataclasses.replace(preset.stream, seed=seed)
    n_total = preset.n_train + preset.n_cal
    windows = [generate(cfg, s) for s in range(n_total)]
    labels = np.array([w.label for w in windows], dtype=np.int64)

    # freeze the compact projection on the warm-up slice, then decompose all
    warm_cfg = preset.decomp_config(projection=None)
    warm_rows = []
    for w in windows[: min(WARMUP_ROWS, preset.n_train)]:
        warm_rows.append(base_scalars(decompose(w, warm_cfg)))
    projection = fit_compact_projection(np.asarray(warm_rows))

    full_cfg = preset.decomp_config(projection=projection)
    rows, _, names, widths = _decompose_rows(windows, full_cfg)

    normalizer = fit_normalizer(rows[: preset.n_train])
    x_all = normalizer.apply(rows)
    x_train, y_train = x_all[: preset.n_train], labels[: preset.n_train]
    x_cal, y_cal = x_all[preset.n_train :], labels[preset.n_train :]

    theta = init_theta(
        d=x_all.shape[1],
        n_classes=2,
        n_markers=preset.n_markers,
        seed=seed,
        hidden=preset.hidden,
    )
    train(
        theta,
        x_train,
        y_train,
        epochs=preset.epochs,
        seed=seed,
        lam_v=preset.lam_v,
        gamma_reg=preset.gamma_reg,
    )
    _calibrate_temperature(theta, x_cal, preset.policy, seed, band=preset.abstain_band)

    # calibration split: deterministic read-outs, correctness targets
    interps = [interpret(theta, x, names, widths) for x in x_cal]
    correct = np.array(
        [float(i.prediction == y) for i, y in zip(interps, y_cal)]
    )
    k1 = np.array([clarity(i.q) for i in interps])
    k2 = np.array([marker_margin(i.q) for i in interps])
    calibrators = [
        fit_calibrator(k1, correct, kind="isotonic"),
        fit_calibrator(k2, correct, kind="isotonic"),
        Calibrator(),   # constraint fraction: already a fraction in [0, 1]
        Calibrator(),   # rolling accuracy: likewise
    ]

    # marker <-> class association by co-occurrence of the dominant marker
    co = np.zeros((preset.n_markers, 2))
    for i, y in zip(interps, y_cal):
        co[int(np.argmax(i.q)), int(y)] += 1.0
    marker_map: dict[int, int] = {}
    m1 = int(np.argmax(co[:, 1]))
    marker_map[1] = m1
    co0 = co[:, 0].copy()
    co0[m1] = -1.0          # classes must map to distinct markers
    marker_map[0] = int(np.argmax(co0))

    rules = _load_rules(preset, marker_map)

    from .interpreter import accuracy

    return Artifacts(
        preset=preset,
        seed=seed,
        theta=theta,
        normalizer=normalizer,
        projection=projection,
        calibrators=calibrators,
        rules=rules,
        marker_map=marker_map,
        names=names,
        widths=widths,
        train_accuracy=accuracy(theta, x_train, y_train),
        cal_accuracy=float(np.mean(correct)),
    )


def eval_windows(preset: Preset, seed: int, n: int | None = None,
                 start_seq: int | None = None) -> list[Window]:
    """The evaluation stream: fresh sequence numbers after the build split.

    For the out-of-distribution exam the windows are re-noised to the
    preset's exact SNR after generation (labels and timebase preserved).
    """
    cfg = dataclasses.replace(preset.stream, seed=seed)
    n = preset.n_eval if n is None else n
    start = preset.n_train + preset.n_cal if start_seq is None else start_seq
    out = []
    for s in range(start, start + n):
        w = generate(cfg, s)
        if preset.ood_snr_db is not None:
            w = obliterate(w, preset.ood_snr_db, seed=seed)
        out.append(w)
    return out
