"""Closed-loop runtime: one regulated decision cycle per stream window.

Each cycle runs the seven loop modules in a fixed order:

1. ingest    -- validate sequencing, repair flagged gaps;
2. decompose -- band/trend/coherence/compact features (frozen projection);
3. weigh     -- reliability scores gate each feature's influence;
4. decide    -- adaptive stochastic-pass episode plus a deterministic
                marker read-out with per-marker rationales;
5. evaluate  -- the four clarity components, their weighted aggregate, and
                the tracking quantities (gap to target, quadratic gap
                energy, adaptive no-op band);
6. regulate  -- operator feedback is drained and aggregated, the effective
                human gain is scheduled under the stability budget, and the
                safeguarded parameter step runs (trust region, monotone
                acceptance, rollback);
7. slow path -- a periodic recalibration hook, currently a logged no-op.

``cycle`` returns one audit record; ``audit_line`` renders it canonically so
a live service replaying a recorded stream writes byte-identical audit files
to the batch harness. All randomness is keyed by (build seed, window seq),
so records are a pure function of the artifact build and the window stream
plus any submitted feedback.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from collections import OrderedDict

import numpy as np

from .controller import (
    ControllerState,
    rollback_check,
    schedule_gain,
)
from .controller import step as controller_step
from .decomp import decompose, feature_health
from .feedback import FeedbackBuffer, FeedbackError, FeedbackEvent, build_u_h
from .interpreter import grad_sp, interpret
from .mcloop import run_episode
from .presets import Artifacts
from .reliability import ReliabilityState, weighted_view
from .reliability import step as reliability_step
from .sigsim import StreamIngestor, Window
from .spcore import SPState, components, evaluate

log = logging.getLogger(__name__)

AUDIT_SCHEMA = "sci.audit/1"
INPUT_CACHE = 64          # windows kept addressable for feedback
META_PERIOD = 64          # cycles between slow-path ticks
PROBE_EPS = 1e-2          # one-sided probe length for gain estimation
MODULES = ("m1", "m2", "m3", "m4", "m5", "m6", "m7")
EPISODE_STREAM = 23       # rng stream tag for per-window episode noise


def _json_safe(obj):
    """Recursively convert to plain JSON types; non-finite floats -> None."""
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_safe(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def audit_line(record: dict) -> str:
    """Canonical single-line rendering used by every audit writer."""
    return json.dumps(_json_safe(record), sort_keys=True, separators=(",", ":"))


def input_digest(w: Window) -> str:
    """Content hash of the ingested samples, keyed by sequence number."""
    h = hashlib.sha256()
    h.update(np.int64(w.seq).tobytes())
    h.update(np.ascontiguousarray(w.channels, dtype=np.float64).tobytes())
    return h.hexdigest()


class Session:
    """One live loop instance over a window stream.

    Parameters beyond the artifact bundle exist for experiments: ``eta`` and
    ``lambda_h_init`` pass through to the parameter controller, ``sp_star``
    overrides the preset's clarity target, and ``meta_period`` sets the
    slow-path cadence.
    """

    def __init__(
        self,
        art: Artifacts,
        session_id: str | None = None,
        eta: float | None = None,
        lambda_h_init: float | None = None,
        sp_star: float | None = None,
        meta_period: int = META_PERIOD,
    ) -> None:
        self.art = art
        self.session_id = session_id or f"{art.preset.name}-{art.seed}"
        self.policy = art.preset.policy
        self.ingestor = StreamIngestor()
        self.rel = ReliabilityState(names=list(art.names))
        self.spstate = SPState(
            sp_star=self.policy.sp_star if sp_star is None else sp_star,
            rules=art.rules,
            calibrators=list(art.calibrators),
        )
        ckw = {}
        if eta is not None:
            ckw["eta"] = eta
        if lambda_h_init is not None:
            ckw["lambda_h_init"] = lambda_h_init
        self.cstate = ControllerState(theta=art.theta.vec, **ckw)
        art.theta.version = self.cstate.version
        self.buffer = FeedbackBuffer()
        self.meta_period = int(meta_period)
        self.ticks: dict[str, int] = dict.fromkeys(MODULES, 0)
        self.cycles = 0
        self.last_record: dict | None = None
        self._inputs: OrderedDict[int, np.ndarray] = OrderedDict()
        self._dcfg = art.preset.decomp_config(projection=art.projection)

    # ------------------------------------------------------------------
    @property
    def theta_version(self) -> int:
        return self.cstate.version

    def submit_feedback(self, payload: dict | FeedbackEvent) -> dict:
        """Validate, stamp freshness against the live parameter version,
        and queue for the next cycle. Stale events are queued too — the
        aggregator discards them with a log entry — so the acknowledgment
        is the operator's only honest freshness signal."""
        if isinstance(payload, FeedbackEvent):
            ev = payload
        else:
            try:
                data = dict(payload)
                if data.get("nudge") is not None:
                    fname, sign = data["nudge"]
                    data["nudge"] = (str(fname), int(sign))
                ev = FeedbackEvent(**data)
            except FeedbackError:
                raise
            except (TypeError, ValueError, KeyError) as e:
                # missing/unknown/ill-typed fields from the wire must come
                # back as a rejection, not kill the connection
                raise FeedbackError(f"bad feedback payload: {e}") from None
        fresh = ev.theta_version == self.cstate.version
        self.buffer.enqueue(ev)
        return {
            "event_id": ev.event_id,
            "fresh": fresh,
            "theta_version": self.cstate.version,
        }

    # ------------------------------------------------------------------
    def _top_meta(self, top_feats, by_name) -> list[dict | None]:
        out: list[dict | None] = []
        for tf in top_feats:
            if tf is None:
                out.append(None)
                continue
            f = by_name.get(tf[0])
            out.append(None if f is None else {"kind": f.kind, "meta": f.meta})
        return out

    def cycle(self, window: Window) -> dict:
        art = self.art

        w = self.ingestor.ingest(window)                          # module 1
        self.ticks["m1"] += 1

        feats = decompose(w, self._dcfg)                          # module 2
        self.ticks["m2"] += 1

        healthy = feature_health(feats, w)                        # module 3
        wts = reliability_step(self.rel, feats, healthy)
        values = np.concatenate([f.value for f in feats])
        x = weighted_view(art.normalizer.apply(values), wts, art.widths)
        self._inputs[w.seq] = x
        while len(self._inputs) > INPUT_CACHE:
            self._inputs.popitem(last=False)
        self.ticks["m3"] += 1

        rng = np.random.default_rng([art.seed, EPISODE_STREAM, w.seq])
        ep = run_episode(art.theta, x, self.policy, seed=rng,    # module 4
                         label=w.label, seq=w.seq)
        interp = interpret(art.theta, x, art.names, art.widths)
        self.ticks["m4"] += 1

        by_name = {f.name: f for f in feats}                      # module 5
        top_meta = self._top_meta(interp.top_feats, by_name)
        outcomes = list(self.spstate.outcomes)
        evaluate(self.spstate, interp.q, top_meta)
        sp = self.spstate.sp
        self.ticks["m5"] += 1

        events = self.buffer.drain()                              # module 6
        u, disagreement, applied, discarded = build_u_h(
            events, art.theta, self.cstate.version, self._inputs,
            art.names, art.widths, u_bound=self.cstate.u_bound,
        )
        u_norm = float(np.linalg.norm(u))

        def sp_fn(vec: np.ndarray) -> float:
            cand = dataclasses.replace(
                art.theta, vec=np.ascontiguousarray(vec, dtype=np.float64)
            )
            ci = interpret(cand, x, art.names, art.widths)
            k = components(
                ci.q,
                self._top_meta(ci.top_feats, by_name),
                outcomes,
                self.spstate.rules,
                self.spstate.calibrators,
            )
            return float(np.dot(self.spstate.w_kappa, k))

        if applied and u_norm > 0.0:
            probe = self.cstate.theta + PROBE_EPS * (u / u_norm)
            self.cstate.note_probe(abs(sp_fn(probe) - sp) / PROBE_EPS)

        rationale_uncertainty = float(np.clip(1.0 - self.spstate.kappa[1], 0.0, 1.0))
        lambda_eff = schedule_gain(self.cstate, disagreement, rationale_uncertainty)
        grad = grad_sp(art.theta, x)
        ev = controller_step(
            self.cstate,
            self.spstate.delta_sp,
            grad,
            u if u_norm > 0.0 else None,
            lambda_eff,
            self.spstate.gamma_noop,
            sp,
            sp_fn,
        )
        rb = rollback_check(self.cstate)
        art.theta.version = self.cstate.version
        self.ticks["m6"] += 1

        self.cycles += 1
        if self.meta_period > 0 and self.cycles % self.meta_period == 0:
            # slow-path recalibration hook: intentionally a no-op for now
            log.info("session %s cycle %d: slow-path pass (no-op)",
                     self.session_id, self.cycles)
            self.ticks["m7"] += 1

        if ep.correct is not None:
            self.spstate.push_outcome(ep.correct)

        record = {
            "schema": AUDIT_SCHEMA,
            "session": self.session_id,
            "preset": art.preset.name,
            "seed": art.seed,
            "seq": w.seq,
            "t_start": w.t_start,
            "ticks": dict(self.ticks),
            "input_sha256": input_digest(w),
            "theta_version": self.cstate.version,
            "steps_used": ep.steps_used,
            "episode": {
                "outcome": ep.outcome,
                "prediction": ep.prediction,
                "steps_used": ep.steps_used,
                "sp_final": ep.sp_final,
                "safety_gap": ep.delta_sp_final,
                "sp_trace": list(ep.sp_trace),
            },
            "markers": interp.q,
            "prediction": ep.prediction,
            "deterministic_prediction": interp.prediction,
            "label": w.label,
            "correct": ep.correct,
            "kappa": self.spstate.kappa,
            "w_kappa": self.spstate.w_kappa,
            "sp": sp,
            "sp_star": self.spstate.sp_star,
            "delta_sp": self.spstate.delta_sp,
            "v": self.spstate.v,
            "gamma_noop": self.spstate.gamma_noop,
            "top_feats": interp.top_feats,
            "reliability_w": wts,
            "controller": dict(ev),
            "rollback": rb is not None,
            "event": rb["event"] if rb is not None else ev["event"],
            "feedback": {
                "applied": applied,
                "discarded": discarded,
                "disagreement": disagreement,
                "u_norm": u_norm,
                "lambda_eff": lambda_eff,
                "buffer_dropped": self.buffer.dropped,
            },
        }
        record = _json_safe(record)
        self.last_record = record
        return record
