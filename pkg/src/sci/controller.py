"""Outer-loop parameter controller.

One regulation step moves the interpreter parameters by

    theta' = Proj_C[ theta + eta * (dSP * grad_SP + lambda_h * u_h) ]

where dSP = SP_target - SP is signed, grad_SP is the analytic clarity
gradient, u_h the aggregated human-feedback direction, and Proj_C the
Euclidean projection onto a per-coordinate box. Stability safeguards, applied
in order:

* no-op zone: |dSP| below the adaptive band gamma_noop skips the update;
* trust region: a raw step longer than rho is rescaled to norm rho before
  projection (projection is nonexpansive, so accepted updates never move
  farther than rho);
* human-gain budget: any step using u_h != 0 must satisfy
  lambda_h < mu_hat / (U * c_hat), with conservative fallbacks (mu at its
  floor, c at its ceiling) until enough evidence accumulates, so feedback
  cannot destabilize an unprobed loop;
* monotone acceptance: the candidate is re-scored on the same window and
  kept only if its clarity does not drop;
* rollback: K consecutive rejections restore the newest checkpoint (popping
  it, so persistent failure walks back through history; an exhausted stack
  restores the initial parameters).

Accepted parameters are checkpointed (bounded stack, oldest evicted) and
every decision appends a structured event. The controller sees only vectors
and callables, so the same machinery drives the real interpreter and the
synthetic quadratic used to validate descent behavior.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from typing import Callable

import numpy as np

ETA = 0.01
LAMBDA_H = 0.3
RHO = 0.1
K_REJECT = 3
U_BOUND = 1.0
BOX = 25.0
CHECKPOINT_CAP = 16
MU_FLOOR = 1e-6
C_CEILING = 1e6
CLAMP_LO = 1e-6
CLAMP_HI = 1e6
MIN_TRACE = 16
MU_PERCENTILE = 10.0
C_EMA = 0.2


@dataclasses.dataclass
class TraceEntry:
    """Per-cycle evidence consumed by the constants estimator and monitor."""

    delta_sp: float
    grad_norm: float
    v: float
    event: str
    step_norm: float = 0.0


@dataclasses.dataclass
class ControllerState:
    theta: np.ndarray
    eta: float = ETA
    lambda_h_init: float = LAMBDA_H
    rho: float = RHO
    k_reject: int = K_REJECT
    u_bound: float = U_BOUND
    box_lo: float = -BOX
    box_hi: float = BOX
    version: int = 0
    bad_updates: int = 0
    theta0: np.ndarray = dataclasses.field(default=None)  # type: ignore[assignment]
    checkpoints: deque = dataclasses.field(
        default_factory=lambda: deque(maxlen=CHECKPOINT_CAP)
    )
    trace: list[TraceEntry] = dataclasses.field(default_factory=list)
    events: list[dict] = dataclasses.field(default_factory=list)
    probes: list[float] = dataclasses.field(default_factory=list)
    c_hat: float | None = None
    _last_grad: np.ndarray | None = None
    _last_theta: np.ndarray | None = None
    curvature_samples: list[float] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta0 is None:
            self.theta0 = self.theta.copy()
        self.checkpoints.append(self.theta.copy())

    def note_probe(self, response_per_unit: float) -> None:
        """Record one-sided probe evidence |SP response| / ||u_h||."""
        self.probes.append(abs(float(response_per_unit)))
        peak = max(self.probes)
        if self.c_hat is None:
            self.c_hat = peak
        else:
            self.c_hat = (1.0 - C_EMA) * self.c_hat + C_EMA * peak
        self.c_hat = float(np.clip(self.c_hat, CLAMP_LO, CLAMP_HI))


def project(vec: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Euclidean projection onto the per-coordinate box [lo, hi]."""
    return np.clip(vec, lo, hi)


def estimate_constants(state: ControllerState) -> tuple[float, float]:
    """(mu_hat, c_hat) with conservative fallbacks.

    mu_hat is the MU_PERCENTILE-th percentile of ||grad||^2 / dSP^2 over
    trace entries with dSP != 0, requiring MIN_TRACE such entries (floor
    otherwise). c_hat is the probe EMA (ceiling before any probe). Both are
    clamped to [CLAMP_LO, CLAMP_HI].
    """
    ratios = [
        t.grad_norm**2 / t.delta_sp**2
        for t in state.trace
        if abs(t.delta_sp) > 1e-12
    ]
    if len(ratios) >= MIN_TRACE:
        mu = float(np.percentile(ratios, MU_PERCENTILE))
    else:
        mu = MU_FLOOR
    mu = float(np.clip(mu, CLAMP_LO, CLAMP_HI))
    c = C_CEILING if state.c_hat is None else state.c_hat
    return mu, float(np.clip(c, CLAMP_LO, CLAMP_HI))


def gain_budget(state: ControllerState) -> float:
    """Upper bound mu_hat / (U * c_hat) that lambda_h must stay under."""
    mu, c = estimate_constants(state)
    return mu / (state.u_bound * c)


def schedule_gain(state: ControllerState, disagreement: float,
                  rationale_uncertainty: float) -> float:
    """Effective human gain for this cycle.

    Decays the configured gain by half of the larger of the two friction
    signals, so full disagreement halves it; never above the configured
    initial value; never at or above the current budget.
    """
    d = float(np.clip(max(disagreement, rationale_uncertainty), 0.0, 1.0))
    lam = state.lambda_h_init * (1.0 - 0.5 * d)
    lam = min(lam, state.lambda_h_init)
    budget = gain_budget(state)
    if lam >= budget:
        lam = budget * (1.0 - 1e-9)
    return max(lam, 0.0)


def step(
    state: ControllerState,
    delta_sp: float,
    grad: np.ndarray,
    u_h: np.ndarray | None,
    lambda_h: float,
    gamma_noop: float,
    sp_current: float,
    sp_fn: Callable[[np.ndarray], float],
) -> dict:
    """One gated, safeguarded regulation step. Mutates state in place.

    sp_fn re-scores a candidate parameter vector on the same window; the
    candidate is accepted only if its score does not drop below sp_current.
    Returns the event record (also appended to state.events / state.trace).
    """
    grad = np.asarray(grad, dtype=np.float64)
    sp_star = sp_current + delta_sp
    v_before = 0.5 * delta_sp**2
    ev = {
        "event": "no-op",
        "step_norm": 0.0,
        "lambda_h": float(lambda_h),
        "budget": float(gain_budget(state)),
        "u_h_norm": 0.0 if u_h is None else float(np.linalg.norm(u_h)),
        "v_before": v_before,
        "v_after": v_before,
        "theta_version": state.version,
        "grad_norm": float(np.linalg.norm(grad)),
        "delta_sp": float(delta_sp),
    }

    if abs(delta_sp) <= gamma_noop:
        _finish(state, ev)
        return ev

    use_uh = u_h is not None and float(np.linalg.norm(u_h)) > 0.0
    if use_uh and not (lambda_h < ev["budget"]):
        ev["event"] = "budget-violation"
        _finish(state, ev)
        return ev

    direction = delta_sp * grad
    if use_uh:
        direction = direction + lambda_h * np.asarray(u_h, dtype=np.float64)
    raw = state.eta * direction
    norm = float(np.linalg.norm(raw))
    if norm > state.rho:
        raw = raw * (state.rho / norm)
    cand = project(state.theta + raw, state.box_lo, state.box_hi)
    ev["step_norm"] = float(np.linalg.norm(cand - state.theta))

    sp_cand = float(sp_fn(cand))
    if sp_cand >= sp_current:
        if state._last_grad is not None and state._last_theta is not None:
            dth = float(np.linalg.norm(cand - state._last_theta))
            if dth > 1e-12:
                self_curv = abs(float(np.linalg.norm(grad)) - float(np.linalg.norm(state._last_grad))) / dth
                state.curvature_samples.append(self_curv)
        state._last_grad = grad.copy()
        state._last_theta = cand.copy()
        state.theta[:] = cand
        state.version += 1
        state.checkpoints.append(state.theta.copy())
        state.bad_updates = 0
        ev["event"] = "update"
        ev["v_after"] = 0.5 * (sp_star - sp_cand) ** 2
        ev["theta_version"] = state.version
    else:
        state.bad_updates += 1
        ev["event"] = "reject"

    _finish(state, ev)
    return ev


def rollback_check(state: ControllerState) -> dict | None:
    """Restore the newest checkpoint after k_reject consecutive rejections.

    The restored checkpoint is popped, so repeated failure keeps walking
    back; an empty stack restores the initial parameters. Restoration is
    byte-exact.
    """
    if state.bad_updates < state.k_reject:
        return None
    if state.checkpoints:
        target = state.checkpoints.pop()
    else:
        target = state.theta0.copy()
    state.theta[:] = target
    state.version += 1
    state.bad_updates = 0
    ev = {
        "event": "rollback",
        "step_norm": 0.0,
        "lambda_h": 0.0,
        "budget": float(gain_budget(state)),
        "u_h_norm": 0.0,
        "v_before": float("nan"),
        "v_after": float("nan"),
        "theta_version": state.version,
        "grad_norm": 0.0,
        "delta_sp": 0.0,
    }
    state.events.append(ev)
    state.trace.append(
        TraceEntry(delta_sp=0.0, grad_norm=0.0, v=0.0, event="rollback")
    )
    return ev


def _finish(state: ControllerState, ev: dict) -> None:
    state.events.append(ev)
    state.trace.append(
        TraceEntry(
            delta_sp=ev["delta_sp"],
            grad_norm=ev["grad_norm"],
            v=ev["v_before"],
            event=ev["event"],
            step_norm=ev["step_norm"],
        )
    )


def estimate_curvature(state: ControllerState, default: float = 1.0) -> float:
    """Empirical max gradient-change rate along accepted steps."""
    if not state.curvature_samples:
        return default
    return float(max(state.curvature_samples))


def monitor(vs: np.ndarray, events: list[str], eta: float, l_hat: float) -> dict:
    """Descent diagnostics over a V(t) series.

    Counts transitions with V(t+1) - V(t) above the eta^2 * L * 10 tolerance,
    excluding transitions whose step was a rollback or no-op (those do not
    claim descent). Returns counts, the violating fraction, and the largest
    excursion above tolerance.
    """
    vs = np.asarray(vs, dtype=np.float64)
    tol = eta**2 * l_hat * 10.0
    violations = 0
    eligible = 0
    max_exc = 0.0
    for t in range(len(vs) - 1):
        if events[t + 1] in ("rollback", "no-op"):
            continue
        if not (np.isfinite(vs[t]) and np.isfinite(vs[t + 1])):
            continue
        eligible += 1
        d = vs[t + 1] - vs[t]
        if d > tol:
            violations += 1
            max_exc = max(max_exc, d - tol)
    return {
        "violations": violations,
        "eligible": eligible,
        "fraction": violations / eligible if eligible else 0.0,
        "tolerance": tol,
        "max_excursion": max_exc,
    }
