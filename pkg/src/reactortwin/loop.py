"""Closed operational loop: steady wait, fault injection, a paused
diagnose-prognose-recommend stage, action injection, discrepancy
monitoring and a graded outcome.

The plant never advances while the twins deliberate (computation is
treated as instantaneous in plant time), so a transcript is a pure
function of its inputs and replays bit for bit.  Transcripts are
line-delimited JSON with plant timestamps only: no wall-clock values
appear anywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .episodes import N_ROWS, ROW_DT
from .network import forward
from .plant import (CHANNELS, PlantConfig, ScenarioSpec, read_sensors,
                    scram, steady_state, step)
from .twins import (AllSensorsFailed, TwinBundle, assess, diagnose_series,
                    enumerate_strategies, gradient_features, impute,
                    prognose_batch, recommend)

POLICIES = ("auto", "ignore", "gated")

LEVEL_0 = 0     # misdiagnosed the plant state
LEVEL_1 = 1     # diagnosed correctly but scrammed or exceeded the limit
LEVEL_2 = 2     # diagnosed correctly and stabilized below the limit


class IncompleteLog(Exception):
    """Transcript lacks the records grading needs."""


class ClosedLog(Exception):
    """Transcript already carries its terminal outcome."""


@dataclass(frozen=True)
class Timeline:
    """Event times of one run, all in plant seconds."""

    steady_wait: float = 10000.0     # reached by solve, not integration
    accident_time: float = 10010.0
    decision_delay: float = 10.0     # sensor-collection window length
    action_time: float | None = None  # default: the recommendation time

    @property
    def recommend_time(self) -> float:
        return self.accident_time + self.decision_delay

    @property
    def injection_time(self) -> float:
        return self.recommend_time if self.action_time is None else self.action_time

    def validate(self) -> None:
        if not self.steady_wait < self.accident_time:
            raise ValueError("steady wait must end before the accident")
        if self.decision_delay <= 0.0:
            raise ValueError("decision delay must be positive")
        if self.injection_time < self.recommend_time - 1e-9:
            raise ValueError("action cannot precede the recommendation")


@dataclass(frozen=True)
class DiscrepancyConfig:
    """Post-action sanity check of the accepted prediction.

    The observed value the loop feeds the check is the running maximum
    of the diagnosed peak temperature, which only finishes forming at
    the actual peak.  Checks therefore activate once the observation
    exceeds the prediction (the dangerous direction needs no waiting)
    or once the observed series has fallen peak_drop below its maximum
    (the peak has demonstrably passed); earlier comparison would flag
    every still-rising transient.
    """

    x_lim: float = 15.0     # degC, strict exceedance triggers anomaly
    cadence: float = 1.0    # s of plant time between checks
    peak_drop: float = 1.0  # degC below running max that marks peak passage

    def validate(self) -> None:
        if self.x_lim <= 0.0:
            raise ValueError("x_lim must be positive")
        if self.cadence <= 0.0:
            raise ValueError("cadence must be positive")
        if self.peak_drop <= 0.0:
            raise ValueError("peak_drop must be positive")


def discrepancy_check(observed: float, predicted: float,
                      cfg: DiscrepancyConfig) -> str:
    """anomaly iff |observed - predicted| strictly exceeds x_lim."""
    return "anomaly" if abs(observed - predicted) > cfg.x_lim else "ok"


def masked_values(frame) -> list:
    """Sensor tuple with failed channels as None (NaN is not JSON)."""
    return [v if ok else None for v, ok in zip(frame.values, frame.valid)]


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


@dataclass
class TranscriptLog:
    """Ordered event records ending in exactly one outcome."""

    events: list = field(default_factory=list)

    def add(self, t: float, kind: str, **data) -> dict:
        if self.closed:
            raise ClosedLog("transcript already has its outcome")
        if self.events and t < self.events[-1]["t"] - 1e-9:
            raise ValueError("events must not move backward in time")
        ev = {"seq": len(self.events), "t": float(t), "kind": kind,
              "data": _plain(data)}
        self.events.append(ev)
        return ev

    @property
    def closed(self) -> bool:
        return bool(self.events) and self.events[-1]["kind"] == "outcome"

    @property
    def outcome(self) -> dict:
        if not self.closed:
            raise IncompleteLog("no outcome recorded")
        return self.events[-1]["data"]

    def first(self, kind: str) -> dict | None:
        for ev in self.events:
            if ev["kind"] == kind:
                return ev
        return None

    def all(self, kind: str) -> list:
        return [ev for ev in self.events if ev["kind"] == kind]

    def to_jsonl(self) -> str:
        # allow_nan=False keeps every line strict JSON for non-Python readers
        return "\n".join(json.dumps(ev, sort_keys=True, allow_nan=False)
                         for ev in self.events) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TranscriptLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                log.events.append(json.loads(line))
        return log


def grade_outcome(log: TranscriptLog, diag_bound: float = 30.0,
                  limit: float = 685.0) -> int:
    """Grade a finished run from its transcript alone.

    Level 0: some diagnosis during the collection window missed the
    true state by more than diag_bound, or diagnosis never happened.
    Level 1: diagnosis held but the plant was scrammed or the true peak
    reached the limit.  Level 2: diagnosis held, no scram, peak stayed
    strictly below the limit.
    """
    if not log.closed:
        raise IncompleteLog("cannot grade an unfinished transcript")
    out = log.outcome
    diag = log.first("diagnosis")
    if diag is None or diag["data"]["window_max_abs_error"] > diag_bound:
        return LEVEL_0
    if out["scrammed"] or out["max_true_t_pfcl"] >= limit:
        return LEVEL_1
    return LEVEL_2


def _decide(policy: str, recommendation, decision_fn):
    if policy == "auto":
        return "scram" if recommendation.scram else "accept"
    if policy == "ignore":
        return "reject"
    verdict = decision_fn(recommendation)
    if verdict not in ("accept", "reject", "scram"):
        raise ValueError(f"decision function returned {verdict!r}")
    if verdict == "accept" and recommendation.scram:
        return "scram"
    return verdict


def run_closed_loop(spec: ScenarioSpec, bundle: TwinBundle,
                    config: PlantConfig | None = None,
                    timeline: Timeline | None = None,
                    policy: str = "auto",
                    discrepancy: DiscrepancyConfig | None = None,
                    check_enabled: bool = True,
                    decision_fn=None,
                    failed_channels=(), fail_start: float | None = None,
                    diag_bound: float = 30.0,
                    observer=None) -> TranscriptLog:
    """Run one accident from steady state to episode end.

    policy: "auto" injects the recommendation immediately, "ignore"
    logs it and takes no action, "gated" asks decision_fn for one of
    accept/reject/scram.  failed_channels (names from CHANNELS) go
    invalid fail_start seconds after the accident (default: at the
    accident).  observer, when given, is called as
    observer(kind, t, data) for every logged event and every plant
    step ("tick"); returning "scram" forces a manual scram.
    """
    config = config or PlantConfig()
    timeline = timeline or Timeline()
    discrepancy = discrepancy or DiscrepancyConfig()
    timeline.validate()
    discrepancy.validate()
    bundle.require_complete()
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    if policy == "gated" and decision_fn is None:
        raise ValueError("gated policy needs a decision function")
    if bundle.config_hash and bundle.config_hash != config.config_hash():
        raise ValueError("bundle was trained against a different plant config")
    if abs(timeline.accident_time - spec.t_acc) > 1e-9:
        raise ValueError("timeline accident time disagrees with the scenario")
    bad = set(failed_channels) - set(CHANNELS)
    if bad:
        raise ValueError(f"unknown sensor channels: {sorted(bad)}")
    fail_at = spec.t_acc + (0.0 if fail_start is None else fail_start)

    log = TranscriptLog()
    manual_scram = False

    def emit(t, kind, **data):
        ev = log.add(t, kind, **data)
        if observer is not None:
            observer(kind, t, ev["data"])

    def failed_now(t):
        return tuple(failed_channels) if t >= fail_at - 1e-9 else ()

    def tick(st, diagnosed=None):
        nonlocal manual_scram
        if observer is not None:
            verdict = observer("tick", st.t, {
                "sensors": masked_values(read_sensors(st, failed_now(st.t))),
                "t_pfcl": st.t_pfcl, "power": st.power,
                "w_1": st.w1, "w_2": st.w2,
                "diagnosed": diagnosed, "scrammed": st.scram_latched})
            if verdict == "scram":
                manual_scram = True

    def apply_manual(st):
        nonlocal manual_scram
        if manual_scram and not st.scram_latched:
            emit(st.t, "scram", reason="manual scram command")
            st = scram(st)
        manual_scram = False
        return st

    state = replace(steady_state(config), t=timeline.steady_wait)
    emit(state.t, "steady", temperatures=state.temperatures(),
         t_pfcl=state.t_pfcl, power=state.power)

    # Quiet stretch between the steady solve and the fault.
    n_pre = int(round((timeline.accident_time - timeline.steady_wait) / config.dt))
    for _ in range(n_pre):
        state = step(state, 1.0, config, spec)
        tick(state)
        state = apply_manual(state)
    emit(state.t, "fault", w1_end=spec.w1_end,
         ramp_duration=spec.ramp_duration, coastdown_rate=spec.coastdown_rate)

    # Sensor-collection window.
    n_win = int(round(timeline.decision_delay / config.dt))
    frames = [read_sensors(state, failed_now(state.t))]
    truth = [state.t_pfcl]
    log_every = max(1, int(round(1.0 / config.dt)))
    for k in range(n_win):
        state = step(state, 1.0, config, spec)
        frames.append(read_sensors(state, failed_now(state.t)))
        truth.append(state.t_pfcl)
        tick(state)
        state = apply_manual(state)
        if (k + 1) % log_every == 0:
            emit(state.t, "sensor", values=masked_values(frames[-1]),
                 valid=frames[-1].valid, true_t_pfcl=state.t_pfcl)

    # Pause: plant time is frozen while the twins work.
    armed = None
    prediction = None
    estimates = None
    try:
        estimates = diagnose_series(bundle.diagnosis, frames)
    except AllSensorsFailed:
        emit(state.t, "scram", reason="diagnosis impossible: all sensors failed")
        state = scram(state)
    if estimates is not None:
        window_times = np.array([f.t for f in frames])
        window_err = float(np.max(np.abs(estimates - np.array(truth))))
        diagnosed = float(estimates[-1])
        grads = gradient_features(window_times, estimates, bundle.grad_spans)
        emit(state.t, "diagnosis", estimate=diagnosed, true=state.t_pfcl,
             gradients=grads, window_max_abs_error=window_err)
        actions = enumerate_strategies(bundle.bounds, bundle.grid_n,
                                       diagnosed=diagnosed)
        preds = prognose_batch(bundle.prognosis, diagnosed, grads, actions)
        table = assess(actions, preds, bundle.limit)
        emit(state.t, "assessment", limit=table.limit,
             w2_end=[a.w2_end for a in actions],
             t_trip=[a.t_trip for a in actions],
             prediction=table.predictions, margin=table.margins,
             safe=table.safe)
        rec = recommend(table)
        emit(state.t, "recommendation", scram=rec.scram, reason=rec.reason,
             text=rec.describe(),
             w2_end=None if rec.scram else rec.action.w2_end,
             t_trip=None if rec.scram else rec.action.t_trip,
             immediate=None if rec.scram else rec.action.immediate,
             prediction=rec.prediction, margin=rec.margin)
        verdict = _decide(policy, rec, decision_fn)
        emit(state.t, "decision", policy=policy, verdict=verdict)
        if verdict == "scram":
            emit(state.t, "scram", reason="operator or recommendation scram")
            state = scram(state)
        elif verdict == "accept":
            armed = rec.action
            prediction = rec.prediction

    # Resume to episode end with the trip armed and the checker live.
    t_end = spec.t_acc + (N_ROWS - 1) * ROW_DT
    n_rest = int(round((t_end - state.t) / config.dt))
    tripped = False
    max_true = max(truth)
    diagnosed = float(estimates[-1]) if estimates is not None else None
    max_diag = diagnosed
    check_every = max(1, int(round(discrepancy.cadence / config.dt)))
    for k in range(n_rest):
        # Trip logic looks at the newest diagnosed value before the
        # step, exactly how stored episodes evaluate their setpoint.
        if (armed is not None and not tripped and not state.scram_latched
                and diagnosed is not None
                and state.t >= timeline.injection_time - 1e-9
                and (armed.immediate or diagnosed >= armed.t_trip)):
            tripped = True
            emit(state.t, "trip", w2_end=armed.w2_end, t_trip=armed.t_trip,
                 diagnosed=diagnosed, true=state.t_pfcl)
        cmd = armed.w2_end if (armed is not None and tripped) else 1.0
        state = step(state, cmd, config, spec)
        max_true = max(max_true, state.t_pfcl)
        if estimates is not None and not state.scram_latched:
            try:
                frame = read_sensors(state, failed_now(state.t))
                diagnosed = float(forward(bundle.diagnosis, impute(frame))[0])
                max_diag = max(max_diag, diagnosed)
            except AllSensorsFailed:
                emit(state.t, "scram", reason="all sensors failed in flight")
                state = scram(state)
        tick(state, diagnosed)
        state = apply_manual(state)
        if (check_enabled and prediction is not None
                and not state.scram_latched and (k + 1) % check_every == 0):
            ripe = (max_diag > prediction
                    or diagnosed <= max_diag - discrepancy.peak_drop)
            if ripe:
                verdict = discrepancy_check(max_diag, prediction, discrepancy)
                emit(state.t, "check", observed_peak=max_diag,
                     predicted_peak=prediction, verdict=verdict,
                     threshold=discrepancy.x_lim)
                if verdict == "anomaly":
                    emit(state.t, "scram", reason="discrepancy between "
                         "observed and predicted peak")
                    state = scram(state)
        if (k + 1) % log_every == 0:
            frame = read_sensors(state, failed_now(state.t))
            emit(state.t, "sensor", values=masked_values(frame),
                 valid=frame.valid, true_t_pfcl=state.t_pfcl,
                 diagnosed=diagnosed)

    out = {"max_true_t_pfcl": max_true,
           "max_diagnosed_t_pfcl": max_diag,
           "limit": bundle.limit,
           "scrammed": bool(log.first("scram")),
           "action_taken": bool(log.first("trip")),
           "policy": policy}
    grade = _grade_from_parts(log, out, diag_bound, bundle.limit)
    ev = log.add(state.t, "outcome", grade=grade, **out)
    if observer is not None:
        observer("outcome", state.t, ev["data"])
    return log


def _grade_from_parts(log: TranscriptLog, out: dict, diag_bound: float,
                      limit: float) -> int:
    diag = log.first("diagnosis")
    if diag is None or diag["data"]["window_max_abs_error"] > diag_bound:
        return LEVEL_0
    if out["scrammed"] or out["max_true_t_pfcl"] >= limit:
        return LEVEL_1
    return LEVEL_2
