"""Closed-loop transcript mechanics.

Constructed constant-output twins force each decision path (accept,
reject, scram order, anomaly) deterministically, so transcripts can be
checked against exact event payloads and the frozen plant anchors.
"""

import json

import numpy as np
import pytest

from conftest import constant_model
from reactortwin.episodes import (ActionBounds, ControlAction,
                                  reference_scenario, simulate_batch)
from reactortwin.loop import (ClosedLog, DiscrepancyConfig, IncompleteLog,
                              Timeline, TranscriptLog, discrepancy_check,
                              grade_outcome, masked_values, run_closed_loop)
from reactortwin.plant import CHANNELS, PlantConfig, ScenarioSpec, read_sensors
from reactortwin.twins import TwinBundle

MITIGATED_PEAK = 648.007985444671     # strongest action, tripped at 10020.0
UNMITIGATED_PEAK = 700.6312478077184  # reference accident, no action at all
WINDOW_END_TRUE = 647.8353360450064   # true T_PFCL at the decision instant


def probe_bundle(cfg, diag=650.0, prog=649.5, grid_n=5):
    """Twins that always answer `diag` and `prog` degC."""
    return TwinBundle(constant_model(diag), constant_model(prog, n_in=6),
                      ActionBounds(), grid_n=grid_n,
                      config_hash=cfg.config_hash())


# ---------------------------------------------------------------------------
# Timeline / DiscrepancyConfig / pure helpers.

def test_timeline_defaults():
    tl = Timeline()
    assert tl.recommend_time == 10020.0
    assert tl.injection_time == 10020.0
    assert Timeline(action_time=10030.0).injection_time == 10030.0
    tl.validate()


def test_timeline_validation():
    with pytest.raises(ValueError, match="steady wait"):
        Timeline(steady_wait=10010.0, accident_time=10010.0).validate()
    with pytest.raises(ValueError, match="decision delay"):
        Timeline(decision_delay=0.0).validate()
    with pytest.raises(ValueError, match="precede"):
        Timeline(action_time=10019.0).validate()
    # within the 1 ns slack is accepted
    Timeline(action_time=10020.0 - 1e-10).validate()


def test_discrepancy_config_validation():
    DiscrepancyConfig().validate()
    for bad in (DiscrepancyConfig(x_lim=0.0),
                DiscrepancyConfig(cadence=-1.0),
                DiscrepancyConfig(peak_drop=0.0)):
        with pytest.raises(ValueError):
            bad.validate()


def test_discrepancy_check_is_strict():
    cfg = DiscrepancyConfig(x_lim=15.0)
    assert discrepancy_check(660.0, 645.0, cfg) == "ok"        # exactly at
    assert discrepancy_check(660.1, 645.0, cfg) == "anomaly"
    assert discrepancy_check(630.0, 645.1, cfg) == "anomaly"   # either side
    assert discrepancy_check(645.0, 645.0, cfg) == "ok"


def test_masked_values_replaces_failed_channels(steady):
    frame = read_sensors(steady, failed=("T_LPP",))
    vals = masked_values(frame)
    assert vals[1] is None
    assert vals[0] == pytest.approx(370.0) and vals[2] == pytest.approx(490.0)


# ---------------------------------------------------------------------------
# TranscriptLog.

def test_log_assigns_sequence_and_plain_types():
    log = TranscriptLog()
    ev = log.add(1.0, "sensor", values=np.array([1.5, 2.5]),
                 flag=np.bool_(True), count=np.int64(3))
    assert ev["seq"] == 0 and ev["t"] == 1.0 and ev["kind"] == "sensor"
    assert ev["data"] == {"values": [1.5, 2.5], "flag": True, "count": 3}
    assert log.add(2.0, "check")["seq"] == 1
    json.dumps(log.events, allow_nan=False)


def test_log_rejects_backward_time():
    log = TranscriptLog()
    log.add(1.0, "sensor")
    log.add(1.0 - 5e-10, "sensor")      # inside tolerance
    with pytest.raises(ValueError, match="backward"):
        log.add(0.9, "sensor")


def test_log_closes_on_outcome():
    log = TranscriptLog()
    with pytest.raises(IncompleteLog):
        log.outcome
    with pytest.raises(IncompleteLog):
        grade_outcome(log)
    log.add(1.0, "sensor")
    log.add(2.0, "outcome", grade=2)
    assert log.closed and log.outcome == {"grade": 2}
    with pytest.raises(ClosedLog):
        log.add(3.0, "sensor")
    assert log.first("sensor")["t"] == 1.0
    assert log.first("scram") is None
    assert [e["kind"] for e in log.all("sensor")] == ["sensor"]


def test_log_jsonl_round_trip_and_key_order():
    a, b = TranscriptLog(), TranscriptLog()
    a.add(1.0, "check", observed=1.0, predicted=2.0)
    b.add(1.0, "check", predicted=2.0, observed=1.0)
    assert a.to_jsonl() == b.to_jsonl()     # sort_keys normalizes
    back = TranscriptLog.from_jsonl(a.to_jsonl())
    assert back.events == a.events


# ---------------------------------------------------------------------------
# Full runs on the reference accident.

@pytest.fixture(scope="module")
def accept_run(cfg, ref_spec):
    """Auto policy, in-range prediction: accept, trip, quiet checker."""
    bundle = probe_bundle(cfg)
    ticks, seen = [], []
    def observer(kind, t, data):
        (ticks if kind == "tick" else seen).append((kind, t, data))
    log = run_closed_loop(ref_spec, bundle, cfg, observer=observer)
    return log, ticks, seen


def test_accept_event_sequence(accept_run):
    log, _, _ = accept_run
    kinds = [ev["kind"] for ev in log.events]
    head = [k for k in kinds if k not in ("sensor", "check")]
    assert head == ["steady", "fault", "diagnosis", "assessment",
                    "recommendation", "decision", "trip", "outcome"]
    assert kinds[-1] == "outcome" and log.closed


def test_accept_diagnosis_payload(accept_run):
    log, _, _ = accept_run
    d = log.first("diagnosis")["data"]
    assert d["estimate"] == pytest.approx(650.0, abs=1e-9)
    assert d["true"] == pytest.approx(WINDOW_END_TRUE, abs=1e-6)
    # estimate minus the window minimum: the power-defect dip right after
    # the coastdown starts puts the minimum a hair below the steady 640
    assert d["window_max_abs_error"] == pytest.approx(10.000525732, abs=1e-6)
    assert len(d["gradients"]) == 3


def test_accept_assessment_and_recommendation(accept_run):
    log, _, _ = accept_run
    a = log.first("assessment")["data"]
    assert len(a["w2_end"]) == 25 and len(a["t_trip"]) == 25
    assert a["prediction"] == [pytest.approx(649.5)] * 25
    assert a["margin"] == [pytest.approx(35.5)] * 25
    assert all(a["safe"]) and a["limit"] == 685.0
    r = log.first("recommendation")["data"]
    assert r["scram"] is False
    assert r["w2_end"] == 1.5 and r["t_trip"] == 645.0
    assert r["immediate"] is True
    assert r["prediction"] == pytest.approx(649.5)
    assert "ramp pump 2" in r["text"]
    assert log.first("decision")["data"] == {"policy": "auto",
                                             "verdict": "accept"}


def test_accept_trip_and_outcome(accept_run, cfg, ref_spec):
    log, _, _ = accept_run
    trip = log.first("trip")
    assert trip["t"] == pytest.approx(10020.0, abs=1e-6)
    assert trip["data"]["w2_end"] == 1.5
    assert trip["data"]["diagnosed"] == pytest.approx(650.0)
    out = log.outcome
    assert out["grade"] == 2 and grade_outcome(log) == 2
    assert out["max_true_t_pfcl"] == pytest.approx(MITIGATED_PEAK, abs=1e-6)
    assert out["max_diagnosed_t_pfcl"] == pytest.approx(650.0)
    assert out["scrammed"] is False and out["action_taken"] is True
    assert out["policy"] == "auto"
    # independent route: the stored-episode integrator, same action
    series, trips = simulate_batch([ref_spec], [ControlAction(1.5, 645.0)],
                                   cfg)
    assert trips[0] == pytest.approx(10020.0, abs=1e-9)
    assert out["max_true_t_pfcl"] == pytest.approx(series[0, :, 4].max(),
                                                   abs=1e-7)


def test_accept_checks_all_ok(accept_run):
    log, _, _ = accept_run
    checks = log.all("check")
    assert len(checks) == 189          # 1 Hz cadence over the 189.9 s tail
    assert all(c["data"]["verdict"] == "ok" for c in checks)
    assert checks[0]["data"]["observed_peak"] == pytest.approx(650.0)
    assert checks[0]["data"]["predicted_peak"] == pytest.approx(649.5)
    assert checks[0]["data"]["threshold"] == 15.0
    assert log.first("scram") is None


def test_accept_sensor_events(accept_run):
    log, _, _ = accept_run
    sensors = log.all("sensor")
    in_window = [s for s in sensors if s["t"] <= 10020.0 + 1e-9]
    after = [s for s in sensors if s["t"] > 10020.0 + 1e-9]
    assert len(in_window) == 10 and len(after) == 189
    assert "diagnosed" not in in_window[0]["data"]
    assert after[0]["data"]["diagnosed"] == pytest.approx(650.0)
    assert in_window[0]["data"]["valid"] == [True, True, True]
    assert all(isinstance(v, float) for v in in_window[0]["data"]["values"])


def test_accept_tick_stream(accept_run):
    log, ticks, seen = accept_run
    assert len(ticks) == 2099          # 100 pre + 100 window + 1899 tail
    ts = [t for _, t, _ in ticks]
    assert ts[0] == pytest.approx(10000.1, abs=1e-6)
    assert ts[-1] == pytest.approx(10209.9, abs=1e-6)
    assert all(b >= a - 1e-9 for a, b in zip(ts, ts[1:]))
    first = ticks[0][2]
    assert set(first) == {"sensors", "t_pfcl", "power", "w_1", "w_2",
                          "diagnosed", "scrammed"}
    assert first["diagnosed"] is None and first["scrammed"] is False
    n_diag = sum(1 for _, _, d in ticks if d["diagnosed"] is not None)
    assert n_diag == 1899              # only after the decision instant
    # observer saw every logged event, in order, plus the outcome
    assert [k for k, _, _ in seen] == [ev["kind"] for ev in log.events]


def test_transcript_is_deterministic(accept_run, cfg, ref_spec):
    log, _, _ = accept_run
    again = run_closed_loop(ref_spec, probe_bundle(cfg), cfg)
    assert again.to_jsonl() == log.to_jsonl()
    back = TranscriptLog.from_jsonl(log.to_jsonl())
    assert back.events == log.events


def test_ignore_policy_exceeds_limit(cfg, ref_spec):
    log = run_closed_loop(ref_spec, probe_bundle(cfg), cfg, policy="ignore")
    assert log.first("decision")["data"]["verdict"] == "reject"
    assert log.first("trip") is None and log.first("check") is None
    out = log.outcome
    assert out["max_true_t_pfcl"] == pytest.approx(UNMITIGATED_PEAK, abs=1e-6)
    assert out["grade"] == 1 and out["action_taken"] is False
    assert out["scrammed"] is False


def test_scram_recommendation_followed(cfg, ref_spec):
    # prediction above the limit everywhere: nothing is safe
    log = run_closed_loop(ref_spec, probe_bundle(cfg, prog=700.0), cfg)
    r = log.first("recommendation")["data"]
    assert r["scram"] is True and r["w2_end"] is None
    assert r["prediction"] is None and "SCRAM" in r["text"]
    assert log.first("decision")["data"]["verdict"] == "scram"
    sc = log.first("scram")
    assert sc["t"] == pytest.approx(10020.0, abs=1e-6)
    assert sc["data"]["reason"] == "operator or recommendation scram"
    out = log.outcome
    assert out["scrammed"] is True and out["grade"] == 1
    assert out["max_true_t_pfcl"] < 685.0


def test_gated_reject_and_recommendation_handoff(cfg, ref_spec):
    got = []
    def decide(rec):
        got.append(rec)
        return "reject"
    log = run_closed_loop(ref_spec, probe_bundle(cfg), cfg, policy="gated",
                          decision_fn=decide)
    assert len(got) == 1 and got[0].scram is False
    assert got[0].action.w2_end == 1.5
    assert log.first("decision")["data"]["verdict"] == "reject"
    assert log.outcome["grade"] == 1    # unmitigated accident

def test_gated_accept_of_scram_order_scrams(cfg, ref_spec):
    log = run_closed_loop(ref_spec, probe_bundle(cfg, prog=700.0), cfg,
                          policy="gated", decision_fn=lambda rec: "accept")
    assert log.first("decision")["data"]["verdict"] == "scram"
    assert log.outcome["scrammed"] is True


def test_gated_invalid_verdict_raises(cfg, ref_spec):
    with pytest.raises(ValueError, match="decision function"):
        run_closed_loop(ref_spec, probe_bundle(cfg), cfg, policy="gated",
                        decision_fn=lambda rec: "maybe")


def test_anomaly_check_scrams(cfg, ref_spec):
    # accepted prediction 50 degC below the diagnosed running peak
    log = run_closed_loop(ref_spec, probe_bundle(cfg, prog=600.0), cfg)
    checks = log.all("check")
    assert len(checks) == 1
    assert checks[0]["t"] == pytest.approx(10021.0, abs=1e-6)
    assert checks[0]["data"]["verdict"] == "anomaly"
    sc = log.first("scram")
    assert sc["data"]["reason"] == ("discrepancy between observed and "
                                    "predicted peak")
    assert sc["t"] == pytest.approx(10021.0, abs=1e-6)
    out = log.outcome
    assert out["grade"] == 1 and out["scrammed"] is True
    assert out["action_taken"] is True      # tripped before the check


def test_checker_can_be_disabled(cfg, ref_spec):
    log = run_closed_loop(ref_spec, probe_bundle(cfg, prog=600.0), cfg,
                          check_enabled=False)
    assert log.all("check") == [] and log.first("scram") is None
    assert log.outcome["grade"] == 2


def test_checker_waits_for_a_ripe_observation(cfg, ref_spec):
    # prediction above the running diagnosed peak and the peak never
    # demonstrably passes (constant diagnosis): no check fires at all
    log = run_closed_loop(ref_spec, probe_bundle(cfg, prog=660.0), cfg)
    assert log.all("check") == []
    assert log.outcome["grade"] == 2


def test_all_sensors_failed_scrams_and_grades_level_0(cfg, ref_spec):
    log = run_closed_loop(ref_spec, probe_bundle(cfg), cfg,
                          failed_channels=CHANNELS)
    sc = log.first("scram")
    assert sc["t"] == pytest.approx(10020.0, abs=1e-6)
    assert sc["data"]["reason"] == "diagnosis impossible: all sensors failed"
    for kind in ("diagnosis", "assessment", "recommendation", "decision",
                 "trip"):
        assert log.first(kind) is None
    out = log.outcome
    assert out["grade"] == 0 and grade_outcome(log) == 0
    assert out["max_diagnosed_t_pfcl"] is None
    window_sensor = log.first("sensor")
    assert window_sensor["data"]["values"] == [None, None, None]
    assert window_sensor["data"]["valid"] == [False, False, False]
    # strict JSON even with failed channels
    for line in log.to_jsonl().splitlines():
        json.loads(line)


def test_late_failure_uses_fail_start(cfg, ref_spec):
    # channels die 5 s into the window: early frames stay valid
    log = run_closed_loop(ref_spec, probe_bundle(cfg),
                          cfg, failed_channels=("T_LPP",), fail_start=5.0)
    sensors = log.all("sensor")
    assert sensors[0]["data"]["valid"] == [True, True, True]
    assert sensors[5]["data"]["valid"] == [True, False, True]
    assert sensors[5]["data"]["values"][1] is None
    assert log.outcome["grade"] == 2    # imputation keeps diagnosis alive


def manual_at(t_target):
    fired = []
    def observer(kind, t, data):
        if kind == "tick" and t >= t_target - 1e-9 and not fired:
            fired.append(t)
            return "scram"
    return observer


@pytest.mark.parametrize("t_target", [10005.0, 10013.0, 10050.0])
def test_manual_scram_honored_in_every_phase(cfg, ref_spec, t_target):
    log = run_closed_loop(ref_spec, probe_bundle(cfg, prog=660.0), cfg,
                          observer=manual_at(t_target))
    sc = log.first("scram")
    assert sc["data"]["reason"] == "manual scram command"
    assert sc["t"] == pytest.approx(t_target, abs=1e-6)
    assert log.outcome["scrammed"] is True
    if t_target < 10010.0:
        assert sc["seq"] < log.first("fault")["seq"]
    elif t_target < 10020.0:
        assert log.first("fault")["seq"] < sc["seq"] < log.first("diagnosis")["seq"]
        assert log.outcome["action_taken"] is False   # latched blocks trips
    else:
        assert sc["seq"] > log.first("trip")["seq"]
        assert log.outcome["grade"] == 1
        assert log.outcome["max_true_t_pfcl"] == pytest.approx(
            MITIGATED_PEAK, abs=1e-6)


def test_delayed_injection_delays_the_trip(cfg, ref_spec):
    log = run_closed_loop(ref_spec, probe_bundle(cfg, prog=660.0), cfg,
                          timeline=Timeline(action_time=10030.0))
    trip = log.first("trip")
    assert trip["t"] == pytest.approx(10030.0, abs=1e-6)
    out = log.outcome
    assert out["max_true_t_pfcl"] > MITIGATED_PEAK + 1.0
    assert out["max_true_t_pfcl"] < 685.0
    assert out["grade"] == 2


# ---------------------------------------------------------------------------
# Input validation.

def test_run_input_validation(cfg, ref_spec):
    bundle = probe_bundle(cfg)
    with pytest.raises(ValueError, match="policy"):
        run_closed_loop(ref_spec, bundle, cfg, policy="manual")
    with pytest.raises(ValueError, match="decision function"):
        run_closed_loop(ref_spec, bundle, cfg, policy="gated")
    with pytest.raises(ValueError, match="sensor channels"):
        run_closed_loop(ref_spec, bundle, cfg, failed_channels=("T_BOGUS",))
    with pytest.raises(ValueError, match="missing twin"):
        run_closed_loop(ref_spec, TwinBundle(None, None, ActionBounds()), cfg)
    stale = probe_bundle(cfg)
    stale.config_hash = "0123456789abcdef"
    with pytest.raises(ValueError, match="different plant config"):
        run_closed_loop(ref_spec, stale, cfg)
    moved = ScenarioSpec.from_parts(0.5, 50.0, 10011.0)
    with pytest.raises(ValueError, match="accident time"):
        run_closed_loop(moved, bundle, cfg)
