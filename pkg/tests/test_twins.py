"""Twins layer: imputation, gradients, strategy inventory, margins,
recommendation, dataset builders, and the bundle container.

The recommendation rule is checked against a brute-force independent
ranking over random tables, including tie handling and invariance of
the argmax under a shifted limit.
"""
import numpy as np
import pytest

from reactortwin.episodes import (ActionBounds, ControlAction, TABLE_T_ACC,
                                  build_sweep_database, sample_grid)
from reactortwin.network import NeuralNetModel, Normalization, forward
from reactortwin.plant import ScenarioSpec, SensorFrame
from reactortwin.twins import (
    AllSensorsFailed, DiagnosisInput, GRAD_SPANS, InsufficientHistory,
    MarginTable, PrognosisInput, Recommendation, TwinBundle, assess, diagnose,
    diagnose_series, diagnosis_dataset, enumerate_strategies, finite_gradient,
    gradient_features, impute, limit_surface, prognose, prognose_batch,
    prognosis_dataset, recommend)


from conftest import constant_model, first_channel_model


def frame(values, valid=(True, True, True), t=0.0):
    return SensorFrame(t=t, values=tuple(values), valid=tuple(valid))


# ---------------------------------------------------------------------------
# Imputation and diagnosis plumbing.

def test_impute_passes_valid_frames_through():
    assert impute(frame([1.0, 2.0, 3.0])) == pytest.approx([1.0, 2.0, 3.0])


def test_impute_fills_failed_with_mean_of_valid():
    got = impute(frame([10.0, float("nan"), 20.0], (True, False, True)))
    assert got == pytest.approx([10.0, 15.0, 20.0])
    got = impute(frame([10.0, float("nan"), float("nan")],
                       (True, False, False)))
    assert got == pytest.approx([10.0, 10.0, 10.0])


def test_impute_distrusts_nonfinite_values_marked_valid():
    got = impute(frame([float("nan"), 4.0, 8.0], (True, True, True)))
    assert got == pytest.approx([6.0, 4.0, 8.0])


def test_impute_raises_when_everything_failed():
    with pytest.raises(AllSensorsFailed):
        impute(frame([1.0, 2.0, 3.0], (False, False, False)))


def test_diagnose_series_and_window():
    model = first_channel_model()
    frames = [frame([500.0 + k, 0.0, 0.0], t=float(k)) for k in range(5)]
    series = diagnose_series(model, frames)
    assert series == pytest.approx([500.0 + k for k in range(5)], abs=1e-4)
    assert diagnose(model, DiagnosisInput(tuple(frames))) \
        == pytest.approx(504.0, abs=1e-4)
    with pytest.raises(ValueError):
        diagnose(model, DiagnosisInput(()))


def test_diagnosis_sees_imputed_values():
    model = first_channel_model()
    f = frame([float("nan"), 300.0, 310.0], (False, True, True))
    assert diagnose(model, DiagnosisInput((f,))) == pytest.approx(305.0,
                                                                  abs=1e-4)


# ---------------------------------------------------------------------------
# Backward-difference gradients.

def test_finite_gradient_recovers_linear_slope_for_all_spans():
    t = np.arange(0.0, 10.01, 0.1)
    v = 3.0 * t - 7.0
    for span in GRAD_SPANS:
        assert finite_gradient(t, v, span) == pytest.approx(3.0, rel=1e-12)
    assert gradient_features(t, v) == pytest.approx([3.0, 3.0, 3.0])


def test_finite_gradient_uses_nearest_stored_sample():
    t = np.array([0.0, 0.4, 1.03, 2.0])
    v = np.array([5.0, 1.0, 4.0, 10.0])
    # span 1: target 1.0, nearest stored 1.03
    want = (10.0 - 4.0) / (2.0 - 1.03)
    assert finite_gradient(t, v, 1.0) == pytest.approx(want, rel=1e-12)


def test_finite_gradient_never_divides_by_zero_separation():
    t = np.array([0.0, 0.9, 1.0])
    v = np.array([0.0, 18.0, 20.0])
    # span 0.05: nearest is the newest sample itself; fall back one
    assert finite_gradient(t, v, 0.05) == pytest.approx((20.0 - 18.0) / 0.1,
                                                        rel=1e-9)


def test_finite_gradient_history_checks():
    t = np.arange(0.0, 3.01, 0.1)
    v = np.ones_like(t)
    with pytest.raises(InsufficientHistory):
        finite_gradient(t, v, 5.0)
    with pytest.raises(InsufficientHistory):
        finite_gradient([0.0], [1.0], 1.0)
    with pytest.raises(ValueError):
        finite_gradient(t, v, -1.0)


# ---------------------------------------------------------------------------
# Prognosis plumbing.

def test_prognose_feature_order_and_batch():
    model = NeuralNetModel.init([6, 4, 1], seed=8)
    act = ControlAction(1.25, 660.0)
    inp = PrognosisInput(estimate=650.0, gradients=(1.0, 2.0, 3.0), action=act)
    row = np.array([650.0, 1.0, 2.0, 3.0, 1.25, 660.0])
    assert prognose(model, inp) == pytest.approx(float(forward(model, row)[0]),
                                                 rel=1e-15)
    actions = [ControlAction(1.0, 645.0), act, ControlAction(1.5, 685.0)]
    batch = prognose_batch(model, 650.0, (1.0, 2.0, 3.0), actions)
    singles = [prognose(model, PrognosisInput(650.0, (1.0, 2.0, 3.0), a))
               for a in actions]
    assert batch == pytest.approx(singles, rel=1e-15)


# ---------------------------------------------------------------------------
# Strategy inventory and margins.

def test_enumerate_strategies_grid_and_immediate_flags():
    b = ActionBounds(1.0, 1.5, 645.0, 685.0)
    acts = enumerate_strategies(b, 3)
    assert len(acts) == 9
    assert [(a.w2_end, a.t_trip) for a in acts[:3]] == [
        (1.0, 645.0), (1.0, 665.0), (1.0, 685.0)]
    assert not any(a.immediate for a in acts)
    flagged = enumerate_strategies(b, 3, diagnosed=660.0)
    assert [a.immediate for a in flagged] == [tr <= 660.0 for _, tr in
                                              [(a.w2_end, a.t_trip) for a in flagged]]
    single = enumerate_strategies(b, 1)
    assert len(single) == 1
    assert (single[0].w2_end, single[0].t_trip) == (1.25, 665.0)
    with pytest.raises(ValueError):
        enumerate_strategies(b, 0)
    # same lattice as the episode generator's grid
    assert [(a.w2_end, a.t_trip) for a in enumerate_strategies(b, 4)] \
        == [(a.w2_end, a.t_trip) for a in sample_grid(b, 4)]


def test_margin_table_margins_and_strict_safety():
    acts = enumerate_strategies(ActionBounds(), 2)
    preds = np.array([680.0, 685.0, 690.0, 600.0])
    table = assess(acts, preds, limit=685.0)
    assert table.margins == pytest.approx([5.0, 0.0, -5.0, 85.0])
    assert list(table.safe) == [True, False, False, True]   # margin 0 unsafe
    csv = table.to_csv().splitlines()
    assert csv[0] == "w2_end,T_trip,prediction,margin,safe"
    assert csv[1] == "1,645,680,5,1"
    with pytest.raises(ValueError):
        assess(acts, preds[:2])


def test_limit_surface_edges_and_flags():
    acts = enumerate_strategies(ActionBounds(), 2)
    surf = limit_surface(assess(acts, [600.0] * 4))
    assert surf.flag == "all-safe" and surf.edges == []
    surf = limit_surface(assess(acts, [700.0] * 4))
    assert surf.flag == "all-unsafe" and surf.edges == []
    surf = limit_surface(assess(acts, [600.0, 700.0, 600.0, 600.0]))
    assert surf.flag == "ok"
    assert (((0, 0), (0, 1)) in surf.edges)
    assert (((0, 1), (1, 1)) in surf.edges)
    assert len(surf.edges) == 2
    with pytest.raises(ValueError):
        limit_surface(MarginTable(acts[:3], np.zeros(3), 685.0))
    rect = limit_surface(MarginTable(
        enumerate_strategies(ActionBounds(), 1) * 6,
        np.array([600.0, 700.0, 600.0, 600.0, 600.0, 600.0]), 685.0),
        shape=(2, 3))
    assert rect.flag == "ok"


def test_recommend_prefers_max_margin_then_speed_then_low_trip():
    b = ActionBounds(1.0, 1.5, 645.0, 685.0)
    acts = enumerate_strategies(b, 2)    # (1,645) (1,685) (1.5,645) (1.5,685)
    rec = recommend(assess(acts, [660.0, 650.0, 655.0, 670.0]))
    assert not rec.scram
    assert rec.action == acts[1]
    assert rec.margin == pytest.approx(35.0)
    # tie on margin: prefer higher w2_end
    rec = recommend(assess(acts, [650.0, 660.0, 650.0, 660.0]))
    assert rec.action.w2_end == 1.5 and rec.action.t_trip == 645.0
    # tie on margin and speed: prefer lower trip temperature
    rec = recommend(assess(acts, [660.0, 660.0, 650.0, 650.0]))
    assert rec.action == acts[2]
    assert "margin" in rec.reason


def test_recommend_scrams_when_nothing_is_safe():
    acts = enumerate_strategies(ActionBounds(), 2)
    rec = recommend(assess(acts, [700.0, 690.0, 686.0, 685.0]))
    assert rec.scram and rec.action is None
    assert rec.prediction is None
    assert rec.describe().startswith("SCRAM")


def test_recommend_matches_brute_force_on_random_tables():
    rng = np.random.default_rng(17)
    acts = enumerate_strategies(ActionBounds(), 4)
    for _ in range(20):
        preds = rng.uniform(640.0, 700.0, size=len(acts))
        table = assess(acts, preds, limit=685.0)
        rec = recommend(table)
        safe = [i for i in range(len(acts)) if 685.0 - preds[i] > 0.0]
        if not safe:
            assert rec.scram
            continue
        best = max(safe, key=lambda i: (685.0 - preds[i], acts[i].w2_end,
                                        -acts[i].t_trip))
        assert rec.action == acts[best]
        # shifting the limit shifts margins uniformly: same argmax
        for shift in (-20.0, 20.0):
            moved = recommend(assess(acts, preds, limit=685.0 + shift))
            if not moved.scram and not rec.scram:
                assert moved.action == rec.action


def test_recommendation_describe_mentions_trip_mode():
    act = ControlAction(1.5, 645.0, immediate=True)
    rec = Recommendation(act, 650.0, 35.0, False, "max safety margin")
    assert "immediately" in rec.describe()
    act2 = ControlAction(1.5, 660.0)
    rec2 = Recommendation(act2, 650.0, 35.0, False, "max safety margin")
    assert "once T_PFCL reaches 660" in rec2.describe()


# ---------------------------------------------------------------------------
# Dataset builders.

@pytest.fixture(scope="module")
def tiny_store(cfg):
    specs = [ScenarioSpec.from_parts(0.5, 60.0, TABLE_T_ACC),
             ScenarioSpec.from_parts(0.5, 80.0, TABLE_T_ACC)]
    return build_sweep_database(specs, ControlAction(1.5, 650.0), cfg)


def test_diagnosis_dataset_rows_and_groups(tiny_store):
    x, y, g = diagnosis_dataset(tiny_store, row_stride=10)
    assert x.shape == (400, 3) and y.shape == (400,) and g.shape == (400,)
    rec = tiny_store.records[0]
    assert x[0] == pytest.approx([rec.series[0, 1], rec.series[0, 2],
                                  rec.series[0, 3]])
    assert y[0] == rec.series[0, 4]
    assert set(g[:200]) == {g[0]} and set(g[200:]) == {g[200]}
    assert g[0] != g[200]


def test_prognosis_dataset_true_features(tiny_store):
    x, y, g = prognosis_dataset(tiny_store)
    assert x.shape == (2, 6)
    rec = tiny_store.records[0]
    k0 = 100                       # decision 10 s after onset at 0.1 s rows
    t = rec.series[:k0 + 1, 0]
    v = rec.series[:k0 + 1, 4]
    assert x[0, 0] == pytest.approx(v[-1])
    assert x[0, 1:4] == pytest.approx(gradient_features(t, v))
    assert x[0, 4] == 1.5 and x[0, 5] == 650.0
    assert y[0] == rec.max_t_pfcl
    assert len(set(g)) == 2


def test_prognosis_dataset_with_diagnosis_model(tiny_store):
    model = constant_model(641.5)
    x, _, _ = prognosis_dataset(tiny_store, diagnosis=model)
    assert x[:, 0] == pytest.approx([641.5, 641.5])
    assert x[:, 1:4] == pytest.approx(np.zeros((2, 3)), abs=1e-12)


# ---------------------------------------------------------------------------
# Bundle container.

def test_bundle_round_trip(tmp_path):
    bundle = TwinBundle(diagnosis=constant_model(640.0),
                        prognosis=NeuralNetModel.init([6, 4, 1], seed=2),
                        bounds=ActionBounds(1.1, 1.4, 650.0, 680.0),
                        limit=683.0, grid_n=16, decision_delay=12.0,
                        grad_spans=(1.0, 3.0), config_hash="abc123")
    bundle.require_complete()
    bundle.save(tmp_path / "b")
    again = TwinBundle.load(tmp_path / "b")
    assert again.bounds == bundle.bounds
    assert again.limit == 683.0 and again.grid_n == 16
    assert again.decision_delay == 12.0
    assert again.grad_spans == (1.0, 3.0)
    assert again.config_hash == "abc123"
    x = np.array([630.0, 631.0, 629.0])
    assert forward(again.diagnosis, x) == pytest.approx(
        forward(bundle.diagnosis, x), rel=0, abs=0)
    xp = np.array([650.0, 1.0, 2.0, 3.0, 1.2, 660.0])
    assert forward(again.prognosis, xp) == pytest.approx(
        forward(bundle.prognosis, xp), rel=0, abs=0)


def test_bundle_incomplete_and_bad_format(tmp_path):
    bundle = TwinBundle(diagnosis=None, prognosis=None, bounds=ActionBounds())
    with pytest.raises(ValueError, match="missing twin"):
        bundle.require_complete()
    bundle.save(tmp_path / "partial")
    loaded = TwinBundle.load(tmp_path / "partial")
    assert loaded.diagnosis is None and loaded.prognosis is None
    with open(tmp_path / "partial" / "bundle.txt", "w") as fh:
        fh.write("not-a-bundle\n")
    with pytest.raises(ValueError):
        TwinBundle.load(tmp_path / "partial")
