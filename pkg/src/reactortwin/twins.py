"""Digital twins for diagnosis and prognosis, plus the strategy
inventory and its safety-margin ranking.

The diagnosis twin maps one imputed sensor frame (T_HPP, T_LPP, T_UP)
to the hidden peak fuel centerline temperature.  The prognosis twin
maps the diagnosed state (estimate plus redundant backward-difference
gradients over 1, 2 and 5 s) and a candidate action to the maximum T_PFCL over
the remaining transient.  Margins are limit minus prediction; a
strategy is safe only when its margin is strictly positive.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .episodes import (ROW_DT, ActionBounds, ControlAction, EpisodeStore,
                       SERIES_COLUMNS, _axis, scenario_groups)
from .network import NeuralNetModel, forward, load_model, save_model
from .plant import SensorFrame

GRAD_SPANS = (1.0, 2.0, 5.0)    # s, backward-difference windows
DEFAULT_LIMIT = 685.0           # degC, peak fuel centerline safety limit


class AllSensorsFailed(Exception):
    """Every channel in the frame is invalid; nothing to impute from."""


class InsufficientHistory(Exception):
    """The stored series does not span the requested gradient window."""


def impute(frame: SensorFrame) -> np.ndarray:
    """Fill failed channels with the mean of the valid ones."""
    vals = np.asarray(frame.values, dtype=float)
    valid = np.asarray(frame.valid, dtype=bool) & np.isfinite(vals)
    if not valid.any():
        raise AllSensorsFailed(f"no valid channel at t={frame.t}")
    fill = vals[valid].mean()
    out = vals.copy()
    out[~valid] = fill
    return out


@dataclass(frozen=True)
class DiagnosisInput:
    """Sensor frames over the diagnosis window, oldest first."""

    frames: tuple
    policy: str = "mean-of-valid"


def diagnose_series(model: NeuralNetModel, frames) -> np.ndarray:
    """Estimated T_PFCL for each frame (imputation applied per frame)."""
    rows = np.stack([impute(f) for f in frames])
    return forward(model, rows)[:, 0]


def diagnose(model: NeuralNetModel, inp: DiagnosisInput) -> float:
    """Estimated T_PFCL at the newest frame of the window."""
    frames = inp.frames if isinstance(inp, DiagnosisInput) else tuple(inp)
    if len(frames) == 0:
        raise ValueError("empty diagnosis window")
    return float(diagnose_series(model, frames)[-1])


def finite_gradient(times, values, span: float) -> float:
    """Backward difference over roughly `span` seconds.

    Uses the stored sample nearest to t0 - span and divides by the
    actual time separation, so an exactly linear series returns its
    slope for every span.  Raises InsufficientHistory when the buffer
    does not reach back far enough.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != v.shape or len(t) < 2:
        raise InsufficientHistory("need at least two samples")
    if span <= 0.0:
        raise ValueError("span must be positive")
    t0 = t[-1]
    if t0 - t[0] < span - 1e-9:
        raise InsufficientHistory(f"buffer spans {t0 - t[0]:.3f} s < {span} s")
    j = int(np.argmin(np.abs(t - (t0 - span))))
    if j == len(t) - 1:
        j -= 1
    return float((v[-1] - v[j]) / (t0 - t[j]))


def gradient_features(times, values, spans=GRAD_SPANS) -> list:
    return [finite_gradient(times, values, s) for s in spans]


@dataclass(frozen=True)
class PrognosisInput:
    """Diagnosed state and a candidate action at decision time."""

    estimate: float
    gradients: tuple
    action: ControlAction


def _prognosis_row(estimate, gradients, action) -> list:
    return [estimate, *gradients, action.w2_end, action.t_trip]


def prognose(model: NeuralNetModel, inp: PrognosisInput) -> float:
    """Predicted maximum T_PFCL over the remaining transient."""
    x = np.asarray(_prognosis_row(inp.estimate, inp.gradients, inp.action))
    return float(forward(model, x)[0])


def prognose_batch(model: NeuralNetModel, estimate: float, gradients,
                   actions) -> np.ndarray:
    rows = np.array([_prognosis_row(estimate, gradients, a) for a in actions])
    return forward(model, rows)[:, 0]


def enumerate_strategies(bounds: ActionBounds, resolution: int,
                         diagnosed: float | None = None) -> list:
    """Uniform inclusive grid over the action space.

    resolution 1 degenerates to the midpoint on each axis.  When the
    current diagnosed T_PFCL is supplied, strategies whose trip
    temperature it already meets are marked immediate.
    """
    if resolution < 1:
        raise ValueError("resolution must be at least 1")
    bounds.validate()
    w2s = _axis(bounds.w2_min, bounds.w2_max, resolution)
    trips = _axis(bounds.trip_min, bounds.trip_max, resolution)
    out = []
    for w in w2s:
        for tr in trips:
            imm = diagnosed is not None and tr <= diagnosed
            out.append(ControlAction(float(w), float(tr), immediate=imm))
    return out


@dataclass
class MarginTable:
    """Per-strategy predictions and safety margins against one limit."""

    actions: list
    predictions: np.ndarray
    limit: float

    @property
    def margins(self) -> np.ndarray:
        return self.limit - self.predictions

    @property
    def safe(self) -> np.ndarray:
        return self.margins > 0.0

    def to_csv(self) -> str:
        lines = ["w2_end,T_trip,prediction,margin,safe"]
        for a, p, m, s in zip(self.actions, self.predictions,
                              self.margins, self.safe):
            lines.append(f"{a.w2_end:.9g},{a.t_trip:.9g},{p:.9g},{m:.9g},"
                         f"{int(s)}")
        return "\n".join(lines) + "\n"


def assess(actions, predictions, limit: float = DEFAULT_LIMIT) -> MarginTable:
    """Margins are exactly limit - prediction; safe means margin > 0."""
    preds = np.asarray(predictions, dtype=float)
    if len(actions) != len(preds):
        raise ValueError("actions and predictions differ in length")
    return MarginTable(list(actions), preds, float(limit))


@dataclass
class LimitSurface:
    """Grid edges where the safe flag flips.  flag is "ok", "all-safe"
    or "all-unsafe"; the latter two carry an empty boundary."""

    edges: list
    flag: str


def limit_surface(table: MarginTable, shape=None) -> LimitSurface:
    n = len(table.actions)
    if shape is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError("margin table is not a square grid; pass shape")
        shape = (side, side)
    safe = table.safe.reshape(shape)
    if safe.all():
        return LimitSurface([], "all-safe")
    if not safe.any():
        return LimitSurface([], "all-unsafe")
    edges = []
    rows, cols = shape
    for i in range(rows):
        for j in range(cols):
            if j + 1 < cols and safe[i, j] != safe[i, j + 1]:
                edges.append(((i, j), (i, j + 1)))
            if i + 1 < rows and safe[i, j] != safe[i + 1, j]:
                edges.append(((i, j), (i + 1, j)))
    return LimitSurface(edges, "ok")


@dataclass(frozen=True)
class Recommendation:
    """Either a chosen strategy or a scram order when nothing is safe."""

    action: ControlAction | None
    prediction: float | None
    margin: float | None
    scram: bool
    reason: str

    def describe(self) -> str:
        if self.scram:
            return f"SCRAM: {self.reason}"
        a = self.action
        imm = " immediately" if a.immediate else f" once T_PFCL reaches {a.t_trip:.6g} degC"
        return (f"ramp pump 2 to {a.w2_end:.6g}x nominal{imm}; predicted peak "
                f"{self.prediction:.6g} degC, margin {self.margin:.6g} degC")


def recommend(table: MarginTable) -> Recommendation:
    """Largest-margin safe strategy; ties prefer the higher pump speed,
    then the lower trip temperature.  No safe strategy means scram."""
    margins = table.margins
    if not table.safe.any():
        return Recommendation(None, None, None, True,
                              "no strategy keeps the peak below the limit")
    best = margins.max()
    cand = [i for i in range(len(margins)) if margins[i] == best]
    cand.sort(key=lambda i: (-table.actions[i].w2_end, table.actions[i].t_trip))
    i = cand[0]
    return Recommendation(table.actions[i], float(table.predictions[i]),
                          float(margins[i]), False, "max safety margin")


# ---------------------------------------------------------------------------
# Training-set builders.

def diagnosis_dataset(store: EpisodeStore, row_stride: int = 10):
    """(sensor triple -> T_PFCL) rows subsampled from every episode.

    Groups are scenario-level: all episodes of one scenario share their
    pre-action trajectory, so splitting by episode would leak identical
    rows across a validation split.
    """
    i_hpp = SERIES_COLUMNS.index("T_HPP")
    i_up = SERIES_COLUMNS.index("T_UP")
    i_pfcl = SERIES_COLUMNS.index("T_PFCL")
    groups = scenario_groups(store)
    xs, ys, gs = [], [], []
    for rec, grp in zip(store.records, groups):
        rows = rec.series[::row_stride]
        xs.append(rows[:, i_hpp:i_up + 1])
        ys.append(rows[:, i_pfcl])
        gs.append(np.full(rows.shape[0], grp))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(gs)


def prognosis_dataset(store: EpisodeStore, decision_delay: float = 10.0,
                      spans=GRAD_SPANS, diagnosis: NeuralNetModel | None = None):
    """One row per episode: state at decision time plus the action.

    With a diagnosis model the estimate and its gradients come from
    diagnosing the stored sensor columns, exactly what the operational
    loop will feed prognosis; without one the true peak temperature
    series stands in.
    """
    i_t = SERIES_COLUMNS.index("t")
    i_hpp = SERIES_COLUMNS.index("T_HPP")
    i_pfcl = SERIES_COLUMNS.index("T_PFCL")
    k0 = int(round(decision_delay / ROW_DT))
    groups = scenario_groups(store)
    xs, ys = [], []
    for rec in store.records:
        t = rec.series[:k0 + 1, i_t]
        if diagnosis is not None:
            v = forward(diagnosis, rec.series[:k0 + 1, i_hpp:i_hpp + 3])[:, 0]
        else:
            v = rec.series[:k0 + 1, i_pfcl]
        grads = gradient_features(t, v, spans)
        xs.append(_prognosis_row(v[-1], grads, rec.action))
        ys.append(rec.max_t_pfcl)
    return np.array(xs), np.array(ys), groups


# ---------------------------------------------------------------------------
# Bundle: both twins plus everything the operational loop needs to act.

BUNDLE_TAG = "reactortwin bundle v1"


@dataclass
class TwinBundle:
    diagnosis: NeuralNetModel | None
    prognosis: NeuralNetModel | None
    bounds: ActionBounds
    limit: float = DEFAULT_LIMIT
    grid_n: int = 32
    decision_delay: float = 10.0
    grad_spans: tuple = GRAD_SPANS
    config_hash: str = ""

    def require_complete(self) -> None:
        missing = [name for name, m in (("diagnosis", self.diagnosis),
                                        ("prognosis", self.prognosis)) if m is None]
        if missing:
            raise ValueError(f"bundle missing twin(s): {', '.join(missing)}")

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        b = self.bounds
        lines = [BUNDLE_TAG,
                 f"config_hash = {self.config_hash}",
                 f"limit = {self.limit:.17g}",
                 f"grid_n = {self.grid_n}",
                 f"decision_delay = {self.decision_delay:.17g}",
                 "grad_spans = " + " ".join(f"{s:.17g}" for s in self.grad_spans),
                 "bounds = " + " ".join(f"{v:.17g}" for v in
                                        (b.w2_min, b.w2_max, b.trip_min, b.trip_max))]
        with open(os.path.join(out_dir, "bundle.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        if self.diagnosis is not None:
            save_model(self.diagnosis, os.path.join(out_dir, "diagnosis.model"))
        if self.prognosis is not None:
            save_model(self.prognosis, os.path.join(out_dir, "prognosis.model"))

    @classmethod
    def load(cls, in_dir) -> "TwinBundle":
        path = os.path.join(in_dir, "bundle.txt")
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != BUNDLE_TAG:
            raise ValueError("unrecognized bundle format/version")
        kv = {}
        for ln in lines[1:]:
            if not ln.strip():
                continue
            key, _, val = ln.partition("=")
            kv[key.strip()] = val.strip()
        bounds = ActionBounds(*(float(v) for v in kv["bounds"].split()))
        bundle = cls(diagnosis=None, prognosis=None, bounds=bounds,
                     limit=float(kv["limit"]), grid_n=int(kv["grid_n"]),
                     decision_delay=float(kv["decision_delay"]),
                     grad_spans=tuple(float(v) for v in kv["grad_spans"].split()),
                     config_hash=kv.get("config_hash", ""))
        dg = os.path.join(in_dir, "diagnosis.model")
        pg = os.path.join(in_dir, "prognosis.model")
        if os.path.exists(dg):
            bundle.diagnosis = load_model(dg)
        if os.path.exists(pg):
            bundle.prognosis = load_model(pg)
        return bundle
