"""Action grids, batched episode simulation, and the on-disk episode store.

An episode is one simulated loss-of-flow transient under a fixed
(w2_end, T_trip) mitigation action: 200 s from accident start sampled
at 0.1 s, i.e. exactly 2000 rows of (t, T_HPP, T_LPP, T_UP, T_PFCL,
w_1, w_2).  A store is a directory of per-episode CSV files plus a
plain-text manifest; all floats on disk carry 9 significant digits and
the in-memory store always holds the disk-quantized values, so
rebuilding from the same inputs is bit-identical.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .plant import (IY_FCL, IY_CORE, IY_HPP, IY_IHX, IY_LPP, IY_POW, IY_PRC,
                    IY_UP, IY_W2, NumericalBlowup, PlantConfig, ScenarioSpec,
                    TEMP_MAX, TEMP_MIN, _pump1, peak_fuel_temp, rk4_step,
                    state_to_vector, steady_state)

EPISODE_SECONDS = 200.0
ROW_DT = 0.1
N_ROWS = 2000
SERIES_COLUMNS = ("t", "T_HPP", "T_LPP", "T_UP", "T_PFCL", "w_1", "w_2")

# Global actuator envelope; per-store bounds must sit inside it.
W2_ENVELOPE = (0.0, 1.5)
TRIP_ENVELOPE = (0.0, 2000.0)


class InvalidBounds(Exception):
    """Action bounds empty, inverted, or outside the actuator envelope."""


class EmptySelection(Exception):
    """An episode selection pattern matched nothing."""


@dataclass(frozen=True)
class ControlAction:
    """Mitigation strategy: ramp pump 2 to w2_end once T_PFCL reaches
    t_trip (degC).  immediate marks strategies whose trip temperature
    is already at or below the current diagnosed T_PFCL."""

    w2_end: float
    t_trip: float
    immediate: bool = False


@dataclass(frozen=True)
class ActionBounds:
    w2_min: float = 1.0
    w2_max: float = 1.5
    trip_min: float = 645.0
    trip_max: float = 685.0

    def validate(self) -> None:
        if not (W2_ENVELOPE[0] <= self.w2_min <= self.w2_max <= W2_ENVELOPE[1]):
            raise InvalidBounds(f"pump bounds [{self.w2_min}, {self.w2_max}] "
                                f"outside envelope {W2_ENVELOPE}")
        if not (TRIP_ENVELOPE[0] <= self.trip_min <= self.trip_max <= TRIP_ENVELOPE[1]):
            raise InvalidBounds(f"trip bounds [{self.trip_min}, {self.trip_max}] "
                                f"outside envelope {TRIP_ENVELOPE}")
        if self.w2_min > self.w2_max or self.trip_min > self.trip_max:
            raise InvalidBounds("inverted bounds")


def _axis(lo: float, hi: float, n: int) -> np.ndarray:
    # n = 1 degenerates to the interval midpoint.
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, n)


def sample_grid(bounds: ActionBounds, n: int) -> list[ControlAction]:
    """Uniform inclusive n x n tensor grid over the action space."""
    if n < 2:
        raise InvalidBounds("grid resolution must be at least 2")
    bounds.validate()
    w2s = _axis(bounds.w2_min, bounds.w2_max, n)
    trips = _axis(bounds.trip_min, bounds.trip_max, n)
    return [ControlAction(float(w), float(tr)) for w in w2s for tr in trips]


def sample_random(bounds: ActionBounds, n: int, seed: int) -> list[ControlAction]:
    """Seeded uniform off-grid actions, for held-out test sets."""
    if n < 1:
        raise InvalidBounds("need at least one action")
    bounds.validate()
    rng = np.random.default_rng(seed)
    w2s = rng.uniform(bounds.w2_min, bounds.w2_max, size=n)
    trips = rng.uniform(bounds.trip_min, bounds.trip_max, size=n)
    return [ControlAction(float(w), float(tr)) for w, tr in zip(w2s, trips)]


@dataclass
class EpisodeRecord:
    episode_id: int
    spec: ScenarioSpec
    action: ControlAction
    series: np.ndarray            # (N_ROWS, 7) in SERIES_COLUMNS order
    max_t_pfcl: float
    trip_time: float | None
    split: str = "train"

    def column(self, name: str) -> np.ndarray:
        return self.series[:, SERIES_COLUMNS.index(name)]


@dataclass
class EpisodeStore:
    family: str
    config_hash: str
    records: list
    grid_n: int = 0
    bounds: ActionBounds | None = None

    def __len__(self) -> int:
        return len(self.records)

    def total_rows(self) -> int:
        return sum(r.series.shape[0] for r in self.records)

    def save(self, out_dir) -> None:
        save_store(self, out_dir)


def simulate_batch(specs: list[ScenarioSpec], actions: list[ControlAction],
                   config: PlantConfig, arm_delay: float = 10.0):
    """Run len(actions) episodes in lock-step numpy lanes.

    specs is either one spec shared by every lane or one per lane.
    Returns (series, trip_times): series (n, N_ROWS, 7), trip_times
    (n,) with NaN where the trip never fired.  Ground-truth T_PFCL
    drives the trips, but only from arm_delay seconds into the episode
    onward: control can act no earlier than the decision time, and the
    training data must realize the same timing the operational loop
    will.
    """
    n = len(actions)
    if len(specs) == 1:
        specs = specs * n
    if len(specs) != n:
        raise ValueError("specs must be length 1 or match actions")
    config.validate()
    for sp in specs:
        sp.validate(config.nominal_pump_speed)
    stride = int(round(ROW_DT / config.dt))
    if abs(stride * config.dt - ROW_DT) > 1e-12 or stride < 1:
        raise ValueError("config.dt must divide the 0.1 s row spacing")

    w1_end = np.array([sp.w1_end for sp in specs])
    ramp = np.array([sp.ramp_duration for sp in specs])
    t_acc = np.array([sp.t_acc for sp in specs])
    w2_end = np.array([a.w2_end for a in actions])
    t_trip = np.array([a.t_trip for a in actions])

    base = steady_state(config)
    y = np.repeat(state_to_vector(base)[:, None], n, axis=1)
    tripped = np.zeros(n, dtype=bool)
    trip_times = np.full(n, np.nan)
    series = np.empty((n, N_ROWS, len(SERIES_COLUMNS)))

    k_pk = config.peaking_factor
    k_arm = int(round(arm_delay / ROW_DT))
    for k in range(N_ROWS):
        t = t_acc + k * ROW_DT
        t_pfcl = y[IY_CORE] + (y[IY_FCL] - y[IY_CORE]) * k_pk
        if k >= k_arm:
            crossing = ~tripped & (t_pfcl >= t_trip)
            trip_times[crossing] = t[crossing]
            tripped |= crossing

        series[:, k, 0] = t
        series[:, k, 1] = y[IY_HPP]
        series[:, k, 2] = y[IY_LPP]
        series[:, k, 3] = y[IY_UP]
        series[:, k, 4] = t_pfcl
        series[:, k, 5] = _pump1(t, w1_end, ramp, t_acc)
        series[:, k, 6] = y[IY_W2]

        if k == N_ROWS - 1:
            break
        cmd = np.where(tripped, w2_end, 1.0)
        for sub in range(stride):
            y = rk4_step(t + sub * config.dt, y, config.dt, cmd, config,
                         w1_end, ramp, t_acc, False, 0.0)
        temps = y[:IY_FCL + 1]
        if not np.all(np.isfinite(temps)) or temps.min() < TEMP_MIN \
                or temps.max() > TEMP_MAX:
            raise NumericalBlowup(f"episode batch left validity envelope at row {k + 1}")
    return series, trip_times


def _quantize_series(series: np.ndarray) -> tuple[str, np.ndarray]:
    """Format one episode through the on-disk representation.

    Returns the CSV text and the reparsed values, so memory and disk
    always agree bit for bit.
    """
    buf = io.StringIO()
    buf.write(",".join(SERIES_COLUMNS) + "\n")
    np.savetxt(buf, series, fmt="%.9g", delimiter=",")
    text = buf.getvalue()
    parsed = pd.read_csv(io.StringIO(text)).to_numpy(dtype=float)
    return text, parsed


def _fmt(x) -> str:
    return f"{x:.9g}"


def _pack_records(specs, actions, config, split):
    series, trip_times = simulate_batch(specs, actions, config)
    if len(specs) == 1:
        specs = specs * len(actions)
    records = []
    for i, action in enumerate(actions):
        text, quant = _quantize_series(series[i])
        trip = None if np.isnan(trip_times[i]) else float(_fmt(trip_times[i]))
        records.append(EpisodeRecord(
            episode_id=i, spec=specs[i], action=action, series=quant,
            max_t_pfcl=float(quant[:, SERIES_COLUMNS.index("T_PFCL")].max()),
            trip_time=trip, split=split))
    return records


def build_database(spec: ScenarioSpec, bounds: ActionBounds, grid_n: int,
                   config: PlantConfig, out_dir=None, split: str = "train",
                   family: str = "grid") -> EpisodeStore:
    """Grid-sampled store: one episode per action on the n x n grid."""
    actions = sample_grid(bounds, grid_n)
    records = _pack_records([spec], actions, config, split)
    store = EpisodeStore(family=family, config_hash=config.config_hash(),
                         records=records, grid_n=grid_n, bounds=bounds)
    if out_dir is not None:
        save_store(store, out_dir)
    return store


def build_random_database(spec: ScenarioSpec, bounds: ActionBounds, n: int,
                          config: PlantConfig, seed: int, out_dir=None,
                          split: str = "test", family: str = "random") -> EpisodeStore:
    """Off-grid store with seeded uniform actions (held-out sets)."""
    actions = sample_random(bounds, n, seed)
    records = _pack_records([spec], actions, config, split)
    store = EpisodeStore(family=family, config_hash=config.config_hash(),
                         records=records, grid_n=0, bounds=bounds)
    if out_dir is not None:
        save_store(store, out_dir)
    return store


def build_sweep_database(specs: list[ScenarioSpec], action: ControlAction,
                         config: PlantConfig, out_dir=None, split: str = "train",
                         family: str = "sweep") -> EpisodeStore:
    """Scenario-sweep store: one episode per spec, a single shared action."""
    records = _pack_records(list(specs), [action] * len(specs), config, split)
    store = EpisodeStore(family=family, config_hash=config.config_hash(),
                         records=records)
    if out_dir is not None:
        save_store(store, out_dir)
    return store


def save_store(store: EpisodeStore, out_dir) -> None:
    """Write episode CSVs first, the manifest last (a partial directory
    without manifest.txt is never mistaken for a valid store)."""
    ep_dir = os.path.join(out_dir, "episodes")
    os.makedirs(ep_dir, exist_ok=True)
    for rec in store.records:
        text, _ = _quantize_series(rec.series)
        with open(os.path.join(ep_dir, f"ep_{rec.episode_id:05d}.csv"), "w") as fh:
            fh.write(text)
    lines = ["# reactortwin episode store v1",
             f"family = {store.family}",
             f"config_hash = {store.config_hash}",
             f"grid_n = {store.grid_n}",
             f"count = {len(store.records)}"]
    if store.bounds is not None:
        b = store.bounds
        lines.append("bounds = " + " ".join(_fmt(v) for v in
                                            (b.w2_min, b.w2_max, b.trip_min, b.trip_max)))
    lines.append("fields = id w1_end ramp_duration t_acc w2_end t_trip "
                 "max_t_pfcl trip_time split")
    for rec in store.records:
        sp, a = rec.spec, rec.action
        trip = "none" if rec.trip_time is None else _fmt(rec.trip_time)
        lines.append(" ".join([str(rec.episode_id), _fmt(sp.w1_end),
                               _fmt(sp.ramp_duration), _fmt(sp.t_acc),
                               _fmt(a.w2_end), _fmt(a.t_trip),
                               _fmt(rec.max_t_pfcl), trip, rec.split]))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_store(in_dir, nominal_pump_speed: float = 100.0) -> EpisodeStore:
    path = os.path.join(in_dir, "manifest.txt")
    with open(path) as fh:
        raw = [ln.rstrip("\n") for ln in fh]
    header: dict = {}
    rows = []
    in_rows = False
    for ln in raw:
        if not ln or ln.startswith("#"):
            continue
        if ln.startswith("fields ="):
            in_rows = True
            continue
        if in_rows:
            rows.append(ln.split())
        else:
            key, _, val = ln.partition("=")
            header[key.strip()] = val.strip()
    bounds = None
    if "bounds" in header:
        vals = [float(v) for v in header["bounds"].split()]
        bounds = ActionBounds(*vals)
    records = []
    for parts in rows:
        eid = int(parts[0])
        spec = ScenarioSpec.from_parts(float(parts[1]), float(parts[2]),
                                       float(parts[3]), nominal_pump_speed)
        action = ControlAction(float(parts[4]), float(parts[5]))
        series = pd.read_csv(os.path.join(in_dir, "episodes",
                                          f"ep_{eid:05d}.csv")).to_numpy(dtype=float)
        trip = None if parts[7] == "none" else float(parts[7])
        records.append(EpisodeRecord(episode_id=eid, spec=spec, action=action,
                                     series=series, max_t_pfcl=float(parts[6]),
                                     trip_time=trip, split=parts[8]))
    store = EpisodeStore(family=header.get("family", "grid"),
                         config_hash=header["config_hash"], records=records,
                         grid_n=int(header.get("grid_n", "0")), bounds=bounds)
    if len(store.records) != int(header["count"]):
        raise ValueError("manifest count does not match episode rows")
    return store


def select_episodes(store: EpisodeStore, pattern: str) -> EpisodeStore:
    """Sub-select episodes with a start:stride:stop pattern (1-indexed,
    inclusive), e.g. "1:10:100" keeps the first episode of each block
    of ten among the first hundred.  "1:1:N" is the identity."""
    try:
        start, stride, stop = (int(p) for p in pattern.split(":"))
    except ValueError as exc:
        raise ValueError(f"bad selection pattern: {pattern!r}") from exc
    if start < 1 or stride < 1 or stop < 1:
        raise ValueError("selection fields must be positive")
    idx = [i - 1 for i in range(start, min(stop, len(store.records)) + 1, stride)]
    if not idx:
        raise EmptySelection(pattern)
    return EpisodeStore(family=store.family, config_hash=store.config_hash,
                        records=[store.records[i] for i in idx],
                        grid_n=0, bounds=store.bounds)


# ---------------------------------------------------------------------------
# Scenario space.  A loss-of-flow transient is characterized by the
# pump-1 end speed and the coastdown rate; the reference transient sits
# at (0.5, 1.0).  Training covers the two flow regimes that leave
# distinct signatures inside the decision window:
#   - slow ramps at the reference end speed, where the ramp outlasts
#     the window and only the rate is visible within it, and
#   - fast collapses that settle before the decision point, where the
#     realized flow deficit (and with it the transient severity) shows
#     up directly in the window features.
# Evaluation families probe inside the slow range ("indomain") and
# outside the training boxes: "mild" drops the end speed just below the
# fast box floor, staying feature-adjacent to trained territory, while
# "severe" uses intermediate rates whose windows resemble neither
# trained regime.

TABLE_T_ACC = 10010.0


@dataclass(frozen=True)
class ScenarioBounds:
    """Axis-aligned box over (w1_end, coastdown rate)."""

    w1_lo: float
    w1_hi: float
    rate_lo: float
    rate_hi: float

    def validate(self) -> None:
        if not 0.0 <= self.w1_lo <= self.w1_hi < 1.0:
            raise InvalidBounds(f"w1_end range [{self.w1_lo}, {self.w1_hi}]")
        if not 0.0 < self.rate_lo <= self.rate_hi:
            raise InvalidBounds(f"rate range [{self.rate_lo}, {self.rate_hi}]")

    def sample(self, n: int, seed: int, t_acc: float = TABLE_T_ACC,
               nominal_pump_speed: float = 100.0) -> list[ScenarioSpec]:
        self.validate()
        rng = np.random.default_rng(seed)
        w1s = rng.uniform(self.w1_lo, self.w1_hi, size=n)
        rates = rng.uniform(self.rate_lo, self.rate_hi, size=n)
        return [ScenarioSpec.from_parts(
            float(w1), nominal_pump_speed * (1.0 - w1) / float(r), t_acc,
            nominal_pump_speed) for w1, r in zip(w1s, rates)]

    def contains(self, spec: ScenarioSpec) -> bool:
        rate = spec.coastdown_rate
        return (self.w1_lo <= spec.w1_end <= self.w1_hi
                and self.rate_lo <= rate <= self.rate_hi)


TRAIN_BOXES = (
    ScenarioBounds(0.50, 0.50, 0.5, 2.0),
    ScenarioBounds(0.20, 0.60, 12.0, 16.0),
)

FAMILY_BOXES = {
    "indomain": ScenarioBounds(0.50, 0.50, 0.6, 1.8),
    "mild": ScenarioBounds(0.05, 0.18, 12.5, 15.5),
    "severe": ScenarioBounds(0.05, 0.20, 3.5, 6.0),
}


def _split_counts(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _sample_boxes(boxes, n: int, seed: int,
                  nominal_pump_speed: float) -> list[ScenarioSpec]:
    out = []
    for b, (box, cnt) in enumerate(zip(boxes, _split_counts(n, len(boxes)))):
        out.extend(box.sample(cnt, seed + 104729 * b,
                              nominal_pump_speed=nominal_pump_speed))
    return out


def reference_scenario(nominal_pump_speed: float = 100.0) -> ScenarioSpec:
    return ScenarioSpec.from_parts(0.5, 50.0, TABLE_T_ACC, nominal_pump_speed)


def scenario_family(name: str, n: int = 1, seed: int = 0,
                    nominal_pump_speed: float = 100.0) -> list[ScenarioSpec]:
    if name == "table2":
        return [reference_scenario(nominal_pump_speed)] * max(n, 1)
    if name == "train":
        return _sample_boxes(TRAIN_BOXES, max(n, 1), seed, nominal_pump_speed)
    if name not in FAMILY_BOXES:
        raise ValueError(f"unknown scenario family: {name}")
    return FAMILY_BOXES[name].sample(n, seed,
                                     nominal_pump_speed=nominal_pump_speed)


def build_scenario_database(scenario_box, bounds: ActionBounds,
                            n_scenarios: int, actions_per: int,
                            config: PlantConfig, seed: int, out_dir=None,
                            split: str = "train",
                            family: str = "scenario-box") -> EpisodeStore:
    """Training store over scenario x action space.

    scenario_box is a ScenarioBounds or a sequence of them; n_scenarios
    total seeded scenarios are split evenly across the boxes, each
    paired with actions_per seeded random actions; lanes are simulated
    in chunks so arbitrarily large stores stay within memory.
    """
    boxes = (tuple(scenario_box)
             if isinstance(scenario_box, (tuple, list)) else (scenario_box,))
    scenarios = _sample_boxes(boxes, n_scenarios, seed,
                              config.nominal_pump_speed)
    specs, actions = [], []
    for i, sc in enumerate(scenarios):
        for a in sample_random(bounds, actions_per, seed + 7919 * (i + 1)):
            specs.append(sc)
            actions.append(a)
    records = []
    chunk = 1024
    for lo in range(0, len(actions), chunk):
        part = _pack_records(specs[lo:lo + chunk], actions[lo:lo + chunk],
                             config, split)
        for j, rec in enumerate(part):
            rec.episode_id = lo + j
        records.extend(part)
    store = EpisodeStore(family=family, config_hash=config.config_hash(),
                         records=records, grid_n=0, bounds=bounds)
    if out_dir is not None:
        save_store(store, out_dir)
    return store


def scenario_groups(store: EpisodeStore) -> np.ndarray:
    """Group id per record: episodes of one scenario share a group.

    Validation splits must separate scenarios, not just episodes; all
    episodes of a scenario share their pre-action trajectory, so an
    episode-level split would leak identical rows across the split.
    """
    keys = sorted({(r.spec.w1_end, r.spec.ramp_duration, r.spec.t_acc)
                   for r in store.records})
    index = {k: i for i, k in enumerate(keys)}
    return np.array([index[(r.spec.w1_end, r.spec.ramp_duration, r.spec.t_acc)]
                     for r in store.records])
