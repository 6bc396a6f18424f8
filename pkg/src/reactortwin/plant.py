"""Reduced-order sodium-cooled primary-loop simulator.

Five lumped thermal nodes (high- and low-pressure plena, core channel,
upper plenum, intermediate heat exchanger) plus a first-order fuel-rod
conduction lag, one-group point kinetics with a single negative
temperature feedback acting on deviations from the nominal steady state,
a prescribed pump-1 coastdown and a rate-limited pump-2 actuator.
Integration is explicit fixed-step RK4.

All temperatures are degC, heat capacities MJ/degC, conductances and
flow heat-capacity rates MW/degC, times s.  Pump speeds and power are
fractions of their nominal values.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

# Sensor channel order used everywhere downstream.
CHANNELS = ("T_HPP", "T_LPP", "T_UP")

# Hard validity envelope; leaving it means the integration blew up.
TEMP_MIN = 0.0      # degC
TEMP_MAX = 2000.0   # degC
SPEED_MAX = 1.5     # fraction of nominal pump speed


class NonConvergence(Exception):
    """Steady-state fixed point failed to settle within its budget."""


class NumericalBlowup(Exception):
    """A state variable left its validity envelope during integration."""


@dataclass(frozen=True)
class PlantConfig:
    """Plant parameters.

    Attributes
    ----------
    nominal_power : MW, thermal power at 100%.
    nominal_pump_speed : rad/s, shaft speed at 100% (speed fractions
        elsewhere are relative to this).
    c_hpp, c_lpp, c_core, c_up, c_ihx : MJ/degC node heat capacities.
    c_fuel : MJ/degC fuel-rod lumped capacity.
    flow_rate : MW/degC loop heat-capacity rate at 100% total flow.
    core_flow_fraction : share of loop flow through the driver channel
        (the rest bypasses through the low-pressure/blanket path).
    fuel_conductance : MW/degC fuel-to-coolant conductance.
    peaking_factor : peak-channel multiplier on the fuel-coolant
        temperature rise (gives T_PFCL from T_FCL).
    ihx_conductance : MW/degC primary-to-intermediate conductance.
    sink_temp : degC intermediate-loop boundary temperature.
    feedback_coef : 1/degC, reactivity per degC of core-coolant
        deviation; must be negative.
    beta, gen_time, precursor_decay : one-group kinetics parameters.
    pump2_tau : s, first-order lag of the pump-2 actuator.
    scram_tau : s, scram power-decay time constant.
    scram_residual : residual power fraction (of the pre-scram level)
        that the scram decay approaches.
    dt : s, integration step.
    """

    nominal_power: float = 60.0
    nominal_pump_speed: float = 100.0
    c_hpp: float = 4.0
    c_lpp: float = 2.0
    c_core: float = 0.45
    c_up: float = 1.5
    c_ihx: float = 6.0
    c_fuel: float = 0.15
    flow_rate: float = 0.5
    core_flow_fraction: float = 0.6
    fuel_conductance: float = 9.0 / 7.0
    peaking_factor: float = 1.5
    ihx_conductance: float = 1.0
    sink_temp: float = 310.0
    feedback_coef: float = -5.0e-7
    beta: float = 0.0075
    gen_time: float = 5.0e-3
    precursor_decay: float = 0.08
    pump2_tau: float = 2.0
    scram_tau: float = 10.0
    scram_residual: float = 0.05
    dt: float = 0.1

    def validate(self) -> None:
        for cap in ("c_hpp", "c_lpp", "c_core", "c_up", "c_ihx", "c_fuel"):
            if getattr(self, cap) <= 0.0:
                raise ValueError(f"{cap} must be positive")
        if self.feedback_coef >= 0.0:
            raise ValueError("feedback_coef must be negative")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.core_flow_fraction < 1.0:
            raise ValueError("core_flow_fraction must lie in (0, 1)")
        for pos in ("flow_rate", "fuel_conductance", "ihx_conductance",
                    "pump2_tau", "scram_tau", "nominal_pump_speed"):
            if getattr(self, pos) <= 0.0:
                raise ValueError(f"{pos} must be positive")
        if self.nominal_power < 0.0:
            raise ValueError("nominal_power must be non-negative")

    # Feedback references the nominal steady state, so doubling the
    # coefficient leaves the steady state itself untouched.
    @property
    def core_ref_temp(self) -> float:
        f_core = self.flow_rate * self.core_flow_fraction
        return (self.sink_temp + self.nominal_power / self.ihx_conductance
                + self.nominal_power / f_core)

    def to_text(self) -> str:
        lines = ["# reactortwin plant config v1"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name):.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PlantConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ValueError(f"unknown config key: {key}")
            values[key] = float(val.strip())
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def load_config(path) -> PlantConfig:
    with open(path) as fh:
        return PlantConfig.from_text(fh.read())


def save_config(config: PlantConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config.to_text())


@dataclass(frozen=True)
class ScenarioSpec:
    """Loss-of-flow scenario: pump-1 linear coastdown.

    w1_end is the final speed fraction, ramp_duration the coastdown
    time T_1 (s), t_acc the accident start (s).  coastdown_rate is the
    shaft deceleration in rad/s and must agree with the other fields.
    """

    w1_end: float
    ramp_duration: float
    t_acc: float
    coastdown_rate: float

    @classmethod
    def from_parts(cls, w1_end: float, ramp_duration: float, t_acc: float,
                   nominal_pump_speed: float = 100.0) -> "ScenarioSpec":
        rate = nominal_pump_speed * (1.0 - w1_end) / ramp_duration
        return cls(w1_end, ramp_duration, t_acc, rate)

    def validate(self, nominal_pump_speed: float = 100.0) -> None:
        if not 0.0 <= self.w1_end <= 1.0:
            raise ValueError("w1_end must lie in [0, 1]")
        if self.ramp_duration <= 0.0:
            raise ValueError("ramp_duration must be positive")
        implied = nominal_pump_speed * (1.0 - self.w1_end) / self.ramp_duration
        scale = max(abs(self.coastdown_rate), abs(implied), 1e-30)
        if abs(self.coastdown_rate - implied) > 1e-9 * scale:
            raise ValueError("coastdown_rate inconsistent with w1_end and ramp_duration")


def pump1_profile(t, spec: ScenarioSpec, w_0: float = 100.0):
    """Normalized pump-1 speed at time t (scalar or array).

    Flat at 1.0 before t_acc, linear ramp to w1_end over ramp_duration,
    held afterwards.  w_0 is the nominal shaft speed the normalized
    value refers to.
    """
    return _pump1(t, spec.w1_end, spec.ramp_duration, spec.t_acc)


def _pump1(t, w1_end, ramp_duration, t_acc):
    # Array-friendly form; all args broadcast.
    frac = np.clip((np.asarray(t, dtype=float) - t_acc) / ramp_duration, 0.0, 1.0)
    out = 1.0 - (1.0 - w1_end) * frac
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class PlantState:
    """Full simulator state at one instant.

    Temperatures degC; power and pump speeds are fractions of nominal.
    t_core and t_ihx are internal loop nodes; t_fcl is the core-average
    fuel centerline, t_pfcl its peak-channel counterpart (the hidden
    quantity of interest, derived from t_core and t_fcl at
    construction).  precursor is the one-group delayed precursor
    inventory in power units.
    """

    t: float
    w1: float
    w2: float
    power: float
    precursor: float
    t_hpp: float
    t_lpp: float
    t_core: float
    t_up: float
    t_ihx: float
    t_fcl: float
    t_pfcl: float
    scram_latched: bool = False
    scram_power0: float = 1.0

    def temperatures(self) -> dict:
        return {"T_HPP": self.t_hpp, "T_LPP": self.t_lpp, "T_CORE": self.t_core,
                "T_UP": self.t_up, "T_IHX": self.t_ihx, "T_FCL": self.t_fcl,
                "T_PFCL": self.t_pfcl}

    def validate(self) -> None:
        for name, val in self.temperatures().items():
            if not TEMP_MIN <= val <= TEMP_MAX:
                raise ValueError(f"{name} out of range: {val}")
        for name, val in (("w1", self.w1), ("w2", self.w2)):
            if not 0.0 <= val <= SPEED_MAX + 1e-12:
                raise ValueError(f"{name} out of range: {val}")


def peak_fuel_temp(t_core, t_fcl, config: PlantConfig):
    """Peak fuel-centerline temperature from core node values."""
    return t_core + (t_fcl - t_core) * config.peaking_factor


# State-vector layout for the RK4 core (arrays broadcast over lanes).
IY_HPP, IY_LPP, IY_CORE, IY_UP, IY_IHX, IY_FCL, IY_POW, IY_PRC, IY_W2 = range(9)


def derivatives(t, y, w2_cmd, config: PlantConfig, w1_end, ramp_duration, t_acc,
                scram_mask, scram_floor):
    """Time derivatives of the 9-component state.

    y is a (9,) or (9, n) array; scenario parameters and the pump-2
    command broadcast over lanes.  scram_mask selects lanes on the
    scram decay curve, whose power relaxes to scram_floor.
    """
    w1 = _pump1(t, w1_end, ramp_duration, t_acc)
    flow = 0.5 * (w1 + y[IY_W2])          # total loop flow fraction
    f_tot = config.flow_rate * flow
    f_core = f_tot * config.core_flow_fraction
    f_blk = f_tot - f_core

    p_mw = y[IY_POW] * config.nominal_power
    h = config.fuel_conductance

    d = np.empty_like(y)
    d[IY_HPP] = f_core * (y[IY_IHX] - y[IY_HPP]) / config.c_hpp
    d[IY_LPP] = f_blk * (y[IY_IHX] - y[IY_LPP]) / config.c_lpp
    d[IY_CORE] = (f_core * (y[IY_HPP] - y[IY_CORE])
                  + h * (y[IY_FCL] - y[IY_CORE])) / config.c_core
    d[IY_UP] = (f_core * (y[IY_CORE] - y[IY_UP])
                + f_blk * (y[IY_LPP] - y[IY_UP])) / config.c_up
    d[IY_IHX] = (f_tot * (y[IY_UP] - y[IY_IHX])
                 - config.ihx_conductance * (y[IY_IHX] - config.sink_temp)) / config.c_ihx
    d[IY_FCL] = (p_mw - h * (y[IY_FCL] - y[IY_CORE])) / config.c_fuel

    # One-group kinetics with feedback on the core-coolant deviation;
    # scrammed lanes decay exponentially toward their residual instead.
    rho = config.feedback_coef * (y[IY_CORE] - config.core_ref_temp)
    d_pow_kin = ((rho - config.beta) / config.gen_time * y[IY_POW]
                 + config.precursor_decay * y[IY_PRC])
    d_pow_scr = -(y[IY_POW] - scram_floor) / config.scram_tau
    d[IY_POW] = np.where(scram_mask, d_pow_scr, d_pow_kin)
    d[IY_PRC] = np.where(scram_mask,
                         -config.precursor_decay * y[IY_PRC],
                         config.beta / config.gen_time * y[IY_POW]
                         - config.precursor_decay * y[IY_PRC])
    d[IY_W2] = (w2_cmd - y[IY_W2]) / config.pump2_tau
    return d


def rk4_step(t, y, dt, w2_cmd, config, w1_end, ramp_duration, t_acc,
             scram_mask, scram_floor):
    args = (w2_cmd, config, w1_end, ramp_duration, t_acc, scram_mask, scram_floor)
    k1 = derivatives(t, y, *args)
    k2 = derivatives(t + 0.5 * dt, y + 0.5 * dt * k1, *args)
    k3 = derivatives(t + 0.5 * dt, y + 0.5 * dt * k2, *args)
    k4 = derivatives(t + dt, y + dt * k3, *args)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def state_to_vector(state: PlantState) -> np.ndarray:
    return np.array([state.t_hpp, state.t_lpp, state.t_core, state.t_up,
                     state.t_ihx, state.t_fcl, state.power, state.precursor,
                     state.w2])


def vector_to_state(t, y, w1, template: PlantState, config: PlantConfig) -> PlantState:
    return replace(template, t=t, w1=float(w1),
                   t_hpp=float(y[IY_HPP]), t_lpp=float(y[IY_LPP]),
                   t_core=float(y[IY_CORE]), t_up=float(y[IY_UP]),
                   t_ihx=float(y[IY_IHX]), t_fcl=float(y[IY_FCL]),
                   t_pfcl=float(peak_fuel_temp(y[IY_CORE], y[IY_FCL], config)),
                   power=float(y[IY_POW]), precursor=float(y[IY_PRC]),
                   w2=float(y[IY_W2]))


def step(state: PlantState, pump2_command: float, config: PlantConfig,
         spec: ScenarioSpec) -> PlantState:
    """Advance one fixed step dt under the scenario's pump-1 profile.

    pump2_command is the held actuator target (clamped to the actuator
    envelope); raises NumericalBlowup if any temperature leaves
    [0, 2000] degC.
    """
    cmd = float(np.clip(pump2_command, 0.0, SPEED_MAX))
    floor = config.scram_residual * state.scram_power0
    y = state_to_vector(state)
    y2 = rk4_step(state.t, y, config.dt, cmd, config,
                  spec.w1_end, spec.ramp_duration, spec.t_acc,
                  state.scram_latched, floor)
    t2 = state.t + config.dt
    if not np.all(np.isfinite(y2)) or np.any(y2[:IY_FCL + 1] < TEMP_MIN) \
            or np.any(y2[:IY_FCL + 1] > TEMP_MAX):
        raise NumericalBlowup(f"state left validity envelope at t={t2:.3f}")
    return vector_to_state(t2, y2, pump1_profile(t2, spec), state, config)


def scram(state: PlantState) -> PlantState:
    """Latch the scram; idempotent once latched."""
    if state.scram_latched:
        return state
    return replace(state, scram_latched=True, scram_power0=state.power)


def steady_state(config: PlantConfig, integrate: bool = False,
                 tol: float = 1e-9, max_iter: int = 500) -> PlantState:
    """Nominal full-power steady state (t = 0, both pumps at 1.0).

    Damped Gauss-Seidel sweeps over the node balances; raises
    NonConvergence if the largest temperature derivative still exceeds
    tol degC/s after the iteration budget.  integrate=True instead
    relaxes the coupled system by time stepping from the sink
    temperature.
    """
    config.validate()
    p = 1.0
    p_mw = p * config.nominal_power
    f_tot = config.flow_rate
    f_core = f_tot * config.core_flow_fraction
    f_blk = f_tot - f_core
    h = config.fuel_conductance
    u = config.ihx_conductance
    ts = config.sink_temp

    t_hpp = t_lpp = t_core = t_up = t_ihx = t_fcl = ts
    if integrate:
        y = np.array([t_hpp, t_lpp, t_core, t_up, t_ihx, t_fcl, p,
                      config.beta * p / (config.gen_time * config.precursor_decay), 1.0])
        spec_hold = ScenarioSpec.from_parts(1.0, 1.0, 1e18, config.nominal_pump_speed)
        t = 0.0
        for _ in range(max_iter * 100):
            y = rk4_step(t, y, config.dt, 1.0, config, spec_hold.w1_end,
                         spec_hold.ramp_duration, spec_hold.t_acc, False, 0.0)
            t += config.dt
            d = derivatives(t, y, 1.0, config, spec_hold.w1_end,
                            spec_hold.ramp_duration, spec_hold.t_acc, False, 0.0)
            if np.max(np.abs(d[:IY_FCL + 1])) < tol:
                break
        else:
            raise NonConvergence("time-relaxation did not settle")
        t_hpp, t_lpp, t_core, t_up, t_ihx, t_fcl = y[:IY_FCL + 1]
        p = y[IY_POW]
    else:
        for _ in range(max_iter):
            t_ihx = (f_tot * t_up + u * ts) / (f_tot + u)
            t_hpp = t_ihx
            t_lpp = t_ihx
            t_core = t_hpp + p_mw / f_core
            t_up = (f_core * t_core + f_blk * t_lpp) / f_tot
            t_fcl = t_core + p_mw / h
            y = np.array([t_hpp, t_lpp, t_core, t_up, t_ihx, t_fcl, p,
                          config.beta * p / (config.gen_time * config.precursor_decay),
                          1.0])
            d = derivatives(0.0, y, 1.0, config, 1.0, 1.0, 1e18, False, 0.0)
            if np.max(np.abs(d[:IY_FCL + 1])) < tol:
                break
        else:
            raise NonConvergence("fixed-point sweeps did not settle")

    state = PlantState(
        t=0.0, w1=1.0, w2=1.0, power=float(p),
        precursor=float(config.beta * p / (config.gen_time * config.precursor_decay)),
        t_hpp=float(t_hpp), t_lpp=float(t_lpp), t_core=float(t_core),
        t_up=float(t_up), t_ihx=float(t_ihx), t_fcl=float(t_fcl),
        t_pfcl=float(peak_fuel_temp(t_core, t_fcl, config)))
    state.validate()
    return state


@dataclass(frozen=True)
class SensorFrame:
    """One synchronized read of the three loop thermocouples.

    values follows CHANNELS order; invalid channels carry NaN and a
    False flag.  Between zero and three channels may be invalid.
    """

    t: float
    values: tuple
    valid: tuple

    def as_dict(self) -> dict:
        return dict(zip(CHANNELS, self.values))


def read_sensors(state: PlantState, failed=()) -> SensorFrame:
    """Sample the sensed channels, masking any failed ones with NaN."""
    raw = {"T_HPP": state.t_hpp, "T_LPP": state.t_lpp, "T_UP": state.t_up}
    values = []
    valid = []
    for name in CHANNELS:
        if name in failed:
            values.append(float("nan"))
            valid.append(False)
        else:
            values.append(raw[name])
            valid.append(True)
    return SensorFrame(t=state.t, values=tuple(values), valid=tuple(valid))


CSV_HEADER = "t,w_1,w_2,power,T_HPP,T_LPP,T_UP,T_FCL,T_PFCL"


def state_csv_row(state: PlantState) -> str:
    vals = [state.t, state.w1, state.w2, state.power, state.t_hpp,
            state.t_lpp, state.t_up, state.t_fcl, state.t_pfcl]
    return ",".join(f"{v:.9g}" for v in vals)
