"""Explicit-Euler heat exchange between outside air, trailer air, products and the cooling unit."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .instance import DRIVING, HANDLING, ProductClass, RouteInstance, ThermoParams, handling_slot_durations

# tolerance on the no-heating and capacity checks, absorbs LP round-off
CONTROL_TOL = 1e-6


class ControlError(ValueError):
    pass


def alpha(thermo: ThermoParams, doors_open: bool) -> float:
    """Heat exchange coefficient between trailer air and the outside [W/K]."""
    if doors_open:
        return thermo.wall_transmittance * thermo.area_walls + thermo.infiltration_rate * thermo.air_specific_heat
    return thermo.wall_transmittance * thermo.area_total


@dataclass(frozen=True)
class ExchangeCoeffs:
    alpha: float
    betas: np.ndarray
    gamma: float
    T_ext: float
    dt: float


@dataclass(frozen=True)
class ThermalState:
    air: float
    products: np.ndarray  # aligned with ``ids``
    ids: tuple[str, ...] = ()
    index: int = 0
    fuel: float = 0.0  # liters used before this slot


def step_air(state: ThermalState, coeffs: ExchangeCoeffs, T_cu: float, C_air: float,
             floor: float | None = None) -> float:
    if not coeffs.dt > 0:
        raise ValueError("dt must be positive")
    if coeffs.gamma > 0:
        if T_cu > state.air + CONTROL_TOL:
            raise ControlError(f"cooling fluid {T_cu:.6f} K above air {state.air:.6f} K would heat")
        if floor is not None and T_cu < floor - CONTROL_TOL:
            raise ControlError(f"cooling fluid {T_cu:.6f} K below refrigerant floor {floor} K")
    flux = (coeffs.alpha * (coeffs.T_ext - state.air)
            + float(np.dot(coeffs.betas, np.asarray(state.products) - state.air))
            + coeffs.gamma * (T_cu - state.air))
    return state.air + coeffs.dt / C_air * flux


def step_product(T_p, T_air, beta, C_p, dt):
    if not dt > 0:
        raise ValueError("dt must be positive")
    return T_p + dt * beta / C_p * (T_air - T_p)


def violation(T_p, cls: ProductClass):
    return np.maximum(T_p - cls.T_upper, 0.0) + np.maximum(cls.T_lower - T_p, 0.0)


def violation_bounds(T, lower, upper):
    return np.maximum(T - upper, 0.0) + np.maximum(lower - T, 0.0)


PowerFn = Callable[[float, float, float], float]
Control = Callable[[int, int, "ThermalState"], float]


@dataclass
class Trajectory:
    """Per-slot record of one simulated route.

    Row i holds the state at the start of slot i and the decision taken in it;
    ``final_air``/``final_products`` hold the arrival state at the last stop.
    """

    pallet_ids: tuple[str, ...]
    time_s: np.ndarray
    stage: np.ndarray
    phase: np.ndarray
    dt: np.ndarray
    T_air: np.ndarray
    T_products: np.ndarray  # NaN where a pallet is not on board
    T_cu: np.ndarray
    W: np.ndarray
    on: np.ndarray
    violation: np.ndarray  # summed over pallets on board
    final_air: float
    final_products: np.ndarray

    @property
    def cost_Ks(self) -> float:
        return float(np.dot(self.dt, self.violation))

    @property
    def cost_Kmin(self) -> float:
        return self.cost_Ks / 60.0

    def stage_cost_Kmin(self) -> np.ndarray:
        S = int(self.stage.max())
        return np.array([np.dot(self.dt[self.stage == s], self.violation[self.stage == s])
                         for s in range(1, S + 1)]) / 60.0

    def fuel_liters(self, sigma: float) -> float:
        return float(np.dot(self.W, self.dt)) / sigma

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "stage", "phase", "T_air_K"]
                       + [f"T_{p}_K" for p in self.pallet_ids]
                       + ["T_cu_K", "W_watts", "violation_K"])
            for i in range(len(self.time_s)):
                w.writerow([f"{self.time_s[i]:.6f}", int(self.stage[i]), self.phase[i], f"{self.T_air[i]:.9f}"]
                           + ["" if np.isnan(t) else f"{t:.9f}" for t in self.T_products[i]]
                           + [f"{self.T_cu[i]:.9f}", f"{self.W[i]:.6f}", f"{self.violation[i]:.9f}"])


def slot_schedule(instance: RouteInstance, scenario):
    """Yield (stage, phase, k, dt, T_ext) for every slot of the route."""
    for s in range(1, instance.n_stages + 1):
        if s >= 2:
            L = instance.grid.handling_slots[s - 1]
            Text = instance.ext_temp_handling(s)
            for k, dt in enumerate(handling_slot_durations(scenario.door_time(s), L)):
                yield s, HANDLING, k, dt, Text
        for k, Text in enumerate(instance.stops[s - 1].ext_temps):
            yield s, DRIVING, k, instance.delta_d, float(Text)


def simulate_trajectory(instance: RouteInstance, scenario, control, power: PowerFn | None = None,
                        check: bool = True) -> Trajectory:
    """Simulate the route under a control.

    ``control`` is either a sequence of cooling-fluid temperatures, one per
    driving slot in route order, or a callable ``(stage, k, state) -> T_cu``.
    A value equal to the air temperature means the unit is off.  ``power``
    maps ``(T_cu, T_air, T_ext)`` to compressor power [W]; without it fuel is
    reported as zero.  With ``check`` the no-heating, floor, capacity and
    step-stability conditions are enforced.
    """
    th = instance.thermo
    ids = tuple(p.id for p in instance.pallets)
    idx = instance.pallet_index
    n = len(ids)
    beta = np.array([instance.pallet_class(p).beta for p in instance.pallets])
    Cp = np.array([instance.pallet_class(p).C_p for p in instance.pallets])
    lo = np.array([instance.pallet_class(p).T_lower for p in instance.pallets])
    hi = np.array([instance.pallet_class(p).T_upper for p in instance.pallets])
    onboard = np.zeros(n, dtype=bool)
    temps = np.full(n, np.nan)
    for p in instance.pallets:
        if p.load_stop == 0:
            temps[idx[p.id]] = p.initial_temp
    if callable(control):
        ctrl_fn = control
    else:
        arr = np.asarray(control, dtype=float)
        offsets = np.cumsum([0] + list(instance.grid.driving_slots))
        if arr.shape != (offsets[-1],):
            raise ControlError(f"control needs {offsets[-1]} driving values, got {arr.shape}")
        ctrl_fn = lambda s, k, state: arr[offsets[s - 1] + k]  # noqa: E731

    air = instance.initial_air_temp
    fuel_J = 0.0
    rows = []
    t = 0.0
    a_open, a_closed = alpha(th, True), alpha(th, False)
    cur = (0, None)
    for s, phase, k, dt, Text in slot_schedule(instance, scenario):
        if (s, phase) != cur:
            cur = (s, phase)
            cargo = instance.stage_cargo(s, phase)
            mask = np.zeros(n, dtype=bool)
            mask[[idx[p] for p in cargo]] = True
            if phase == DRIVING:
                for pid in instance.loaded_at(s - 1) if s >= 2 else ():
                    temps[idx[pid]] = scenario.initial_temp(pid)
            onboard = mask
        b = np.where(onboard, beta, 0.0)
        Tp = np.where(onboard, temps, 0.0)
        if phase == HANDLING:
            a, g, Tcu, W, on = a_open, 0.0, air, 0.0, False
        else:
            a, g = a_closed, th.evaporator_transmittance
            state = ThermalState(air, np.where(onboard, temps, np.nan), ids, len(rows), fuel_J / th.fuel_conversion)
            Tcu = float(ctrl_fn(s, k, state))
            on = Tcu < air - CONTROL_TOL
            if check:
                if Tcu > air + CONTROL_TOL:
                    raise ControlError(f"stage {s} slot {k}: T_cu {Tcu:.6f} above air {air:.6f}")
                if on and Tcu < th.refrigerant_floor - CONTROL_TOL:
                    raise ControlError(f"stage {s} slot {k}: T_cu {Tcu:.6f} below floor")
            if not on:
                Tcu = air
            W = max(0.0, float(power(Tcu, air, Text))) if (on and power is not None) else 0.0
            if check and W > th.unit_capacity * (1 + 1e-6) + CONTROL_TOL:
                raise ControlError(f"stage {s} slot {k}: power {W:.1f} W above capacity")
        if check:
            ratio = dt * (a + b.sum() + g) / th.air_heat_capacity
            if ratio > 1.0 + 1e-12:
                raise ControlError(f"stage {s} {phase} slot {k}: unstable step (ratio {ratio:.3f})")
        viol = float(np.sum(np.where(onboard, violation_bounds(temps, lo, hi), 0.0)))
        rows.append((t, s, phase, dt, air, np.where(onboard, temps, np.nan), Tcu, W, on, viol))
        flux = a * (Text - air) + float(np.dot(b, Tp - air)) + g * (Tcu - air)
        new_air = air + dt / th.air_heat_capacity * flux
        temps = np.where(onboard, temps + dt * beta / Cp * (air - temps), temps)
        air = new_air
        fuel_J += W * dt
        t += dt

    return Trajectory(
        pallet_ids=ids,
        time_s=np.array([r[0] for r in rows]),
        stage=np.array([r[1] for r in rows], dtype=int),
        phase=np.array([r[2] for r in rows]),
        dt=np.array([r[3] for r in rows]),
        T_air=np.array([r[4] for r in rows]),
        T_products=np.array([r[5] for r in rows]),
        T_cu=np.array([r[6] for r in rows]),
        W=np.array([r[7] for r in rows]),
        on=np.array([r[8] for r in rows], dtype=bool),
        violation=np.array([r[9] for r in rows]),
        final_air=air,
        final_products=np.where(onboard, temps, np.nan),
    )
