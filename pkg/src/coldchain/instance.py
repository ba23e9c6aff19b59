"""Route data model: product classes, pallets, stops, physical parameters and time grid.

Indexing convention used throughout the package:

* stops are numbered 1..S, the depot is stop 0;
* stage s covers the handling at stop s-1 (absent for s = 1) followed by the
  drive from stop s-1 to stop s;
* the final stop S is not handled.

Time indices enumerate slots over the whole route, handling slots before the
driving slots of the same stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

HANDLING = "handling"
DRIVING = "driving"


class InstanceError(ValueError):
    """Invalid instance data; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ProductClass:
    id: str
    h: float
    A_p: float
    C_p: float
    T_lower: float
    T_upper: float
    loaded_meters: float = 0.4

    @property
    def beta(self) -> float:
        return self.h * self.A_p

    def validate(self, where: str = "classes") -> None:
        for name in ("h", "A_p", "C_p"):
            if not getattr(self, name) > 0:
                raise InstanceError(f"{where}.{name}", "must be positive")
        if not self.T_lower < self.T_upper:
            raise InstanceError(f"{where}.T_lower", "must be below T_upper")


@dataclass(frozen=True)
class Pallet:
    id: str
    cls: str
    load_stop: int
    destination_stop: int
    initial_temp: float | None = None


@dataclass(frozen=True)
class Stop:
    index: int
    drive_minutes: int
    ext_temps: tuple[float, ...]
    pallets_in: tuple[str, ...] = ()
    pallets_out: tuple[str, ...] = ()
    handling_slots: int | None = None


@dataclass(frozen=True)
class ThermoParams:
    wall_transmittance: float = 0.4
    area_total: float = 153.9
    area_walls: float = 146.9
    infiltration_rate: float = 2.6
    air_specific_heat: float = 1005.6
    air_heat_capacity: float = 120513.0
    evaporator_transmittance: float = 300.0
    unit_capacity: float = 12000.0
    refrigerant_floor: float = 263.15
    fuel_conversion: float = 9.504e6

    def validate(self, where: str = "thermo") -> None:
        for name in self.__dataclass_fields__:
            if name == "refrigerant_floor":
                continue
            if not getattr(self, name) > 0:
                raise InstanceError(f"{where}.{name}", "must be positive")

    @property
    def alpha_closed(self) -> float:
        return self.wall_transmittance * self.area_total

    @property
    def alpha_open(self) -> float:
        return self.wall_transmittance * self.area_walls + self.infiltration_rate * self.air_specific_heat


@dataclass(frozen=True)
class TimeGrid:
    """Slot layout; handling durations depend on the realized door time and are not stored."""

    handling_slots: tuple[int, ...]  # per stage, 0 for stage 1
    driving_slots: tuple[int, ...]
    delta_d: float

    @property
    def n_stages(self) -> int:
        return len(self.driving_slots)

    @cached_property
    def stage_start(self) -> tuple[int, ...]:
        out, pos = [], 0
        for L, D in zip(self.handling_slots, self.driving_slots):
            out.append(pos)
            pos += L + D
        return tuple(out)

    @property
    def n_slots(self) -> int:
        return sum(self.handling_slots) + sum(self.driving_slots)

    def i0(self, s: int) -> int:
        """First driving slot of stage s (1-based stage)."""
        return self.stage_start[s - 1] + self.handling_slots[s - 1]

    def locate(self, i: int) -> tuple[int, str, int]:
        """Map a time index to (stage, phase, offset within phase)."""
        if not 0 <= i < self.n_slots:
            raise IndexError(f"time index {i} outside 0..{self.n_slots - 1}")
        for s in range(self.n_stages, 0, -1):
            start = self.stage_start[s - 1]
            if i >= start:
                k = i - start
                L = self.handling_slots[s - 1]
                return (s, HANDLING, k) if k < L else (s, DRIVING, k - L)
        raise AssertionError("unreachable")

    def stage(self, i: int) -> int:
        return self.locate(i)[0]

    def phase(self, i: int) -> str:
        return self.locate(i)[1]


@dataclass(frozen=True)
class RouteInstance:
    name: str
    stops: tuple[Stop, ...]
    pallets: tuple[Pallet, ...]
    classes: tuple[ProductClass, ...]
    thermo: ThermoParams
    initial_air_temp: float
    delta_d: float = 60.0
    door_time: dict = field(default_factory=dict, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_stages(self) -> int:
        return len(self.stops)

    @cached_property
    def class_by_id(self) -> dict[str, ProductClass]:
        return {c.id: c for c in self.classes}

    @cached_property
    def pallet_by_id(self) -> dict[str, Pallet]:
        return {p.id: p for p in self.pallets}

    @cached_property
    def pallet_index(self) -> dict[str, int]:
        return {p.id: k for k, p in enumerate(self.pallets)}

    def pallet_class(self, pallet: Pallet | str) -> ProductClass:
        p = self.pallet_by_id[pallet] if isinstance(pallet, str) else pallet
        return self.class_by_id[p.cls]

    def stop(self, s: int) -> Stop:
        return self.stops[s - 1]

    @cached_property
    def grid(self) -> TimeGrid:
        L = [0] + [self.stops[s - 2].handling_slots or 1 for s in range(2, self.n_stages + 1)]
        D = [len(st.ext_temps) for st in self.stops]
        return TimeGrid(tuple(L), tuple(D), self.delta_d)

    def loaded_at(self, s: int) -> tuple[str, ...]:
        """Pallets loaded at stop s (s = 0 is the depot)."""
        return tuple(p.id for p in self.pallets if p.load_stop == s)

    def unloaded_at(self, s: int) -> tuple[str, ...]:
        return tuple(p.id for p in self.pallets if p.destination_stop == s)

    def stage_cargo(self, s: int, phase: str) -> tuple[str, ...]:
        """Pallets on board during the given phase of stage s, in instance order."""
        last_load = s - 2 if phase == HANDLING else s - 1
        return tuple(
            p.id for p in self.pallets if p.load_stop <= last_load and p.destination_stop >= s
        )

    def cargo_at(self, i: int) -> frozenset[str]:
        s, phase, _ = self.grid.locate(i)
        return frozenset(self.stage_cargo(s, phase))

    def ext_temp_handling(self, s: int) -> float:
        """External temperature held during handling in stage s (at stop s-1)."""
        return float(self.stops[s - 2].ext_temps[-1])

    def handling_count(self, s: int) -> int:
        """Pallets moved during the handling phase of stage s (stop s-1)."""
        return len(self.loaded_at(s - 1)) + len(self.unloaded_at(s - 1))

    @property
    def route_minutes(self) -> float:
        return sum(st.drive_minutes for st in self.stops)

    def with_params(self, h: float | None = None, unit_capacity: float | None = None,
                    refrigerant_floor: float | None = None) -> RouteInstance:
        """Copy with the experiment-grid parameters overridden."""
        classes = self.classes
        if h is not None:
            classes = tuple(replace(c, h=float(h)) for c in classes)
        thermo = self.thermo
        if unit_capacity is not None:
            thermo = replace(thermo, unit_capacity=float(unit_capacity))
        if refrigerant_floor is not None:
            thermo = replace(thermo, refrigerant_floor=float(refrigerant_floor))
        inst = replace(self, classes=classes, thermo=thermo)
        inst.validate()
        return inst

    def stability_ratio(self, dt: float, doors_open: bool, pallet_ids, gamma: float) -> float:
        alpha = self.thermo.alpha_open if doors_open else self.thermo.alpha_closed
        beta = sum(self.pallet_class(p).beta for p in pallet_ids)
        return dt * (alpha + beta + gamma) / self.thermo.air_heat_capacity

    def max_stable_handling_dt(self, s: int) -> float:
        """Largest handling slot length keeping the explicit update a contraction."""
        cargo = self.stage_cargo(s, HANDLING)
        return self.thermo.air_heat_capacity / (
            self.thermo.alpha_open + sum(self.pallet_class(p).beta for p in cargo))

    def validate(self) -> None:
        if not self.stops:
            raise InstanceError("stops", "at least one stop required")
        self.thermo.validate()
        if not self.delta_d > 0:
            raise InstanceError("delta_d_s", "must be positive")
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise InstanceError("classes.id", "duplicate class id")
        for k, c in enumerate(self.classes):
            c.validate(f"classes[{k}]")
            if not self.thermo.refrigerant_floor < c.T_lower:
                raise InstanceError("thermo.refrigerant_floor", f"must be below T_lower of class {c.id}")
        S = self.n_stages
        pids = [p.id for p in self.pallets]
        if len(set(pids)) != len(pids):
            raise InstanceError("pallets.id", "duplicate pallet id")
        for k, p in enumerate(self.pallets):
            if p.cls not in self.class_by_id:
                raise InstanceError(f"pallets[{k}].class", f"unknown class {p.cls!r}")
            if not 0 <= p.load_stop < p.destination_stop <= S:
                raise InstanceError(f"pallets[{k}].destination_stop",
                                    f"need 0 <= load_stop < destination_stop <= {S}")
            if p.load_stop == 0 and p.initial_temp is None:
                raise InstanceError(f"pallets[{k}].initial_temp_K", "required for depot pallets")
        for k, st in enumerate(self.stops):
            where = f"stops[{k}]"
            if st.drive_minutes < 1:
                raise InstanceError(f"{where}.drive_minutes", "must be at least 1")
            expected = int(round(st.drive_minutes * 60.0 / self.delta_d))
            if len(st.ext_temps) != expected:
                raise InstanceError(f"{where}.ext_temp_series_K",
                                    f"expected {expected} values, got {len(st.ext_temps)}")
            if not all(math.isfinite(t) and t > 0 for t in st.ext_temps):
                raise InstanceError(f"{where}.ext_temp_series_K", "temperatures must be finite kelvin")
            s = k + 1
            if set(st.pallets_in) != set(self.loaded_at(s)):
                raise InstanceError(f"{where}.pallets_in", "does not match pallets with this load_stop")
            if set(st.pallets_out) != set(self.unloaded_at(s)):
                raise InstanceError(f"{where}.pallets_out", "does not match pallets with this destination")
            if s == S and st.pallets_in:
                raise InstanceError(f"{where}.pallets_in", "nothing can be loaded at the final stop")
            if s < S and st.handling_slots is not None and st.handling_slots < 1:
                raise InstanceError(f"{where}.handling_slots", "must be at least 1")
        for s in range(1, S + 1):
            cargo = self.stage_cargo(s, DRIVING)
            ratio = self.stability_ratio(self.delta_d, False, cargo, self.thermo.evaporator_transmittance)
            if ratio > 1.0:
                raise InstanceError("delta_d_s", f"unstable driving step in stage {s} (ratio {ratio:.3f})")


def handling_slot_durations(O_s: float, count: int) -> list[float]:
    """Split a door-open time into ``count`` equal slots."""
    if not O_s > 0:
        raise ValueError("door time must be positive")
    if count < 1:
        raise ValueError("slot count must be at least 1")
    dt = O_s / count
    out = [dt] * count
    # push the rounding residue into the last slot so the sum is exact
    out[-1] = O_s - dt * (count - 1)
    return out


def schema() -> dict:
    return json.loads(resources.files("coldchain").joinpath("data/instance.schema.json").read_text())


def instance_from_dict(doc: dict, name: str = "route") -> RouteInstance:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InstanceError(where, exc.message) from None
    th = doc["thermo"]
    thermo = ThermoParams(**{k: float(v) for k, v in th.items()})
    classes = tuple(ProductClass(id=c["id"], h=c["h"], A_p=c["A_p"], C_p=c["C_p"],
                                 T_lower=c["T_lower"], T_upper=c["T_upper"],
                                 loaded_meters=c.get("loaded_meters", 0.4)) for c in doc["classes"])
    pallets = tuple(Pallet(id=p["id"], cls=p["class"], load_stop=p["load_stop"],
                           destination_stop=p["destination_stop"],
                           initial_temp=p.get("initial_temp_K")) for p in doc["pallets"])
    stops = tuple(Stop(index=k + 1, drive_minutes=st["drive_minutes"],
                       ext_temps=tuple(float(t) for t in st["ext_temp_series_K"]),
                       pallets_in=tuple(st["pallets_in"]), pallets_out=tuple(st["pallets_out"]),
                       handling_slots=st.get("handling_slots")) for k, st in enumerate(doc["stops"]))
    meta = dict(doc["meta"])
    inst = RouteInstance(name=meta.get("name", name), stops=stops, pallets=pallets, classes=classes,
                         thermo=thermo, initial_air_temp=float(doc["initial_air_temp_K"]),
                         delta_d=float(doc["delta_d_s"]), door_time=dict(doc.get("door_time_model", {})),
                         meta=meta)
    inst.validate()
    return inst


def instance_to_dict(inst: RouteInstance) -> dict:
    th = inst.thermo
    doc = {
        "meta": dict(inst.meta, name=inst.name),
        "thermo": {k: getattr(th, k) for k in th.__dataclass_fields__},
        "classes": [{"id": c.id, "h": c.h, "A_p": c.A_p, "C_p": c.C_p, "T_lower": c.T_lower,
                     "T_upper": c.T_upper, "loaded_meters": c.loaded_meters} for c in inst.classes],
        "pallets": [dict({"id": p.id, "class": p.cls, "load_stop": p.load_stop,
                          "destination_stop": p.destination_stop},
                         **({"initial_temp_K": p.initial_temp} if p.initial_temp is not None else {}))
                    for p in inst.pallets],
        "stops": [dict({"drive_minutes": st.drive_minutes, "ext_temp_series_K": list(st.ext_temps),
                        "pallets_in": list(st.pallets_in), "pallets_out": list(st.pallets_out)},
                       **({"handling_slots": st.handling_slots} if st.handling_slots else {}))
                  for st in inst.stops],
        "initial_air_temp_K": inst.initial_air_temp,
        "delta_d_s": inst.delta_d,
    }
    if inst.door_time:
        doc["door_time_model"] = inst.door_time
    return doc


def load_instance(path: str | Path) -> RouteInstance:
    """Read and validate an instance file; ``builtin:r1`` loads a shipped route."""
    path_str = str(path)
    if path_str.startswith("builtin:"):
        key = path_str.split(":", 1)[1]
        text = resources.files("coldchain").joinpath(f"data/instances/{key}.json").read_text()
        return instance_from_dict(json.loads(text), name=key)
    p = Path(path)
    if not p.exists():
        raise InstanceError("path", f"file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError("path", f"invalid JSON: {exc}") from None
    return instance_from_dict(doc, name=p.stem)


def builtin_instance(key: str) -> RouteInstance:
    return load_instance(f"builtin:{key}")


def ext_temps_array(inst: RouteInstance, s: int) -> np.ndarray:
    return np.asarray(inst.stops[s - 1].ext_temps, dtype=float)
