"""Write the four shipped route instances.

Stop counts, average drive times, external temperature statistics and pallet
flows follow the published case study. Individual drive times and the shape
of the temperature profile are synthetic: the profile rises linearly from the
minimum to the maximum over the first ``ramp`` fraction of the driving time
and then stays at the maximum, which reproduces the published min/mean/max.
Pallet destinations are assigned first-in first-out.
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from coldchain.instance import ThermoParams, instance_from_dict
from coldchain.scenario import ScenarioModel, required_handling_slots

OUT = Path(__file__).resolve().parents[1] / "src" / "coldchain" / "data" / "instances"

ROUTES = {
    "r1": dict(drive=[80, 65, 75, 70, 68, 74], temps=(288.0, 291.0, 293.0), ramp=0.8, depot=25,
               flows=[(2, 8), (2, 0), (2, 3), (2, 1), (2, 8), (0, 15)], hours=8.5, stop_min=17),
    "r2": dict(drive=[95, 82, 90, 85, 92, 84], temps=(288.0, 293.0, 296.0), ramp=0.75, depot=20,
               flows=[(2, 1), (2, 1), (2, 4), (2, 3), (2, 1), (0, 20)], hours=9.8, stop_min=11),
    "r3": dict(drive=[52, 45, 40, 48, 50, 44, 47, 43, 55, 46, 47], temps=(291.0, 297.0, 299.0), ramp=0.5,
               depot=18, flows=[(2, 1), (2, 2), (2, 0), (2, 1), (2, 2), (2, 3), (2, 7), (2, 2), (2, 3),
                                (2, 2), (0, 15)], hours=10.7, stop_min=12),
    "r4": dict(drive=[78, 70, 80, 72, 76, 74], temps=(293.0, 296.0, 297.0), ramp=0.5, depot=15,
               flows=[(2, 1), (2, 4), (2, 1), (2, 3), (2, 3), (0, 13)], hours=8.6, stop_min=12),
}

PRODUCT = {"id": "chilled", "h": 4.0, "A_p": 1.9, "C_p": 780000.0, "T_lower": 274.0, "T_upper": 277.0,
           "loaded_meters": 0.4}
DOOR_MODEL = {"intercept_log_s": 5.502, "lm_coef_per_m": 0.35, "quad_coef_per_m2": 0.0,
              "class_offsets": {"chilled": 0.0}, "residual_pool": "builtin"}
DEPOT_AIR = 275.5
H_MAX = 6.0  # largest heat-transfer coefficient of the experiment grid


def van_der_corput(k: int) -> float:
    x, f = 0.0, 0.5
    while k:
        x += f * (k & 1)
        k >>= 1
        f /= 2
    return x


def depot_temp(k: int) -> float:
    """Stratified depot pallet temperature across the product band."""
    return round(PRODUCT["T_lower"] + (PRODUCT["T_upper"] - PRODUCT["T_lower"]) * van_der_corput(k + 1), 6)


def profile(n_slots, lo, hi, ramp):
    t = (np.arange(n_slots) + 0.5) / n_slots
    return np.where(t < ramp, lo + (hi - lo) * t / ramp, hi)


def build(key, spec):
    drive = spec["drive"]
    S = len(drive)
    lo, avg, hi = spec["temps"]
    series = profile(sum(drive), lo, hi, spec["ramp"])
    assert abs(series.mean() - avg) < 0.05, (key, series.mean())
    onboard, pallets = [], []
    for k in range(spec["depot"]):
        pid = f"d{k + 1:02d}"
        pallets.append({"id": pid, "class": "chilled", "load_stop": 0, "destination_stop": None,
                        "initial_temp_K": depot_temp(k)})
        onboard.append(pid)
    by_id = {p["id"]: p for p in pallets}
    stops = []
    pos = 0
    for s, (n_in, n_out) in enumerate(spec["flows"], start=1):
        out = onboard[:n_out]
        onboard = onboard[n_out:]
        for pid in out:
            by_id[pid]["destination_stop"] = s
        new = []
        for k in range(n_in):
            pid = f"s{s:02d}p{k + 1}"
            p = {"id": pid, "class": "chilled", "load_stop": s, "destination_stop": None}
            pallets.append(p)
            by_id[pid] = p
            new.append(pid)
        onboard += new
        stops.append({"drive_minutes": drive[s - 1],
                      "ext_temp_series_K": [round(float(v), 6) for v in series[pos:pos + drive[s - 1]]],
                      "pallets_in": new, "pallets_out": out})
        pos += drive[s - 1]
    assert not onboard, key
    th = ThermoParams()
    doc = {
        "meta": {"name": key, "route_duration_h": spec["hours"], "average_stop_min": spec["stop_min"],
                 "ext_temp_min_K": lo, "ext_temp_avg_K": avg, "ext_temp_max_K": hi,
                 "note": "synthetic drive times and temperature profile matching published route statistics"},
        "thermo": {k: getattr(th, k) for k in th.__dataclass_fields__},
        "classes": [PRODUCT],
        "pallets": pallets,
        "stops": stops,
        "initial_air_temp_K": DEPOT_AIR,
        "delta_d_s": 60.0,
        "door_time_model": DOOR_MODEL,
    }
    inst = instance_from_dict(doc, key).with_params(h=H_MAX)
    model = ScenarioModel.for_instance(inst)
    for s in range(2, S + 1):
        doc["stops"][s - 2]["handling_slots"] = required_handling_slots(inst, model, s)
    instance_from_dict(doc, key)
    return doc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for key, spec in ROUTES.items():
        doc = build(key, spec)
        (args.out / f"{key}.json").write_text(json.dumps(doc, indent=1) + "\n")
        slots = [st.get("handling_slots") for st in doc["stops"]]
        print(f"{key}: {len(doc['stops'])} stops, handling slots {slots}")


if __name__ == "__main__":
    main()
