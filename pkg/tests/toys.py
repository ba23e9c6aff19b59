"""Small hand-built instances and lattices for oracle tests."""

from __future__ import annotations

import numpy as np

from coldchain.instance import ThermoParams, instance_from_dict
from coldchain.scenario import ScenarioLattice

CHILLED = {"id": "chilled", "h": 4.0, "A_p": 1.9, "C_p": 780000.0, "T_lower": 274.0, "T_upper": 277.0}


def toy_doc(drive=(12, 10), ext=(299.0, 301.0), handling_slots=30, depot_temp=277.4, air=279.0, delta_d=60.0):
    """Two stages: depot -> stop 1 (door opening, one pallet loaded) -> stop 2."""
    th = ThermoParams()
    return {
        "meta": {"name": "toy"},
        "thermo": {k: getattr(th, k) for k in th.__dataclass_fields__},
        "classes": [dict(CHILLED)],
        "pallets": [
            {"id": "a", "class": "chilled", "load_stop": 0, "destination_stop": 2, "initial_temp_K": depot_temp},
            {"id": "b", "class": "chilled", "load_stop": 1, "destination_stop": 2},
        ],
        "stops": [
            {"drive_minutes": drive[0], "ext_temp_series_K": [ext[0]] * drive[0], "pallets_in": ["b"],
             "pallets_out": [], "handling_slots": handling_slots},
            {"drive_minutes": drive[1], "ext_temp_series_K": [ext[1]] * drive[1], "pallets_in": [],
             "pallets_out": ["a", "b"]},
        ],
        "initial_air_temp_K": air,
        "delta_d_s": delta_d,
    }


def toy_instance(**kw):
    return instance_from_dict(toy_doc(**kw), "toy")


def toy_lattice(door=(600.0, 900.0, 1200.0), temps=(277.6, 276.8, 277.9), probs=(0.3, 0.5, 0.2)):
    nodes = {1: np.zeros((1, 0)), 2: np.column_stack([door, temps])}
    return ScenarioLattice(nodes, {1: np.ones(1), 2: np.asarray(probs, dtype=float)},
                           {1: np.ones(0), 2: np.ones(2)}, {"M": len(door)})
