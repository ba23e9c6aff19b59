"""Compressor power: exact quadratic map from refrigerant properties and its max-affine surrogate."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

# R134a property fits (pressure in bar)
A1 = -6.7014e3
B1 = 2.1729e5
A21 = -9.0496e2
A22 = 3.367e3
B2 = -3.152e3

KELVIN = 273.15


def _saturation_table() -> tuple[np.ndarray, np.ndarray]:
    text = resources.files("coldchain").joinpath("data/r134a.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    return (np.array([float(r["T_sat_C"]) for r in rows]) + KELVIN,
            np.array([float(r["P_sat_bar"]) for r in rows]))


_SAT_T, _SAT_P = _saturation_table()


def condenser_pressure(T_ext: float, approach: float = 0.0) -> float:
    """Condensing pressure [bar] at ``T_ext + approach`` from the bundled saturation table."""
    T = T_ext + approach
    if not _SAT_T[0] <= T <= _SAT_T[-1]:
        raise ValueError(f"{T} K outside the saturation table range")
    return float(np.interp(T, _SAT_T, _SAT_P))


@dataclass(frozen=True)
class ThetaCoeffs:
    t1: float
    t2: float
    t3: float
    t4: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.t1, self.t2, self.t3, self.t4


def theta_from_pressure(gamma: float, P_c: float) -> ThetaCoeffs:
    den = A1 * P_c + B1
    if abs(den) < 1e-9 * abs(B1):
        raise ZeroDivisionError(f"pressure {P_c} makes the coefficient denominator vanish")
    t1 = -gamma * A21 / den
    t2 = -gamma * (A22 * P_c + B2) / den
    return ThetaCoeffs(t1, t2, -t1, -t2)


def exact_power(theta: ThetaCoeffs, T_cu, T_air):
    """Compressor power [W] for temperatures given in kelvin.

    The refrigerant fits behind the coefficients are in degrees Celsius, so the
    quadratic is evaluated on Celsius values.
    """
    c = np.asarray(T_cu, dtype=float) - KELVIN
    a = np.asarray(T_air, dtype=float) - KELVIN
    return theta.t1 * c * c + theta.t2 * c + theta.t3 * c * a + theta.t4 * a


@dataclass
class MaxAffineModel:
    """max_k(phi0 + phi1*T_cu + phi2*T_air) with temperatures in kelvin."""

    planes: np.ndarray  # (K, 3)
    wmape: float = float("nan")
    max_rel_error: float = float("nan")
    sse_trace: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.planes)

    def evaluate(self, T_cu, T_air):
        T_cu = np.asarray(T_cu, dtype=float)
        T_air = np.asarray(T_air, dtype=float)
        vals = (self.planes[:, 0][:, None] + np.multiply.outer(self.planes[:, 1], T_cu.ravel())
                + np.multiply.outer(self.planes[:, 2], T_air.ravel()))
        out = vals.max(axis=0)
        return out.reshape(np.broadcast(T_cu, T_air).shape) if out.size > 1 or T_cu.ndim else float(out[0])

    def __call__(self, T_cu, T_air):
        return self.evaluate(T_cu, T_air)

    def to_dict(self) -> dict:
        return {"planes": self.planes.tolist(), "wmape": self.wmape, "max_rel_error": self.max_rel_error}

    @classmethod
    def from_dict(cls, d: dict) -> MaxAffineModel:
        return cls(np.asarray(d["planes"], dtype=float), d.get("wmape", float("nan")),
                   d.get("max_rel_error", float("nan")))


def wmape(y: np.ndarray, yhat: np.ndarray) -> float:
    return float(np.abs(y - yhat).sum() / np.abs(y).sum())


def fit_grid(theta: ThetaCoeffs, Gamma: float, T_air_lo: float, T_air_hi: float, n: int = 100):
    """n*n samples over the admissible region Gamma <= T_cu <= T_air."""
    if not Gamma < T_air_lo < T_air_hi:
        raise ValueError("need Gamma < T_air_lo < T_air_hi")
    Ta, u = np.meshgrid(np.linspace(T_air_lo, T_air_hi, n), np.linspace(0.0, 1.0, n), indexing="ij")
    Tc = Gamma + u * (Ta - Gamma)
    W = exact_power(theta, Tc, Ta)
    return np.column_stack([Tc.ravel(), Ta.ravel(), W.ravel()])


def _lsq(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(X, y, rcond=None)[0]


def _sse(X, y, planes):
    return float((((X @ planes.T).max(axis=1) - y) ** 2).sum())


def _partition_fit(X, y, K, init_planes, max_iter, min_pts):
    """Alternate assignment and per-partition least squares.

    A full step that raises the squared error is backtracked towards the
    current planes; if no step length helps the iteration stops, so the
    recorded error sequence is non-increasing.
    """
    planes = init_planes.copy()
    sse = _sse(X, y, planes)
    trace = [sse]
    for _ in range(max_iter):
        vals = X @ planes.T
        assign = np.argmax(vals, axis=1)
        resid = np.abs(vals.max(axis=1) - y)
        new = planes.copy()
        for k in range(K):
            idx = np.flatnonzero(assign == k)
            if len(idx) < min_pts:
                # reseed on the worst-fitted points
                idx = np.argsort(resid)[-max(min_pts, len(y) // (4 * K)):]
            new[k] = _lsq(X[idx], y[idx])
        for t in (1.0, 0.5, 0.25, 0.125):
            cand = planes + t * (new - planes)
            cand_sse = _sse(X, y, cand)
            if cand_sse < sse * (1 - 1e-10):
                break
        else:
            break
        planes, sse = cand, cand_sse
        trace.append(sse)
    return planes, sse, trace


def _grow(X, y, K, max_iter):
    """Deterministic start: begin with one plane and split the worst-fitting plane until K."""
    planes = _lsq(X, y)[None, :]
    for k in range(1, K):
        vals = X @ planes.T
        assign = np.argmax(vals, axis=1)
        err = (vals.max(axis=1) - y) ** 2
        worst = int(np.argmax([err[assign == j].sum() for j in range(len(planes))]))
        idx = np.flatnonzero(assign == worst)
        if len(idx) < 6:
            idx = np.argsort(err)[-6:]
        Z = X[idx, 1:]
        axis = int(np.argmax(Z.var(axis=0)))
        cut = np.median(Z[:, axis])
        lo, hi = idx[Z[:, axis] <= cut], idx[Z[:, axis] > cut]
        if len(lo) < 3 or len(hi) < 3:
            lo, hi = idx[: len(idx) // 2], idx[len(idx) // 2:]
        planes = np.vstack([np.delete(planes, worst, axis=0), _lsq(X[lo], y[lo]), _lsq(X[hi], y[hi])])
        planes, _, _ = _partition_fit(X, y, len(planes), planes, max_iter, 3)
    return planes


def fit_max_affine(samples: np.ndarray, K: int, seed: int = 0, restarts: int = 20,
                   max_iter: int = 100, init: np.ndarray | None = None) -> MaxAffineModel:
    """Least-squares partition fit of a convex max-affine function.

    ``samples`` has columns (T_cu, T_air, W).  The first start grows the planes one
    split at a time; each further restart seeds the planes by least squares on
    a random spatial (nearest-centre) partition.  The start with the smallest
    squared error wins.  ``init`` adds one extra start from
    given planes, e.g. a fit with fewer planes padded with copies.
    """
    samples = np.asarray(samples, dtype=float)
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(samples) < 3 * K:
        raise ValueError("need at least 3*K samples")
    # centre and scale inputs for conditioning
    mu = samples[:, :2].mean(axis=0)
    sd = samples[:, :2].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (samples[:, :2] - mu) / sd
    X = np.column_stack([np.ones(len(Z)), Z])
    y = samples[:, 2]
    rng = np.random.default_rng(seed)

    def to_scaled(p):  # kelvin planes -> scaled planes
        p = np.atleast_2d(p)
        s1, s2 = p[:, 1] * sd[0], p[:, 2] * sd[1]
        return np.column_stack([p[:, 0] + p[:, 1] * mu[0] + p[:, 2] * mu[1], s1, s2])

    starts = [_grow(X, y, K, max_iter)]
    if init is not None:
        starts.append(to_scaled(init))
    for _ in range(restarts if K > 1 else 0):
        centres = Z[rng.choice(len(Z), size=K, replace=False)]
        assign = np.argmin(((Z[:, None, :] - centres[None]) ** 2).sum(axis=2), axis=1)
        p0 = np.empty((K, 3))
        for k in range(K):
            idx = np.flatnonzero(assign == k)
            if len(idx) < 3:
                idx = rng.choice(len(Z), size=3 * 4, replace=False)
            p0[k] = _lsq(X[idx], y[idx])
        starts.append(p0)

    best = None
    for p0 in starts:
        planes, sse, trace = _partition_fit(X, y, K, p0, max_iter, 3)
        if best is None or sse < best[1]:
            best = (planes, sse, trace)
    planes, sse, trace = best
    # back to kelvin coordinates
    phi1 = planes[:, 1] / sd[0]
    phi2 = planes[:, 2] / sd[1]
    phi0 = planes[:, 0] - phi1 * mu[0] - phi2 * mu[1]
    model = MaxAffineModel(np.column_stack([phi0, phi1, phi2]), sse_trace=trace)
    pred = model.evaluate(samples[:, 0], samples[:, 1])
    model.wmape = wmape(y, pred)
    big = np.abs(y) > 0.05 * np.abs(y).max()
    model.max_rel_error = float(np.max(np.abs(pred[big] - y[big]) / np.abs(y[big]))) if big.any() else 0.0
    return model


def w_max(model: MaxAffineModel, T_air: float, Gamma: float, W_cap: float) -> float:
    """Power drawn at full capacity: surrogate at the refrigerant floor, clamped to the unit capacity."""
    return float(min(model.evaluate(Gamma, T_air), W_cap))


def full_capacity_setpoint(model: MaxAffineModel, T_air: float, Gamma: float, W_cap: float) -> float:
    """Lowest cooling-fluid temperature whose surrogate power fits under ``W_cap``."""
    if model.evaluate(Gamma, T_air) <= W_cap:
        return Gamma
    T = Gamma
    for phi0, phi1, phi2 in model.planes:
        if phi1 < 0:
            T = max(T, (W_cap - phi0 - phi2 * T_air) / phi1)
    return float(min(T, T_air))


@dataclass
class PowerModel:
    """Max-affine surrogates keyed by external temperature rounded to whole kelvin."""

    buckets: dict[int, MaxAffineModel]
    Gamma: float
    gamma: float
    approach: float = 0.0
    meta: dict = field(default_factory=dict)

    @staticmethod
    def bucket(T_ext: float) -> int:
        return int(np.floor(T_ext + 0.5))

    def model_for(self, T_ext: float) -> MaxAffineModel:
        key = self.bucket(T_ext)
        if key not in self.buckets:
            raise KeyError(f"no power model for external temperature bucket {key} K")
        return self.buckets[key]

    def planes_for(self, T_ext: float) -> np.ndarray:
        return self.model_for(T_ext).planes

    def surrogate(self, T_cu: float, T_air: float, T_ext: float) -> float:
        return float(self.model_for(T_ext).evaluate(T_cu, T_air))

    def exact(self, T_cu, T_air, T_ext):
        return exact_power(theta_from_pressure(self.gamma, condenser_pressure(T_ext, self.approach)), T_cu, T_air)

    def to_dict(self) -> dict:
        return {"Gamma_K": self.Gamma, "gamma_W_per_K": self.gamma, "approach_K": self.approach,
                "meta": self.meta,
                "buckets": {str(k): m.to_dict() for k, m in sorted(self.buckets.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> PowerModel:
        return cls({int(k): MaxAffineModel.from_dict(v) for k, v in d["buckets"].items()},
                   d["Gamma_K"], d["gamma_W_per_K"], d.get("approach_K", 0.0), d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> PowerModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def route_buckets(instance) -> list[int]:
    temps = {PowerModel.bucket(t) for st in instance.stops for t in st.ext_temps}
    return sorted(temps)


def fit_bucket(T_ext: float, gamma: float, Gamma: float, K: int = 4, n: int = 100, seed: int = 0,
               restarts: int = 20, T_air_lo: float = KELVIN, approach: float = 0.0):
    theta = theta_from_pressure(gamma, condenser_pressure(T_ext, approach))
    samples = fit_grid(theta, Gamma, T_air_lo, T_ext + 2.0, n)
    return fit_max_affine(samples, K, seed=seed, restarts=restarts), samples


def fit_power_model(instance, K: int = 4, n: int = 100, seed: int = 0, restarts: int = 20,
                    T_air_lo: float = KELVIN, approach: float = 0.0) -> PowerModel:
    th = instance.thermo
    buckets = {}
    for b in route_buckets(instance):
        buckets[b], _ = fit_bucket(float(b), th.evaporator_transmittance, th.refrigerant_floor, K, n,
                                   seed + b, restarts, T_air_lo, approach)
    return PowerModel(buckets, th.refrigerant_floor, th.evaporator_transmittance, approach,
                      {"K": K, "grid_n": n, "seed": seed, "T_air_lo_K": T_air_lo})
