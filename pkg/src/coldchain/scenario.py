"""Randomness of the route: door-open times and temperatures of loaded pallets.

Random streams: every consumer takes an explicit ``numpy.random.Generator``.
Evaluation scenario ``n`` under seed ``seed`` is drawn from
``scenario_rng(seed, n)``, so scenario sets are reproducible and identical
across policies regardless of evaluation order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .instance import RouteInstance

TARGET_CORRELATION = 0.8
CI_Z99 = 2.5758293035489004


def latent_correlation(rho_uniform: float) -> float:
    """Gaussian-copula correlation giving Pearson ``rho_uniform`` between uniform marginals."""
    return 2.0 * math.sin(math.pi * rho_uniform / 6.0)


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# -- door-open times ---------------------------------------------------------

def load_residual_pool(source: str | Path = "builtin") -> tuple[np.ndarray, np.ndarray]:
    """Residuals and their route labels, in route order."""
    if str(source) == "builtin":
        text = resources.files("coldchain").joinpath("data/residuals.csv").read_text()
    else:
        text = Path(source).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    return (np.array([float(r["residual_log_s"]) for r in rows]),
            np.array([int(r["route_id"]) for r in rows]))


@dataclass
class DoorTimeModel:
    """log(door-open seconds) = f(x) + resampled residual.

    f is affine in loaded meters handled, with an offset per product class
    weighted by the class share of handled pallets and an optional quadratic
    term in loaded meters.
    """

    intercept: float
    lm_coef: float
    residuals: np.ndarray
    class_offsets: dict[str, float] = field(default_factory=dict)
    quad_coef: float = 0.0
    route_ids: np.ndarray | None = None

    @classmethod
    def from_config(cls, cfg: dict, base: Path | None = None) -> DoorTimeModel:
        source = cfg.get("residual_pool", "builtin")
        if source != "builtin" and base is not None and not Path(source).is_absolute():
            source = base / source
        res, routes = load_residual_pool(source)
        return cls(intercept=float(cfg["intercept_log_s"]), lm_coef=float(cfg["lm_coef_per_m"]),
                   residuals=res, class_offsets=dict(cfg.get("class_offsets", {})),
                   quad_coef=float(cfg.get("quad_coef_per_m2", 0.0)), route_ids=routes)

    def features(self, instance: RouteInstance, stop: int) -> dict:
        handled = list(instance.loaded_at(stop)) + list(instance.unloaded_at(stop))
        lm = sum(instance.pallet_class(p).loaded_meters for p in handled)
        counts: dict[str, int] = {}
        for p in handled:
            c = instance.pallet_by_id[p].cls
            counts[c] = counts.get(c, 0) + 1
        return {"loaded_meters": lm, "class_counts": counts}

    def predict_log(self, features: dict) -> float:
        lm = features["loaded_meters"]
        counts = features.get("class_counts", {})
        total = sum(counts.values())
        offset = sum(self.class_offsets.get(c, 0.0) * n / total for c, n in counts.items()) if total else 0.0
        return self.intercept + self.lm_coef * lm + self.quad_coef * lm * lm + offset

    def sample(self, features: dict, rng: np.random.Generator, size: int | None = None):
        eps = rng.choice(self.residuals, size=size)
        return np.exp(self.predict_log(features) + eps)

    def expected(self, features: dict) -> float:
        return float(math.exp(self.predict_log(features)) * np.mean(np.exp(self.residuals)))

    def max_seconds(self, features: dict) -> float:
        return float(math.exp(self.predict_log(features) + self.residuals.max()))


def sample_door_time(model: DoorTimeModel, features: dict, rng: np.random.Generator) -> float:
    return float(model.sample(features, rng))


# -- initial temperatures ----------------------------------------------------

@dataclass(frozen=True)
class TempSampler:
    lower: np.ndarray
    upper: np.ndarray
    rho: float = TARGET_CORRELATION

    @classmethod
    def for_stop(cls, instance: RouteInstance, stop: int, rho: float = TARGET_CORRELATION) -> TempSampler:
        ids = instance.loaded_at(stop)
        return cls(np.array([instance.pallet_class(p).T_lower for p in ids]),
                   np.array([instance.pallet_class(p).T_upper for p in ids]), rho)

    @property
    def n(self) -> int:
        return len(self.lower)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        m = 1 if size is None else size
        if self.n == 0:
            out = np.empty((m, 0))
        else:
            r = latent_correlation(self.rho)
            # exchangeable latent normals: shared factor plus idiosyncratic part
            common = rng.standard_normal((m, 1))
            own = rng.standard_normal((m, self.n))
            z = math.sqrt(r) * common + math.sqrt(1.0 - r) * own
            out = self.lower + ndtr(z) * (self.upper - self.lower)
        return out[0] if size is None else out

    def mean(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


def sample_initial_temps(sampler: TempSampler, rng: np.random.Generator) -> np.ndarray:
    return sampler.sample(rng)


# -- scenario paths ------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioPath:
    """Realized door times (stages 2..S) and initial temperatures of pallets loaded en route."""

    door_times: dict[int, float]
    temps: dict[str, float]

    def door_time(self, s: int) -> float:
        return self.door_times[s]

    def initial_temp(self, pid: str) -> float:
        return self.temps[pid]

    def xi(self, instance: RouteInstance, s: int) -> np.ndarray:
        return np.array([self.door_times[s]] + [self.temps[p] for p in instance.loaded_at(s - 1)])

    @classmethod
    def from_xi(cls, instance: RouteInstance, xis: dict[int, np.ndarray]) -> ScenarioPath:
        doors, temps = {}, {}
        for s, v in xis.items():
            doors[s] = float(v[0])
            for p, t in zip(instance.loaded_at(s - 1), v[1:]):
                temps[p] = float(t)
        return cls(doors, temps)


class ScenarioModel:
    """Stage-wise independent model of xi_s = (O_s, temperatures of pallets loaded at stop s-1)."""

    def __init__(self, instance: RouteInstance, door: DoorTimeModel, rho: float = TARGET_CORRELATION,
                 fix_door_times: bool = False, fix_temps: bool = False):
        self.instance = instance
        self.door = door
        self.fix_door_times = fix_door_times
        self.fix_temps = fix_temps
        self.features = {s: door.features(instance, s - 1) for s in range(2, instance.n_stages + 1)}
        self.samplers = {s: TempSampler.for_stop(instance, s - 1, rho) for s in range(2, instance.n_stages + 1)}

    @classmethod
    def for_instance(cls, instance: RouteInstance, **kw) -> ScenarioModel:
        if not instance.door_time:
            raise ValueError("instance has no door-time model")
        return cls(instance, DoorTimeModel.from_config(instance.door_time), **kw)

    @property
    def stages(self) -> range:
        return range(2, self.instance.n_stages + 1)

    def dim(self, s: int) -> int:
        return 1 + self.samplers[s].n

    def sample_stage(self, s: int, rng: np.random.Generator, size: int) -> np.ndarray:
        O = (np.full(size, self.door.expected(self.features[s])) if self.fix_door_times
             else self.door.sample(self.features[s], rng, size))
        T = (np.tile(self.samplers[s].mean(), (size, 1)) if self.fix_temps
             else self.samplers[s].sample(rng, size))
        return np.column_stack([O, T])

    def sample_path(self, rng: np.random.Generator) -> ScenarioPath:
        return ScenarioPath.from_xi(self.instance, {s: self.sample_stage(s, rng, 1)[0] for s in self.stages})

    def expected_xi(self, s: int) -> np.ndarray:
        return np.concatenate([[self.door.expected(self.features[s])], self.samplers[s].mean()])

    def max_door_time(self, s: int) -> float:
        if self.fix_door_times:
            return self.door.expected(self.features[s])
        return self.door.max_seconds(self.features[s])

    def scenarios(self, seed: int, n: int) -> list[ScenarioPath]:
        return [self.sample_path(scenario_rng(seed, k)) for k in range(n)]


def required_handling_slots(instance: RouteInstance, model: ScenarioModel, s: int, minute: float = 60.0) -> int:
    """Handling slots for stage s: at least one per door-open minute and short enough to stay stable."""
    O_max = model.max_door_time(s)
    return max(1, math.ceil(O_max / minute - 1e-9), math.ceil(O_max / instance.max_stable_handling_dt(s) - 1e-9))


# -- lattice -----------------------------------------------------------------

def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    """Lloyd's algorithm with k-means++ seeding; returns centres, labels and the SSE trace."""
    n = len(X)
    if k >= n:
        return X.copy(), np.arange(n), [0.0]
    centres = np.empty((k, X.shape[1]))
    centres[0] = X[rng.integers(n)]
    d2 = ((X - centres[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        tot = d2.sum()
        idx = rng.choice(n, p=d2 / tot) if tot > 0 else rng.integers(n)
        centres[j] = X[idx]
        d2 = np.minimum(d2, ((X - centres[j]) ** 2).sum(axis=1))
    trace = []
    labels = None
    xx = (X ** 2).sum(axis=1)
    for _ in range(max_iter):
        dist = xx[:, None] - 2.0 * X @ centres.T + (centres ** 2).sum(axis=1)[None, :]
        new_labels = np.argmin(dist, axis=1)
        sse = float(np.maximum(dist[np.arange(n), new_labels], 0.0).sum())
        trace.append(sse)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                centres[j] = X[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # split the largest cluster: move the empty centre to its farthest member
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(((X[members] - centres[big]) ** 2).sum(axis=1))]
            centres[j] = X[far]
            labels[far] = j
            counts[big] -= 1
            counts[j] = 1
    return centres, labels, trace


@dataclass
class ScenarioLattice:
    """Per-stage nodes (rows = xi values) and probabilities; stage 1 is the deterministic root."""

    nodes: dict[int, np.ndarray]
    probs: dict[int, np.ndarray]
    scale: dict[int, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def stages(self) -> list[int]:
        return sorted(self.nodes)

    def size(self, s: int) -> int:
        return len(self.nodes[s])

    def to_dict(self) -> dict:
        return {"meta": self.meta,
                "stages": {str(s): {"nodes": self.nodes[s].tolist(), "probs": self.probs[s].tolist(),
                                    "scale": self.scale[s].tolist()} for s in self.stages}}

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioLattice:
        st = d["stages"]
        return cls({int(s): np.asarray(v["nodes"], dtype=float) for s, v in st.items()},
                   {int(s): np.asarray(v["probs"], dtype=float) for s, v in st.items()},
                   {int(s): np.asarray(v["scale"], dtype=float) for s, v in st.items()}, d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> ScenarioLattice:
        return cls.from_dict(json.loads(Path(path).read_text()))


def cluster_samples(samples: np.ndarray, M: int, rng: np.random.Generator):
    """Standardize, cluster, and return (nodes, probs, scale, sse_trace)."""
    scale = samples.std(axis=0)
    scale[scale <= 1e-12 * np.maximum(1.0, np.abs(samples).max(axis=0))] = 1.0
    Z = samples / scale
    centres, labels, trace = kmeans(Z, M, rng)
    counts = np.bincount(labels, minlength=len(centres)).astype(float)
    keep = counts > 0
    return centres[keep] * scale, counts[keep] / counts.sum(), scale, trace


def build_lattice(model: ScenarioModel, M: int, N_gen: int, rng: np.random.Generator) -> ScenarioLattice:
    if M < 1:
        raise ValueError("M must be at least 1")
    if N_gen < M:
        raise ValueError("N_gen must be at least M")
    nodes, probs, scale = {}, {}, {}
    for s in model.stages:
        samples = model.sample_stage(s, rng, N_gen)
        nodes[s], probs[s], scale[s], _ = cluster_samples(samples, M, rng)
    return ScenarioLattice(nodes, probs, scale, {"M": M, "N_gen": N_gen})


def round_to_lattice(lattice: ScenarioLattice, s: int, xi: np.ndarray) -> int:
    """Index of the nearest node in the standardized norm; ties go to the lowest index."""
    d = (((lattice.nodes[s] - np.asarray(xi, dtype=float)) / lattice.scale[s]) ** 2).sum(axis=1)
    return int(np.argmin(d))


# -- residual diagnostics ----------------------------------------------------

def residual_autocorrelation(groups) -> tuple[float, tuple[float, float]]:
    """OLS slope of eps_t on eps_{t-1} within each group, with a 99% normal-approximation interval."""
    xs, ys = [], []
    for g in groups:
        g = np.asarray(g, dtype=float)
        xs.append(g[:-1])
        ys.append(g[1:])
    x = np.concatenate(xs) if xs else np.empty(0)
    y = np.concatenate(ys) if ys else np.empty(0)
    if len(x) < 3:
        raise ValueError("need at least 3 lag pairs")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise ValueError("lagged residuals have zero variance")
    b1 = float(xc @ (y - y.mean())) / sxx
    b0 = y.mean() - b1 * x.mean()
    resid = y - b0 - b1 * x
    se = math.sqrt(float(resid @ resid) / max(len(x) - 2, 1) / sxx)
    return b1, (b1 - CI_Z99 * se, b1 + CI_Z99 * se)


def split_by_route(values: np.ndarray, route_ids: np.ndarray) -> list[np.ndarray]:
    return [values[route_ids == r] for r in np.unique(route_ids)]


# -- CSV exchange --------------------------------------------------------------

def write_scenarios_csv(path: str | Path, instance: RouteInstance, paths: list[ScenarioPath]) -> None:
    width = max([len(instance.loaded_at(s - 1)) for s in range(2, instance.n_stages + 1)] + [0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "sample_id", "O_s_seconds"] + [f"temp_{j + 1}_K" for j in range(width)])
        for n, sp in enumerate(paths):
            for s in range(2, instance.n_stages + 1):
                xi = sp.xi(instance, s)
                w.writerow([s, n, f"{xi[0]:.9f}"] + [f"{t:.9f}" for t in xi[1:]] + [""] * (width + 1 - len(xi)))


def read_scenarios_csv(path: str | Path, instance: RouteInstance) -> list[ScenarioPath]:
    per: dict[int, dict[int, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            s, n = int(row["stage"]), int(row["sample_id"])
            m = len(instance.loaded_at(s - 1))
            vals = [float(row["O_s_seconds"])] + [float(row[f"temp_{j + 1}_K"]) for j in range(m)]
            per.setdefault(n, {})[s] = np.array(vals)
    return [ScenarioPath.from_xi(instance, per[n]) for n in sorted(per)]


def write_lattice_csv(path: str | Path, lattice: ScenarioLattice) -> None:
    width = max(v.shape[1] for v in lattice.nodes.values()) - 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "node_id", "probability", "O_s_seconds"] + [f"temp_{j + 1}_K" for j in range(width)])
        for s in lattice.stages:
            for k, (v, p) in enumerate(zip(lattice.nodes[s], lattice.probs[s])):
                w.writerow([s, k, f"{p:.12f}", f"{v[0]:.9f}"] + [f"{t:.9f}" for t in v[1:]]
                           + [""] * (width + 1 - len(v)))
