"""Stage, horizon and extensive-form LPs for the route, and the closed-form handling phase.

Temperatures inside every LP are shifted to degrees Celsius for conditioning;
all public inputs and outputs are in kelvin.  Costs are in K*min.

Within one phase all pallets of a product class share the same exchange
coefficients, so a pallet's temperature is ``R_l * p_j0 + q_l``: its own start
temperature decays by a common factor ``R_l`` and ``q_l`` is the common
response to the air trajectory (``q_0 = 0``).  The LP carries one ``q`` chain
per class instead of one temperature chain per pallet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instance import DRIVING, HANDLING, RouteInstance, handling_slot_durations
from .lp import EQ, GE, INF, LE, OPTIMAL, LinearProgram, LpBuilder, LpError, solve
from .power import KELVIN, PowerModel

DEFAULT_PENALTY = 10000.0  # K*min per liter of budget overrun


@dataclass(frozen=True)
class StageLayout:
    s: int
    handle_ids: tuple[str, ...]  # incoming state pallets, on board while handling
    new_ids: tuple[str, ...]     # loaded at the start of the stage
    drive_ids: tuple[str, ...]   # on board while driving
    out_ids: tuple[str, ...]     # carried into the next stage
    L: int                       # handling slots (0 for stage 1)
    T_ext_h: float
    ext: np.ndarray              # driving-slot external temperatures
    planes: np.ndarray           # (D, K, 3) max-affine planes per driving slot

    @property
    def D(self) -> int:
        return len(self.ext)

    @property
    def old_positions(self) -> np.ndarray:
        """Positions of handled pallets inside the driving-cargo vector."""
        pos = {p: k for k, p in enumerate(self.drive_ids)}
        return np.array([pos[p] for p in self.handle_ids], dtype=int)

    @property
    def new_positions(self) -> np.ndarray:
        pos = {p: k for k, p in enumerate(self.drive_ids)}
        return np.array([pos[p] for p in self.new_ids], dtype=int)

    @property
    def out_positions(self) -> np.ndarray:
        pos = {p: k for k, p in enumerate(self.drive_ids)}
        return np.array([pos[p] for p in self.out_ids], dtype=int)


class RouteModel:
    """Route data arranged for optimization: per-stage layouts and per-pallet constants."""

    def __init__(self, instance: RouteInstance, power: PowerModel, budget: float | None = None,
                 penalty: float = DEFAULT_PENALTY):
        self.instance = instance
        self.power = power
        self.budget = budget
        self.penalty = penalty
        th = instance.thermo
        self.C_air = th.air_heat_capacity
        self.alpha_open = th.alpha_open
        self.alpha_closed = th.alpha_closed
        self.gamma = th.evaporator_transmittance
        self.Gamma = th.refrigerant_floor
        self.W_cap = th.unit_capacity
        self.sigma = th.fuel_conversion
        self.S = instance.n_stages
        self.class_ids = [c.id for c in instance.classes]
        self.cls_index = {p.id: self.class_ids.index(p.cls) for p in instance.pallets}
        self.beta_c = np.array([c.beta for c in instance.classes])
        self.Cp_c = np.array([c.C_p for c in instance.classes])
        self.lo = {p.id: instance.pallet_class(p).T_lower for p in instance.pallets}
        self.hi = {p.id: instance.pallet_class(p).T_upper for p in instance.pallets}
        self.layouts: dict[int, StageLayout] = {}
        K = max(m.K for m in power.buckets.values())
        for s in range(1, self.S + 1):
            drive = instance.stage_cargo(s, DRIVING)
            handle = instance.stage_cargo(s, HANDLING) if s >= 2 else ()
            new = instance.loaded_at(s - 1) if s >= 2 else ()
            out = tuple(p for p in drive if instance.pallet_by_id[p].destination_stop > s)
            ext = np.asarray(instance.stops[s - 1].ext_temps, dtype=float)
            planes = np.empty((len(ext), K, 3))
            for k, T in enumerate(ext):
                P = power.planes_for(T)
                planes[k] = np.vstack([P, np.repeat(P[-1:], K - len(P), axis=0)])
            self.layouts[s] = StageLayout(s, handle, new, drive, out, instance.grid.handling_slots[s - 1],
                                          instance.ext_temp_handling(s) if s >= 2 else float("nan"), ext, planes)

    @property
    def with_budget(self) -> bool:
        return self.budget is not None

    def initial_state(self) -> np.ndarray:
        """Driving start state of stage 1: air then depot pallets (kelvin)."""
        lay = self.layouts[1]
        temps = [self.instance.pallet_by_id[p].initial_temp for p in lay.drive_ids]
        return np.array([self.instance.initial_air_temp] + temps, dtype=float)

    def pallet_arrays(self, ids):
        ci = np.array([self.cls_index[p] for p in ids], dtype=int)
        lo = np.array([self.lo[p] for p in ids])
        hi = np.array([self.hi[p] for p in ids])
        return ci, lo, hi

    def state_size(self, s: int) -> int:
        """Length of the state after stage s (air, carried pallets, fuel if budgeted)."""
        return 1 + len(self.layouts[s].out_ids) + (1 if self.with_budget else 0)


# -- closed-form handling --------------------------------------------------------

@dataclass
class HandlingResult:
    z_air: float
    z_old: np.ndarray   # handled pallet temperatures after the doors close
    cost: float         # K*min
    signs: np.ndarray   # (L, n) violation subgradient signs per slot
    step: np.ndarray    # (n+2, n+2) one-slot affine map on [air, pallets, 1]
    dt: float           # slot length in seconds


def handling_step_matrix(model: RouteModel, s: int, O: float) -> np.ndarray:
    lay = model.layouts[s]
    n = len(lay.handle_ids)
    ci, _, _ = model.pallet_arrays(lay.handle_ids)
    beta = model.beta_c[ci]
    Cp = model.Cp_c[ci]
    dt = O / lay.L
    M = np.zeros((n + 2, n + 2))
    M[0, 0] = 1.0 - dt * (model.alpha_open + beta.sum()) / model.C_air
    M[0, 1:n + 1] = dt * beta / model.C_air
    M[0, n + 1] = dt * model.alpha_open * lay.T_ext_h / model.C_air
    k = dt * beta / Cp
    M[1:n + 1, 0] = k
    M[np.arange(1, n + 1), np.arange(1, n + 1)] = 1.0 - k
    M[n + 1, n + 1] = 1.0
    return M


def handling(model: RouteModel, s: int, x_air: float, x_old: np.ndarray, O: float) -> HandlingResult:
    """Propagate the uncontrolled door-open phase of stage s from the arrival state."""
    lay = model.layouts[s]
    n = len(lay.handle_ids)
    _, lo, hi = model.pallet_arrays(lay.handle_ids)
    M = handling_step_matrix(model, s, O)
    dt = O / lay.L
    y = np.concatenate([[x_air], np.asarray(x_old, dtype=float), [1.0]])
    cost = 0.0
    signs = np.zeros((lay.L, n))
    for l in range(lay.L):
        p = y[1:n + 1]
        up = p > hi
        dn = p < lo
        cost += float(np.sum(np.where(up, p - hi, 0.0) + np.where(dn, lo - p, 0.0)))
        signs[l] = up.astype(float) - dn.astype(float)
        y = M @ y
    return HandlingResult(float(y[0]), y[1:n + 1].copy(), cost * dt / 60.0, signs, M, dt)


def handling_adjoint(res: HandlingResult, lam_air: float, lam_old: np.ndarray) -> np.ndarray:
    """Gradient of (handling cost + downstream value) w.r.t. the arrival state [air, pallets].

    ``lam_air``/``lam_old`` are derivatives of the downstream value with respect
    to the post-handling air and pallet temperatures.
    """
    n = len(lam_old)
    lam = np.concatenate([[lam_air], np.asarray(lam_old, dtype=float), [0.0]])
    MT = res.step.T
    w = res.dt / 60.0
    for l in range(len(res.signs) - 1, -1, -1):
        lam = MT @ lam
        lam[1:n + 1] += w * res.signs[l]
    return lam[: n + 1]


def assemble_z0(model: RouteModel, s: int, air: float, old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Driving start state [air, drive_ids temperatures] from handled and newly loaded pallets."""
    lay = model.layouts[s]
    z = np.empty(1 + len(lay.drive_ids))
    z[0] = air
    z[1 + lay.old_positions] = old
    z[1 + lay.new_positions] = new
    return z


# -- LP phase blocks -------------------------------------------------------------

SCREEN_TOL = 1e-7


@dataclass
class Envelope:
    """Componentwise bounds on every feasible trajectory of a phase (kelvin).

    Arrays cover slot starts 0..L; ``pL``/``pU`` are (n, L+1).
    """

    aL: np.ndarray
    aU: np.ndarray
    pL: np.ndarray
    pU: np.ndarray


def envelope(model: RouteModel, *, dts, T_ext, alpha: float, gamma: float, a0: tuple[float, float],
             p0L: np.ndarray, p0U: np.ndarray, ids, control: bool) -> Envelope:
    """Bound all trajectories of a phase by two simulated extremes.

    With stable steps the update is a nonnegative combination of its inputs,
    so the dynamics are order preserving.  The unit switched off gives the
    warmest trajectory and the cooling fluid pinned at the floor the coldest.
    """
    dts = np.asarray(dts, dtype=float)
    T_ext = np.broadcast_to(np.asarray(T_ext, dtype=float), dts.shape)
    L = len(dts)
    ci, _, _ = model.pallet_arrays(ids)
    beta = model.beta_c[ci]
    Cp = model.Cp_c[ci]
    B = beta.sum()
    g_lo = gamma if control else 0.0
    aL = np.empty(L + 1)
    aU = np.empty(L + 1)
    pL = np.empty((len(ids), L + 1))
    pU = np.empty((len(ids), L + 1))
    aL[0], aU[0] = a0
    pL[:, 0] = p0L
    pU[:, 0] = p0U
    for l in range(L):
        dt = dts[l]
        k = dt / model.C_air
        aU[l + 1] = aU[l] + k * (alpha * (T_ext[l] - aU[l]) + beta @ pU[:, l] - B * aU[l])
        aL[l + 1] = aL[l] + k * (alpha * (T_ext[l] - aL[l]) + beta @ pL[:, l] - B * aL[l]
                                 + g_lo * (model.Gamma - aL[l]))
        r = dt * beta / Cp
        pU[:, l + 1] = pU[:, l] + r * (aU[l] - pU[:, l])
        pL[:, l + 1] = pL[:, l] + r * (aL[l] - pL[:, l])
    return Envelope(aL, aU, pL, pU)


def phase_end_bounds(env: Envelope):
    return (env.aL[-1], env.aU[-1]), env.pL[:, -1], env.pU[:, -1]


@dataclass
class PhaseVars:
    a: np.ndarray          # air, L+1 (a[0] is the phase start variable)
    q: np.ndarray          # (C, L) common responses for slots 1..L
    nu: np.ndarray         # violation variables actually present
    end: np.ndarray        # (n,) pallet temperatures at phase end
    u: np.ndarray | None = None
    W: np.ndarray | None = None
    R: np.ndarray | None = None


def add_phase(b: LpBuilder, model: RouteModel, *, dts, T_ext, alpha: float, gamma: float, air0: int,
              p0: np.ndarray, ids, weight: float = 1.0, planes: np.ndarray | None = None,
              with_W: bool = False, tag: str = "", env: Envelope | None = None) -> PhaseVars:
    """Append one phase (handling when ``planes`` is None, driving otherwise).

    With an envelope, violation rows that no feasible trajectory can activate
    and capacity rows that cannot bind are left out.
    """
    dts = np.asarray(dts, dtype=float)
    T_ext = np.asarray(T_ext, dtype=float) - KELVIN
    L = len(dts)
    n = len(ids)
    C = len(model.beta_c)
    ci, lo, hi = model.pallet_arrays(ids)
    lo = lo - KELVIN
    hi = hi - KELVIN
    p0 = np.asarray(p0, dtype=np.int64)
    n_c = np.bincount(ci, minlength=C).astype(float)
    beta, Cp = model.beta_c, model.Cp_c
    Bsum = float(beta @ n_c)
    rho = 1.0 - np.outer(beta / Cp, dts)                  # (C, L)
    R = np.ones((C, L + 1))
    R[:, 1:] = np.cumprod(rho, axis=1)
    Cair = model.C_air
    control = planes is not None

    a = np.concatenate([[air0], b.add_vars(L, -INF, INF, 0.0, f"{tag}air")])
    q = b.add_vars(C * L, -INF, INF, 0.0, f"{tag}q").reshape(C, L)   # q[:, l-1] is slot l
    Pv = b.add_vars(C, -INF, INF, 0.0, f"{tag}P")
    if env is None:
        need_hi = np.ones((n, L), dtype=bool)
        need_lo = need_hi
    else:
        need_hi = env.pU[:, :L] > (hi + KELVIN)[:, None] - SCREEN_TOL
        need_lo = env.pL[:, :L] < (lo + KELVIN)[:, None] + SCREEN_TOL
    jn, ln = np.nonzero(need_hi | need_lo)
    nu_idx = np.full((n, L), -1, dtype=np.int64)
    nu = b.add_vars(len(jn), 0.0, INF, weight * dts[ln] / 60.0, f"{tag}nu")
    nu_idx[jn, ln] = nu
    end = b.add_vars(n, -INF, INF, 0.0, f"{tag}end")
    u = W = None
    if control:
        u = b.add_vars(L, model.Gamma - KELVIN, INF, 0.0, f"{tag}Tcu")
        if with_W:
            W = b.add_vars(L, 0.0, model.W_cap, 0.0, f"{tag}W")

    def qcol(c, l):  # variable of q_{c,l} for l >= 1
        return q[c, l - 1]

    # class sums of start temperatures
    if n:
        b.add_rows(C, np.concatenate([np.arange(C), ci]), np.concatenate([Pv, p0]),
                   np.concatenate([np.ones(C), -np.ones(n)]), EQ, 0.0, f"{tag}Psum")
    else:
        b.add_rows(C, np.arange(C), Pv, np.ones(C), EQ, 0.0, f"{tag}Psum")

    # air dynamics
    rr, cc, vv = [np.arange(L), np.arange(L)], [a[1:], a[:-1]], [np.ones(L), -(1.0 - dts * (alpha + Bsum + gamma) / Cair)]
    for c in range(C):
        if n_c[c] == 0:
            continue
        ls = np.arange(1, L)
        rr.append(ls)
        cc.append(q[c, ls - 1])
        vv.append(-dts[ls] * beta[c] * n_c[c] / Cair)
        rr.append(np.arange(L))
        cc.append(np.full(L, Pv[c]))
        vv.append(-dts * beta[c] * R[c, :L] / Cair)
    if control and gamma:
        rr.append(np.arange(L))
        cc.append(u)
        vv.append(-dts * gamma / Cair)
    b.add_rows(L, np.concatenate(rr), np.concatenate(cc), np.concatenate(vv), EQ, dts * alpha * T_ext / Cair,
               f"{tag}airdyn")

    # common response recursions q_{l+1} = rho_l q_l + (1 - rho_l) a_l
    for c in range(C):
        ls = np.arange(L)
        rows = [ls, ls[1:], ls]
        cols = [q[c, :], q[c, :-1], a[:-1]]
        vals = [np.ones(L), -rho[c, 1:], -(1.0 - rho[c])]
        b.add_rows(L, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), EQ, 0.0, f"{tag}q{c}")

    if n:
        # violation epigraphs
        for sign, need, rhs_of, nm in ((1.0, need_hi, -hi, "nuhi"), (-1.0, need_lo, lo, "nulo")):
            jj, ll = np.nonzero(need)
            nr = len(jj)
            if not nr:
                continue
            rloc = np.arange(nr)
            has_q = ll >= 1
            qv = q[ci[jj[has_q]], ll[has_q] - 1]
            rows = np.concatenate([rloc, rloc, rloc[has_q]])
            cols = np.concatenate([nu_idx[jj, ll], p0[jj], qv])
            vals = np.concatenate([np.ones(nr), -sign * R[ci[jj], ll], np.full(int(has_q.sum()), -sign)])
            b.add_rows(nr, rows, cols, vals, GE, rhs_of[jj], f"{tag}{nm}")
        # end-of-phase temperatures
        rloc = np.arange(n)
        b.add_rows(n, np.concatenate([rloc, rloc, rloc]), np.concatenate([end, p0, q[ci, L - 1]]),
                   np.concatenate([np.ones(n), -R[ci, L], -np.ones(n)]), EQ, 0.0, f"{tag}endT")

    if control:
        ls = np.arange(L)
        b.add_rows(L, np.concatenate([ls, ls]), np.concatenate([u, a[:-1]]),
                   np.concatenate([np.ones(L), -np.ones(L)]), LE, 0.0, f"{tag}noheat")
        K = planes.shape[1]
        phi0 = planes[:, :, 0] + KELVIN * (planes[:, :, 1] + planes[:, :, 2])  # (L, K) shifted intercepts
        rloc = np.arange(L * K)
        lk = np.repeat(ls, K)
        p1 = planes[:, :, 1].ravel()
        p2 = planes[:, :, 2].ravel()
        if with_W:
            b.add_rows(L * K, np.concatenate([rloc, rloc, rloc]), np.concatenate([W[lk], u[lk], a[:-1][lk]]),
                       np.concatenate([np.ones(L * K), -p1, -p2]), GE, phi0.ravel(), f"{tag}plane")
        else:
            keep = np.ones(L * K, dtype=bool)
            if env is not None:
                # plane maximum over the vertices of {floor <= u <= a, aL <= a <= aU}
                aL, aU = env.aL[:L][lk] - KELVIN, env.aU[:L][lk] - KELVIN
                G = model.Gamma - KELVIN
                top = np.max([p1 * G + p2 * aL, p1 * G + p2 * aU, (p1 + p2) * aL, (p1 + p2) * aU], axis=0)
                keep = top + phi0.ravel() > model.W_cap - SCREEN_TOL * model.W_cap
            nk = int(keep.sum())
            if nk:
                rloc = np.arange(nk)
                b.add_rows(nk, np.concatenate([rloc, rloc]), np.concatenate([u[lk[keep]], a[:-1][lk[keep]]]),
                           np.concatenate([p1[keep], p2[keep]]), LE, model.W_cap - phi0.ravel()[keep], f"{tag}cap")
    return PhaseVars(a, q, nu, end, u, W, R)


# -- cuts --------------------------------------------------------------------------

@dataclass
class Cut:
    """Affine lower bound  V_s(x) >= intercept + gradient'x  (x in kelvin / liters)."""

    stage: int
    intercept: float
    gradient: np.ndarray
    iteration: int = 0

    def value(self, x: np.ndarray) -> float:
        return float(self.intercept + self.gradient @ x)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "intercept": self.intercept, "gradient": self.gradient.tolist(),
                "iteration": self.iteration}

    @classmethod
    def from_dict(cls, d: dict) -> Cut:
        return cls(int(d["stage"]), float(d["intercept"]), np.asarray(d["gradient"], dtype=float),
                   int(d.get("iteration", 0)))


def _shift_mask(model: RouteModel, s: int) -> np.ndarray:
    m = np.ones(model.state_size(s))
    if model.with_budget:
        m[-1] = 0.0
    return m


def cut_row(model: RouteModel, cut: Cut, theta: int, state_vars: np.ndarray):
    """Row  theta - g'x' >= intercept + 273.15*sum(g_temps)  in shifted coordinates."""
    g = cut.gradient
    rhs = cut.intercept + KELVIN * float(g @ _shift_mask(model, cut.stage))
    cols = np.concatenate([[theta], state_vars])
    vals = np.concatenate([[1.0], -g])
    return cols, vals, GE, rhs


# -- driving-stage LP (shared by all nodes of a stage) ------------------------------

@dataclass
class StageSolution:
    value: float            # LP optimum: driving cost + future value (+ overrun penalty)
    driving_cost: float     # K*min
    theta: float
    grad_z: np.ndarray      # d value / d z0  (air, drive_ids)
    grad_F: float
    Tcu: np.ndarray         # kelvin, per driving slot
    W: np.ndarray | None
    air: np.ndarray         # kelvin, slot starts plus arrival
    x_out: np.ndarray       # state after the stage (kelvin / liters)
    overrun: float = 0.0


class DrivingStageLP:
    """Driving phase of stage s from a known start state, with the stage's cuts.

    The LP is rebuilt for every start state so that the envelope screening
    can drop violation and capacity rows that the state makes redundant.  The
    screened LP is a relaxation that agrees with the full one at the given
    state, so its copy-row duals still yield valid cuts.
    """

    def __init__(self, model: RouteModel, s: int, screen: bool = True):
        self.model = model
        self.s = s
        self.screen = screen
        self.cuts: list[Cut] = []
        self.last_lp: LinearProgram | None = None

    @property
    def n_cuts(self) -> int:
        return len(self.cuts)

    def add_cuts(self, cuts: list[Cut]) -> None:
        if self.s == self.model.S:
            raise LpError("the last stage has no future value")
        self.cuts.extend(cuts)

    def build(self, z0: np.ndarray, F: float = 0.0):
        model, s = self.model, self.s
        lay = model.layouts[s]
        z0 = np.asarray(z0, dtype=float)
        b = LpBuilder()
        n = len(lay.drive_ids)
        z = b.add_vars(1 + n, -INF, INF, 0.0, "z")
        copy_rows = b.add_rows(1 + n, np.arange(1 + n), z, np.ones(1 + n), EQ, z0 - KELVIN, "copy")
        dts = np.full(lay.D, model.instance.delta_d)
        env = None
        if self.screen:
            env = envelope(model, dts=dts, T_ext=lay.ext, alpha=model.alpha_closed, gamma=model.gamma,
                           a0=(z0[0], z0[0]), p0L=z0[1:], p0U=z0[1:], ids=lay.drive_ids, control=True)
        ph = add_phase(b, model, dts=dts, T_ext=lay.ext, alpha=model.alpha_closed, gamma=model.gamma,
                       air0=z[0], p0=z[1:], ids=lay.drive_ids, planes=lay.planes, with_W=model.with_budget,
                       tag="d", env=env)
        F_row = F_out = mu = theta = None
        if model.with_budget:
            F_in = b.add_var(-INF, INF, 0.0, "F_in")
            F_row = b.add_row([F_in], [1.0], EQ, F, "copyF")
            F_out = b.add_var(-INF, INF, 0.0, "F_out")
            b.add_row(np.concatenate([[F_out, F_in], ph.W]),
                      np.concatenate([[1.0, -1.0], -np.full(lay.D, model.instance.delta_d / model.sigma)]),
                      EQ, 0.0, "fuel")
            if s == model.S:
                mu = b.add_var(0.0, INF, model.penalty, "mu")
                b.add_row([F_out, mu], [1.0, -1.0], LE, model.budget, "budget")
        state_vars = np.concatenate([[ph.a[-1]], ph.end[lay.out_positions]]
                                    + ([[F_out]] if model.with_budget else [])).astype(np.int64)
        if s < model.S:
            theta = b.add_var(0.0, INF, 1.0, "theta")
            for c in self.cuts:
                cols, vals, sense, r = cut_row(model, c, theta, state_vars)
                b.add_row(cols, vals, sense, r, "cut")
        lp = b.build()
        return lp, dict(copy_rows=copy_rows, F_row=F_row, phase=ph, theta=theta, mu=mu, state_vars=state_vars)

    def solve(self, z0: np.ndarray, F: float = 0.0) -> StageSolution:
        lp, h = self.build(z0, F)
        self.last_lp = lp
        sol = solve(lp)
        if sol.status != OPTIMAL:
            raise LpError(f"stage {self.s} LP {sol.status}")
        x, y = sol.x, sol.duals
        ph = h["phase"]
        theta = float(x[h["theta"]]) if h["theta"] is not None else 0.0
        mu = float(x[h["mu"]]) if h["mu"] is not None else 0.0
        drive = float(lp.c[ph.nu] @ x[ph.nu])
        xo = x[h["state_vars"]].copy()
        xo[: len(xo) - (1 if self.model.with_budget else 0)] += KELVIN
        return StageSolution(
            value=sol.objective, driving_cost=drive, theta=theta,
            grad_z=y[h["copy_rows"]].copy(), grad_F=float(y[h["F_row"]]) if h["F_row"] is not None else 0.0,
            Tcu=x[ph.u] + KELVIN, W=x[ph.W].copy() if ph.W is not None else None,
            air=x[ph.a] + KELVIN, x_out=xo, overrun=mu)


# -- full stage LP with in-LP handling --------------------------------------------

@dataclass
class StageLP:
    lp: LinearProgram
    copy_rows: np.ndarray   # incoming state copy rows (air, handle_ids[, F])
    theta: int | None
    phase: PhaseVars
    state_vars: np.ndarray


def build_stage_lp(model: RouteModel, s: int, xi: np.ndarray | None, cuts: list[Cut],
                   incoming: np.ndarray) -> StageLP:
    """Stage s as one LP: handling (door time xi[0]), loading (temperatures xi[1:]), driving.

    ``incoming`` is the state after stage s-1 (for s = 1, the driving start
    state).  The optimum equals the stage cost plus the cut model of the future
    value, and the duals of the copy rows are its gradient in the incoming state.
    """
    lay = model.layouts[s]
    b = LpBuilder()
    budget = model.with_budget
    n_in = len(lay.handle_ids) if s >= 2 else len(lay.drive_ids)
    x = b.add_vars(1 + n_in, -INF, INF, 0.0, "x")
    inc = np.asarray(incoming, dtype=float)
    rhs = inc[: 1 + n_in] - KELVIN
    copy_rows = list(b.add_rows(1 + n_in, np.arange(1 + n_in), x, np.ones(1 + n_in), EQ, rhs, "copy"))
    F_in = None
    if budget:
        F_in = b.add_var(-INF, INF, 0.0, "F_in")
        copy_rows.append(b.add_row([F_in], [1.0], EQ, float(inc[-1]), "copyF"))
    if s >= 2:
        O = float(xi[0])
        hp = add_phase(b, model, dts=handling_slot_durations(O, lay.L), T_ext=np.full(lay.L, lay.T_ext_h),
                       alpha=model.alpha_open, gamma=0.0, air0=x[0], p0=x[1:], ids=lay.handle_ids, tag="h")
        newv = b.add_vars(len(lay.new_ids), -INF, INF, 0.0, "new")
        if len(newv):
            b.add_rows(len(newv), np.arange(len(newv)), newv, np.ones(len(newv)), EQ,
                       np.asarray(xi[1:], dtype=float) - KELVIN, "load")
        p0 = np.empty(len(lay.drive_ids), dtype=np.int64)
        p0[lay.old_positions] = hp.end
        p0[lay.new_positions] = newv
        air0 = hp.a[-1]
    else:
        p0 = x[1:]
        air0 = x[0]
    ph = add_phase(b, model, dts=np.full(lay.D, model.instance.delta_d), T_ext=lay.ext, alpha=model.alpha_closed,
                   gamma=model.gamma, air0=air0, p0=p0, ids=lay.drive_ids, planes=lay.planes, with_W=budget,
                   tag="d")
    F_out = None
    if budget:
        F_out = b.add_var(-INF, INF, 0.0, "F_out")
        b.add_row(np.concatenate([[F_out, F_in], ph.W]),
                  np.concatenate([[1.0, -1.0], -np.full(lay.D, model.instance.delta_d / model.sigma)]), EQ, 0.0, "fuel")
        if s == model.S:
            mu = b.add_var(0.0, INF, model.penalty, "mu")
            b.add_row([F_out, mu], [1.0, -1.0], LE, model.budget, "budget")
    state_vars = np.concatenate([[ph.a[-1]], ph.end[lay.out_positions]] + ([[F_out]] if budget else [])).astype(np.int64)
    theta = None
    if s < model.S:
        theta = b.add_var(0.0, INF, 1.0, "theta")
        for c in cuts:
            cols, vals, sense, r = cut_row(model, c, theta, state_vars)
            b.add_row(cols, vals, sense, r, f"cut{c.iteration}")
    return StageLP(b.build(names=True), np.asarray(copy_rows), theta, ph, state_vars)


# -- multi-stage deterministic horizon ---------------------------------------------

@dataclass
class HorizonLP:
    lp: LinearProgram
    s0: int
    copy_rows: np.ndarray             # driving start state of stage s0 (and F)
    load_rows: dict[int, np.ndarray]  # per later stage: rows fixing loaded temperatures
    phases: dict[int, PhaseVars]      # driving phase per stage
    handling: dict[int, PhaseVars]
    mu: int | None
    F_row: int | None


def build_horizon_lp(model: RouteModel, s0: int, z0: np.ndarray, xis: dict[int, np.ndarray], F: float = 0.0,
                     weight: float = 1.0, screen: bool = True) -> HorizonLP:
    """Deterministic LP from the driving start of stage s0 to the last stop.

    ``xis[s]`` for s > s0 gives (door time, loaded temperatures) assumed for
    stage s.  Used by the rolling lookahead (expected values) and the
    clairvoyant bound (realized values).
    """
    b = LpBuilder()
    lay = model.layouts[s0]
    budget = model.with_budget
    z0 = np.asarray(z0, dtype=float)
    n = len(lay.drive_ids)
    z = b.add_vars(1 + n, -INF, INF, 0.0, "z")
    copy_rows = b.add_rows(1 + n, np.arange(1 + n), z, np.ones(1 + n), EQ, z0 - KELVIN, "copy")
    F_prev = F_row = None
    if budget:
        F_prev = b.add_var(-INF, INF, 0.0, "F_in")
        F_row = b.add_row([F_prev], [1.0], EQ, F, "copyF")
    phases, hphases, load_rows = {}, {}, {}
    air0, p0 = z[0], z[1:]
    a_b, pL, pU = (z0[0], z0[0]), z0[1:], z0[1:]
    mu = None
    for s in range(s0, model.S + 1):
        lay = model.layouts[s]
        if s > s0:
            prev = model.layouts[s - 1]
            pos = {p: k for k, p in enumerate(prev.drive_ids)}
            sel = np.array([pos[p] for p in lay.handle_ids], dtype=int)
            old = phases[s - 1].end[sel]
            O = float(xis[s][0])
            dts = handling_slot_durations(O, lay.L)
            env = None
            if screen:
                env = envelope(model, dts=dts, T_ext=lay.T_ext_h, alpha=model.alpha_open, gamma=0.0, a0=a_b,
                               p0L=pL[sel], p0U=pU[sel], ids=lay.handle_ids, control=False)
                a_b, hL, hU = phase_end_bounds(env)
            hp = add_phase(b, model, dts=dts, T_ext=np.full(lay.L, lay.T_ext_h), alpha=model.alpha_open, gamma=0.0,
                           air0=phases[s - 1].a[-1], p0=old, ids=lay.handle_ids, weight=weight, tag=f"h{s}", env=env)
            hphases[s] = hp
            newT = np.asarray(xis[s][1:], dtype=float)
            newv = b.add_vars(len(lay.new_ids), -INF, INF, 0.0, f"new{s}")
            load_rows[s] = b.add_rows(len(newv), np.arange(len(newv)), newv, np.ones(len(newv)), EQ,
                                      newT - KELVIN, f"load{s}")
            p0 = np.empty(len(lay.drive_ids), dtype=np.int64)
            p0[lay.old_positions] = hp.end
            p0[lay.new_positions] = newv
            air0 = hp.a[-1]
            if screen:
                pL = np.empty(len(lay.drive_ids))
                pU = np.empty(len(lay.drive_ids))
                pL[lay.old_positions], pU[lay.old_positions] = hL, hU
                pL[lay.new_positions], pU[lay.new_positions] = newT, newT
        dts = np.full(lay.D, model.instance.delta_d)
        env = None
        if screen:
            env = envelope(model, dts=dts, T_ext=lay.ext, alpha=model.alpha_closed, gamma=model.gamma, a0=a_b,
                           p0L=pL, p0U=pU, ids=lay.drive_ids, control=True)
            a_b, pL, pU = phase_end_bounds(env)
        ph = add_phase(b, model, dts=dts, T_ext=lay.ext, alpha=model.alpha_closed, gamma=model.gamma, air0=air0,
                       p0=p0, ids=lay.drive_ids, weight=weight, planes=lay.planes, with_W=budget, tag=f"d{s}",
                       env=env)
        phases[s] = ph
        if budget:
            F_out = b.add_var(-INF, INF, 0.0, f"F{s}")
            b.add_row(np.concatenate([[F_out, F_prev], ph.W]),
                      np.concatenate([[1.0, -1.0], -np.full(lay.D, model.instance.delta_d / model.sigma)]),
                      EQ, 0.0, f"fuel{s}")
            F_prev = F_out
    if budget:
        mu = b.add_var(0.0, INF, weight * model.penalty, "mu")
        b.add_row([F_prev, mu], [1.0, -1.0], LE, model.budget, "budget")
    return HorizonLP(b.build(), s0, np.asarray(list(copy_rows)), load_rows, phases, hphases, mu, F_row)


def horizon_plan(model: RouteModel, h: HorizonLP, x: np.ndarray, s: int):
    """Cooling-fluid temperatures, power and air temperatures of stage s from a horizon solution."""
    ph = h.phases[s]
    return (x[ph.u] + KELVIN, x[ph.W].copy() if ph.W is not None else None, x[ph.a] + KELVIN)


# -- extensive form over a stage-wise independent lattice ----------------------------

@dataclass
class ExtensiveForm:
    lp: LinearProgram
    first: PhaseVars


def build_extensive_form(model: RouteModel, lattice) -> ExtensiveForm:
    """All lattice paths in one LP with non-anticipativity through the tree structure.

    Meant for small trees (the number of blocks is the number of tree nodes).
    """
    b = LpBuilder()
    budget = model.with_budget
    lay1 = model.layouts[1]
    z0 = model.initial_state()
    n = len(lay1.drive_ids)
    z = b.add_vars(1 + n, -INF, INF, 0.0, "z")
    b.add_rows(1 + n, np.arange(1 + n), z, np.ones(1 + n), EQ, z0 - KELVIN, "init")
    F0 = None
    if budget:
        F0 = b.add_var(0.0, 0.0, 0.0, "F0")
    first = add_phase(b, model, dts=np.full(lay1.D, model.instance.delta_d), T_ext=lay1.ext, alpha=model.alpha_closed,
                      gamma=model.gamma, air0=z[0], p0=z[1:], ids=lay1.drive_ids, planes=lay1.planes,
                      with_W=budget, tag="d1")

    def fuel(ph, F_prev, D, tag):
        F_out = b.add_var(-INF, INF, 0.0, tag)
        b.add_row(np.concatenate([[F_out, F_prev], ph.W]),
                  np.concatenate([[1.0, -1.0], -np.full(D, model.instance.delta_d / model.sigma)]), EQ, 0.0, tag)
        return F_out

    F1 = fuel(first, F0, lay1.D, "F1") if budget else None

    def expand(s, parent: PhaseVars, F_parent, prob, path):
        lay = model.layouts[s]
        prev = model.layouts[s - 1]
        pos = {p: k for k, p in enumerate(prev.drive_ids)}
        old = np.array([parent.end[pos[p]] for p in lay.handle_ids], dtype=np.int64)
        for k, (xi, pk) in enumerate(zip(lattice.nodes[s], lattice.probs[s])):
            w = prob * pk
            tag = f"{path}.{k}"
            hp = add_phase(b, model, dts=handling_slot_durations(float(xi[0]), lay.L), T_ext=np.full(lay.L, lay.T_ext_h),
                           alpha=model.alpha_open, gamma=0.0, air0=parent.a[-1], p0=old, ids=lay.handle_ids,
                           weight=w, tag=f"h{tag}")
            newv = b.add_vars(len(lay.new_ids), -INF, INF, 0.0, f"new{tag}")
            if len(newv):
                b.add_rows(len(newv), np.arange(len(newv)), newv, np.ones(len(newv)), EQ, xi[1:] - KELVIN, f"load{tag}")
            p0 = np.empty(len(lay.drive_ids), dtype=np.int64)
            p0[lay.old_positions] = hp.end
            p0[lay.new_positions] = newv
            ph = add_phase(b, model, dts=np.full(lay.D, model.instance.delta_d), T_ext=lay.ext,
                           alpha=model.alpha_closed, gamma=model.gamma, air0=hp.a[-1], p0=p0, ids=lay.drive_ids,
                           weight=w, planes=lay.planes, with_W=budget, tag=f"d{tag}")
            F_out = fuel(ph, F_parent, lay.D, f"F{tag}") if budget else None
            if s < model.S:
                expand(s + 1, ph, F_out, w, tag)
            elif budget:
                mu = b.add_var(0.0, INF, w * model.penalty, f"mu{tag}")
                b.add_row([F_out, mu], [1.0, -1.0], LE, model.budget, f"budget{tag}")

    if model.S >= 2:
        expand(2, first, F1, 1.0, "n")
    elif budget:
        mu = b.add_var(0.0, INF, model.penalty, "mu")
        b.add_row([F1, mu], [1.0, -1.0], LE, model.budget, "budget")
    return ExtensiveForm(b.build(), first)
