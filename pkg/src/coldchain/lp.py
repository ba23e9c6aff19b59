"""Linear programs, solutions and solver backends.

Sign convention for duals: ``duals[i]`` is the derivative of the optimal
objective with respect to the right-hand side of row ``i`` (minimization),
so a binding ``>=`` row has a non-negative dual and a binding ``<=`` row a
non-positive one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import highspy
import numpy as np
import scipy.sparse as sp

INF = float("inf")
LE, EQ, GE = "<", "=", ">"

FEAS_TOL = 1e-7
OPT_TOL = 1e-7

OPTIMAL, INFEASIBLE, UNBOUNDED, ERROR = "optimal", "infeasible", "unbounded", "error"


class LpError(RuntimeError):
    pass


@dataclass
class LinearProgram:
    """min c'x + offset  s.t.  rows (A x) {<=,=,>=} rhs,  lb <= x <= ub."""

    c: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    senses: np.ndarray
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    offset: float = 0.0
    col_names: list[str] | None = None
    row_names: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.vals = np.asarray(self.vals, dtype=float)
        self.senses = np.asarray(self.senses, dtype="<U1")
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        n, m = len(self.c), len(self.rhs)
        if not (len(self.lb) == len(self.ub) == n and len(self.senses) == m):
            raise ValueError("inconsistent dimensions")
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise ValueError("triplet arrays differ in length")
        if len(self.rows) and (self.rows.max() >= m or self.cols.max() >= n or self.rows.min() < 0 or self.cols.min() < 0):
            raise ValueError("triplet index out of range")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.vals)) and np.all(np.isfinite(self.rhs))):
            raise ValueError("non-finite coefficient")
        if not set(np.unique(self.senses)) <= {LE, EQ, GE}:
            raise ValueError("row senses must be '<', '=' or '>'")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound above upper bound")

    @property
    def n_cols(self) -> int:
        return len(self.c)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    def matrix(self, fmt: str = "csr"):
        return sp.coo_matrix((self.vals, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols)).asformat(fmt)

    def row_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.where(self.senses == LE, -INF, self.rhs)
        hi = np.where(self.senses == GE, INF, self.rhs)
        return lo, hi

    def with_rhs(self, rhs: np.ndarray) -> LinearProgram:
        return LinearProgram(self.c, self.rows, self.cols, self.vals, self.senses, np.asarray(rhs, dtype=float),
                             self.lb, self.ub, self.offset, self.col_names, self.row_names)


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    objective: float = float("nan")
    reduced_costs: np.ndarray | None = None
    basis: tuple | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class LpBuilder:
    """Incremental construction of a LinearProgram, with vectorized bulk methods."""

    def __init__(self):
        self._c: list[np.ndarray] = []
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._names: list[tuple[str, int]] = []
        self._r: list[np.ndarray] = []
        self._k: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self._sense: list[np.ndarray] = []
        self._rhs: list[np.ndarray] = []
        self._row_names: list[tuple[str, int]] = []
        self.n_cols = 0
        self.n_rows = 0
        self.offset = 0.0
        self._cost_updates: dict[int, float] = {}

    def add_vars(self, n: int, lb=0.0, ub=INF, cost=0.0, prefix: str = "x") -> np.ndarray:
        idx = np.arange(self.n_cols, self.n_cols + n)
        self._c.append(np.broadcast_to(np.asarray(cost, dtype=float), (n,)).copy())
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), (n,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), (n,)).copy())
        self._names.append((prefix, n))
        self.n_cols += n
        return idx

    def add_var(self, lb: float = 0.0, ub: float = INF, cost: float = 0.0, name: str = "") -> int:
        return int(self.add_vars(1, lb, ub, cost, name or "x")[0])

    def add_rows(self, n: int, rows, cols, vals, sense, rhs, prefix: str = "r") -> np.ndarray:
        """Add ``n`` rows; ``rows`` holds local row numbers 0..n-1 of each triplet."""
        idx = np.arange(self.n_rows, self.n_rows + n)
        rows = np.asarray(rows, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        keep = vals != 0
        self._r.append(rows[keep] + self.n_rows)
        self._k.append(np.asarray(cols, dtype=np.int64)[keep])
        self._v.append(vals[keep])
        self._sense.append(np.broadcast_to(np.asarray(sense, dtype="<U1"), (n,)).copy())
        self._rhs.append(np.broadcast_to(np.asarray(rhs, dtype=float), (n,)).copy())
        self._row_names.append((prefix, n))
        self.n_rows += n
        return idx

    def add_row(self, cols, vals, sense: str, rhs: float, name: str = "") -> int:
        cols = np.asarray(cols, dtype=np.int64)
        return int(self.add_rows(1, np.zeros(len(cols), dtype=np.int64), cols, vals, sense, rhs, name or "r")[0])

    def set_cost(self, j: int, cost: float) -> None:
        self._cost_updates[int(j)] = float(cost)

    @staticmethod
    def _expand(chunks: list[tuple[str, int]]) -> list[str]:
        out = []
        for prefix, n in chunks:
            out.extend([prefix] if n == 1 else [f"{prefix}_{k}" for k in range(n)])
        return out

    def build(self, names: bool = False) -> LinearProgram:
        cat = lambda xs, dt=float: np.concatenate(xs) if xs else np.zeros(0, dtype=dt)  # noqa: E731
        c = cat(self._c)
        for j, v in self._cost_updates.items():
            c[j] = v
        lp = LinearProgram(c, cat(self._r, np.int64), cat(self._k, np.int64), cat(self._v),
                           cat(self._sense, "<U1") if self._sense else np.zeros(0, dtype="<U1"),
                           cat(self._rhs), cat(self._lb), cat(self._ub), self.offset)
        if names:
            lp.col_names = self._expand(self._names)
            lp.row_names = self._expand(self._row_names)
        return lp


# -- HiGHS backend -------------------------------------------------------------

def _new_highs(threads: int = 1) -> highspy.Highs:
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("primal_feasibility_tolerance", FEAS_TOL)
    h.setOptionValue("dual_feasibility_tolerance", OPT_TOL)
    h.setOptionValue("threads", threads)
    h.setOptionValue("random_seed", 0)
    return h


def _to_highs(lp: LinearProgram) -> highspy.HighsLp:
    A = lp.matrix("csc")
    A.sort_indices()
    hl = highspy.HighsLp()
    hl.num_col_ = lp.n_cols
    hl.num_row_ = lp.n_rows
    hl.col_cost_ = lp.c
    hl.col_lower_ = lp.lb
    hl.col_upper_ = lp.ub
    lo, hi = lp.row_bounds()
    hl.row_lower_ = lo
    hl.row_upper_ = hi
    hl.offset_ = lp.offset
    hl.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    hl.a_matrix_.start_ = A.indptr.astype(np.int32)
    hl.a_matrix_.index_ = A.indices.astype(np.int32)
    hl.a_matrix_.value_ = A.data
    return hl


def _status(h: highspy.Highs) -> str:
    ms = h.getModelStatus()
    if ms == highspy.HighsModelStatus.kOptimal:
        return OPTIMAL
    if ms == highspy.HighsModelStatus.kInfeasible:
        return INFEASIBLE
    if ms in (highspy.HighsModelStatus.kUnbounded, highspy.HighsModelStatus.kUnboundedOrInfeasible):
        return UNBOUNDED
    return ERROR


def _collect(h: highspy.Highs, with_basis: bool = True) -> LpSolution:
    status = _status(h)
    if status != OPTIMAL:
        return LpSolution(status)
    sol = h.getSolution()
    basis = None
    if with_basis:
        b = h.getBasis()
        basis = (list(b.col_status), list(b.row_status))
    return LpSolution(OPTIMAL, np.array(sol.col_value), np.array(sol.row_dual), h.getInfo().objective_function_value,
                      np.array(sol.col_dual), basis, int(h.getInfo().simplex_iteration_count))


_FALLBACKS = (("presolve", "off"), ("simplex_strategy", 4), ("solver", "ipm"))


def _run(h: highspy.Highs, with_basis: bool = True) -> LpSolution:
    h.run()
    sol = _collect(h, with_basis)
    if sol.status != ERROR:
        return sol
    # dual simplex occasionally stops without a status on degenerate models;
    # retry cold with progressively different settings, then restore them
    for opt, val in _FALLBACKS:
        h.clearSolver()
        h.setOptionValue(opt, val)
        h.run()
        sol = _collect(h, with_basis)
        if sol.status != ERROR:
            break
    h.setOptionValue("presolve", "choose")
    h.setOptionValue("simplex_strategy", 1)
    h.setOptionValue("solver", "simplex")
    return sol


def _solve_highs(lp: LinearProgram, basis_hint=None) -> LpSolution:
    h = _new_highs()
    h.passModel(_to_highs(lp))
    if basis_hint is not None:
        try:
            cs, rs = basis_hint
            if len(cs) != lp.n_cols or len(rs) != lp.n_rows:
                raise ValueError
            b = highspy.HighsBasis()
            b.col_status = list(cs)
            b.row_status = list(rs)
            b.valid = True
            if h.setBasis(b) != highspy.HighsStatus.kOk:
                raise ValueError
        except (ValueError, TypeError):
            h.clearSolver()
    h.setOptionValue("solver", "simplex")
    return _run(h)


def solve(lp: LinearProgram, backend: str = "highs") -> LpSolution:
    """Solve an LP; infeasibility and unboundedness are reported in ``status``."""
    if backend == "highs":
        return _solve_highs(lp)
    if backend == "simplex":
        from .simplex import revised_simplex
        return revised_simplex(lp)
    raise ValueError(f"unknown backend {backend!r}")


def warm_solve(lp: LinearProgram, basis_hint, backend: str = "highs") -> LpSolution:
    """Solve starting from a previous basis; an unusable hint falls back to a cold start."""
    if backend == "highs":
        return _solve_highs(lp, basis_hint)
    if backend == "simplex":
        from .simplex import revised_simplex
        return revised_simplex(lp, basis_hint)
    raise ValueError(f"unknown backend {backend!r}")


def _fmt_terms(cols, vals, names) -> str:
    parts = []
    for j, v in zip(cols, vals):
        sign = "-" if v < 0 else "+"
        parts.append(f"{sign} {abs(v):.12g} {names[j]}")
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else s


def write_lp(lp: LinearProgram, path: str | Path) -> None:
    """Write the LP in CPLEX LP text format."""
    names = [n.replace(" ", "_") for n in (lp.col_names or [f"x{j}" for j in range(lp.n_cols)])]
    rnames = [n.replace(" ", "_") for n in (lp.row_names or [f"r{i}" for i in range(lp.n_rows)])]
    A = lp.matrix("csr")
    lines = ["\\ generated by coldchain", "Minimize"]
    nz = np.flatnonzero(lp.c)
    obj = _fmt_terms(nz, lp.c[nz], names) or f"0 {names[0]}"
    if lp.offset:
        obj += f" + {lp.offset:.12g} constant" if lp.offset > 0 else f" - {-lp.offset:.12g} constant"
    lines.append(f" obj: {obj}")
    lines.append("Subject To")
    op = {LE: "<=", EQ: "=", GE: ">="}
    for i in range(lp.n_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        terms = _fmt_terms(A.indices[lo:hi], A.data[lo:hi], names) or f"0 {names[0]}"
        lines.append(f" {rnames[i]}: {terms} {op[lp.senses[i]]} {lp.rhs[i]:.12g}")
    lines.append("Bounds")
    for j in range(lp.n_cols):
        lb, ub = lp.lb[j], lp.ub[j]
        if lb == -INF and ub == INF:
            lines.append(f" {names[j]} free")
        elif ub == INF:
            if lb != 0.0:
                lines.append(f" {names[j]} >= {lb:.12g}")
        else:
            lo = "-inf" if lb == -INF else f"{lb:.12g}"
            lines.append(f" {lo} <= {names[j]} <= {ub:.12g}")
    if lp.offset:
        lines.append(" constant = 1")
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")
