"""Reference revised simplex for small LPs.

The LP is brought to standard form (min c'x, Ax = b, b >= 0, x >= 0), phase I
drives artificial variables out, and phase II optimizes.  Pricing is Dantzig's
rule with a switch to Bland's rule after a run of degenerate pivots.  The
basis matrix is refactorized every iteration, which is fine at the sizes this
backend is meant for.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .lp import EQ, FEAS_TOL, GE, INF, LE, OPT_TOL, OPTIMAL, INFEASIBLE, UNBOUNDED, LinearProgram, LpSolution

PIVOT_TOL = 1e-9
DEGENERATE_RUN = 20


class _StandardForm:
    """Map between the user LP and min c'z, Az = b, z >= 0."""

    def __init__(self, lp: LinearProgram):
        n, m = lp.n_cols, lp.n_rows
        A = lp.matrix("array")
        cols = []  # per standard column: (orig var or -1, scale)
        shift = np.zeros(n)
        blocks = []
        cost = []
        extra_rows = []
        for j in range(n):
            lb, ub = lp.lb[j], lp.ub[j]
            if lb > -INF:
                shift[j] = lb
                blocks.append(A[:, j])
                cost.append(lp.c[j])
                cols.append((j, 1.0))
                if ub < INF:
                    extra_rows.append((len(cols) - 1, ub - lb))
            elif ub < INF:
                shift[j] = ub
                blocks.append(-A[:, j])
                cost.append(-lp.c[j])
                cols.append((j, -1.0))
            else:
                blocks.append(A[:, j])
                cost.append(lp.c[j])
                cols.append((j, 1.0))
                blocks.append(-A[:, j])
                cost.append(-lp.c[j])
                cols.append((j, -1.0))
        n_struct = len(cols)
        b = lp.rhs - A @ shift
        M = np.column_stack(blocks) if blocks else np.zeros((m, 0))
        # upper-bound rows z_k + s = ub - lb
        if extra_rows:
            U = np.zeros((len(extra_rows), n_struct))
            for r, (k, width) in enumerate(extra_rows):
                U[r, k] = 1.0
            M = np.vstack([M, U])
            b = np.concatenate([b, [w for _, w in extra_rows]])
        senses = list(lp.senses) + [LE] * len(extra_rows)
        mm = len(b)
        slack = []
        for i, s in enumerate(senses):
            if s == LE:
                slack.append((i, 1.0))
            elif s == GE:
                slack.append((i, -1.0))
        S = np.zeros((mm, len(slack)))
        for k, (i, v) in enumerate(slack):
            S[i, k] = v
        M = np.hstack([M, S])
        cost = np.concatenate([cost, np.zeros(len(slack))])
        sign = np.where(b < 0, -1.0, 1.0)
        self.A = M * sign[:, None]
        self.b = b * sign
        self.c = np.asarray(cost, dtype=float)
        self.sign = sign
        self.cols = cols
        self.shift = shift
        self.n_struct = n_struct
        self.m_orig = m
        self.n_orig = n
        self.offset = lp.offset + float(lp.c @ shift)

    def recover(self, z: np.ndarray) -> np.ndarray:
        x = self.shift.copy()
        for k, (j, s) in enumerate(self.cols):
            x[j] += s * z[k]
        return x


def _simplex(A, b, c, basis, max_iter):
    """Phase II on a feasible basis; returns (status, basis, iterations)."""
    m, n = A.shape
    basis = list(basis)
    degenerate = 0
    it = 0
    in_basis = np.zeros(n, dtype=bool)
    in_basis[basis] = True
    while it < max_iter:
        it += 1
        B = A[:, basis]
        lu = sla.lu_factor(B, check_finite=False)
        xB = sla.lu_solve(lu, b, check_finite=False)
        y = sla.lu_solve(lu, c[basis], trans=1, check_finite=False)
        d = c - A.T @ y
        d[in_basis] = 0.0
        cand = np.flatnonzero(d < -OPT_TOL)
        if len(cand) == 0:
            return OPTIMAL, basis, it
        bland = degenerate >= DEGENERATE_RUN
        q = int(cand[0]) if bland else int(cand[np.argmin(d[cand])])
        u = sla.lu_solve(lu, A[:, q], check_finite=False)
        pos = np.flatnonzero(u > PIVOT_TOL)
        if len(pos) == 0:
            return UNBOUNDED, basis, it
        ratios = np.maximum(xB[pos], 0.0) / u[pos]
        rmin = ratios.min()
        ties = pos[ratios <= rmin + 1e-12]
        if bland:
            r = int(min(ties, key=lambda k: basis[k]))
        else:
            r = int(ties[np.argmax(u[ties])])
        degenerate = degenerate + 1 if rmin <= FEAS_TOL else 0
        in_basis[basis[r]] = False
        basis[r] = q
        in_basis[q] = True
    raise RuntimeError("simplex iteration limit reached")


def revised_simplex(lp: LinearProgram, basis_hint=None, max_iter: int = 50000) -> LpSolution:
    """Solve with the reference simplex; ``basis_hint`` is accepted but every solve starts cold."""
    sf = _StandardForm(lp)
    A, b, c = sf.A, sf.b, sf.c
    m, n = A.shape
    if m == 0:
        if np.any(c < -OPT_TOL):
            return LpSolution(UNBOUNDED)
        z = np.zeros(n)
        return LpSolution(OPTIMAL, sf.recover(z), np.zeros(lp.n_rows), sf.offset, lp.c.copy())
    # phase I with one artificial per row
    A1 = np.hstack([A, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = list(range(n, n + m))
    status, basis, it1 = _simplex(A1, b, c1, basis, max_iter)
    B = A1[:, basis]
    xB = np.linalg.solve(B, b)
    if float(c1[basis] @ xB) > FEAS_TOL * max(1.0, np.abs(b).max()):
        return LpSolution(INFEASIBLE, iterations=it1)
    # pivot remaining artificials out where possible; otherwise the row is redundant
    keep_rows = np.ones(m, dtype=bool)
    for r in range(m):
        if basis[r] < n:
            continue
        Binv_row = np.linalg.solve(A1[:, basis].T, np.eye(m)[r])
        alpha = Binv_row @ A
        nonbasic = [j for j in range(n) if j not in basis]
        js = [j for j in nonbasic if abs(alpha[j]) > 1e-7]
        if js:
            basis[r] = js[0]
        else:
            keep_rows[r] = False
    rows = np.flatnonzero(keep_rows)
    A2, b2 = A[rows], b[rows]
    basis2 = [basis[r] for r in rows]
    status, basis2, it2 = _simplex(A2, b2, c, basis2, max_iter)
    if status != OPTIMAL:
        return LpSolution(status, iterations=it1 + it2)
    B = A2[:, basis2]
    z = np.zeros(n)
    z[basis2] = np.linalg.solve(B, b2)
    y2 = np.linalg.solve(B.T, c[basis2])
    y = np.zeros(m)
    y[rows] = y2
    y = y * sf.sign
    x = sf.recover(z)
    duals = y[: sf.m_orig]
    obj = float(lp.c @ x) + lp.offset
    rc = lp.c - lp.matrix("csr").T @ duals
    return LpSolution(OPTIMAL, x, duals, obj, rc, None, it1 + it2)
