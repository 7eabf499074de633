"""Dense revised simplex for small bounded-variable linear programs.

Solves::

    min  c @ x
    s.t. A_eq @ x == b_eq
         lo_in <= A_in @ x <= hi_in
         lb <= x <= ub              (all bounds finite)

Two-sided rows get a bounded slack ``y = A_in @ x`` so every row becomes an
equality and the problem is handled by the bounded-variable simplex method.
Entering and leaving variables follow Bland's rule (lowest index), which rules
out cycling and makes the returned vertex a deterministic function of the
input.  The basis inverse is kept explicitly with rank-one updates and
refactorized periodically; instances here have at most a few dozen rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SolverError", "LPResult", "solve_bounded_lp"]

FEAS_TOL = 1e-9
OPT_TOL = 1e-7
PIVOT_TOL = 1e-9
REFACTOR_EVERY = 25


class SolverError(RuntimeError):
    """The simplex method failed to reach an optimal vertex."""


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    iterations: int
    basis: np.ndarray  # column indices into [x, y, artificials] of the presolved problem
    duals: np.ndarray  # row multipliers, equality rows then inequality rows
    status: str = "optimal"


def _drop_redundant_rows(A_in, lo_in, hi_in, lb, ub):
    """Indices of two-sided rows that some point of the box can violate."""
    if A_in.shape[0] == 0:
        return np.arange(0)
    pos = np.clip(A_in, 0, None)
    neg = np.clip(A_in, None, 0)
    row_max = pos @ ub + neg @ lb
    row_min = pos @ lb + neg @ ub
    return np.flatnonzero((row_max > hi_in - FEAS_TOL) | (row_min < lo_in + FEAS_TOL))


def solve_bounded_lp(c, lb, ub, A_eq=None, b_eq=None, A_in=None, lo_in=None, hi_in=None,
                     max_iter: int | None = None, presolve: bool = True) -> LPResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    if n == 0:
        m0 = sum(0 if A is None else np.atleast_2d(np.asarray(A)).shape[0] for A in (A_eq, A_in))
        return LPResult(np.zeros(0), 0.0, 0, np.zeros(0, dtype=np.intp), np.zeros(m0))
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n)
    b_eq = np.zeros(A_eq.shape[0]) if b_eq is None else np.asarray(b_eq, dtype=float)
    A_in = np.zeros((0, n)) if A_in is None else np.asarray(A_in, dtype=float).reshape(-1, n)
    lo_in = np.zeros(0) if lo_in is None else np.asarray(lo_in, dtype=float)
    hi_in = np.zeros(0) if hi_in is None else np.asarray(hi_in, dtype=float)
    if np.any(lb > ub):
        raise SolverError("variable with lower bound above upper bound")
    if not (np.all(np.isfinite(lb)) and np.all(np.isfinite(ub))):
        raise SolverError("all variable bounds must be finite")
    m_in_all = A_in.shape[0]
    keep = _drop_redundant_rows(A_in, lo_in, hi_in, lb, ub) if presolve else np.arange(m_in_all)
    A_in, lo_in, hi_in = A_in[keep], lo_in[keep], hi_in[keep]

    m_eq, m_in = A_eq.shape[0], A_in.shape[0]
    m = m_eq + m_in
    x0 = lb.copy()
    y0 = A_in @ x0
    if np.any(y0 < lo_in - FEAS_TOL) or np.any(y0 > hi_in + FEAS_TOL):
        raise SolverError("inequality rows must be satisfied with every variable at its lower bound")
    r = b_eq - A_eq @ x0
    art_sign = np.where(r >= 0, 1.0, -1.0)

    # columns: x (n) | y (m_in) | a (m_eq); rows: equality rows, then inequality rows
    N = n + m_in + m_eq
    A = np.zeros((m, N))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = A_in
    A[m_eq:, n:n + m_in] = -np.eye(m_in)
    A[np.arange(m_eq), n + m_in + np.arange(m_eq)] = art_sign
    b = np.concatenate([b_eq, np.zeros(m_in)])
    lo = np.concatenate([lb, lo_in, np.zeros(m_eq)])
    hi = np.concatenate([ub, hi_in, np.full(m_eq, np.inf)])
    z = np.concatenate([x0, y0, np.abs(r)])
    basis = np.concatenate([n + m_in + np.arange(m_eq), n + np.arange(m_in)]).astype(np.intp)

    if max_iter is None:
        max_iter = 50 * (N + m) + 100
    iters = 0
    art = slice(n + m_in, N)
    if np.any(z[art] > FEAS_TOL):
        cost1 = np.zeros(N)
        cost1[art] = 1.0
        z, basis, k = _iterate(A, b, cost1, lo, hi, z, basis, max_iter)
        iters += k
        if z[art].sum() > 1e-7:
            raise SolverError("linear program is infeasible")
    hi[art] = 0.0
    z[art] = np.clip(z[art], 0.0, 0.0)
    cost = np.concatenate([c, np.zeros(m_in + m_eq)])
    z, basis, k = _iterate(A, b, cost, lo, hi, z, basis, max_iter - iters)
    iters += k
    x = np.clip(z[:n], lb, ub)
    pi = np.linalg.solve(A[:, basis].T, cost[basis]) if m else np.zeros(0)
    duals = np.zeros(m_eq + m_in_all)
    duals[:m_eq] = pi[:m_eq]
    duals[m_eq + keep] = pi[m_eq:]
    return LPResult(x=x, objective=float(c @ x), iterations=iters, basis=basis, duals=duals)


def _iterate(A, b, cost, lo, hi, z, basis, max_iter):
    m, N = A.shape
    z = z.copy()
    basis = basis.copy()
    if m == 0:
        # box-only problem: each variable sits at its cheaper bound
        z = np.where(cost < 0, hi, lo)
        return z, basis, 0
    is_basic = np.zeros(N, dtype=bool)
    is_basic[basis] = True
    Binv = np.linalg.inv(A[:, basis])
    since_refactor = 0
    for it in range(max_iter):
        if since_refactor >= REFACTOR_EVERY:
            Binv = np.linalg.inv(A[:, basis])
            since_refactor = 0
        zn = np.where(is_basic, 0.0, z)
        zB = Binv @ (b - A @ zn)
        z[basis] = zB
        pi = cost[basis] @ Binv
        d = cost - pi @ A
        can_up = (~is_basic) & (d < -OPT_TOL) & (z < hi - FEAS_TOL)
        can_down = (~is_basic) & (d > OPT_TOL) & (z > lo + FEAS_TOL)
        cand = np.flatnonzero(can_up | can_down)
        if cand.size == 0:
            return z, basis, it
        j = cand[0]
        sigma = 1.0 if can_up[j] else -1.0
        w = Binv @ A[:, j]
        delta = -sigma * w  # rate of change of basic values per unit step
        lo_B, hi_B = lo[basis], hi[basis]
        ratio = np.full(m, np.inf)
        dec = delta < -PIVOT_TOL
        inc = delta > PIVOT_TOL
        ratio[dec] = (zB[dec] - lo_B[dec]) / -delta[dec]
        ratio[inc] = (hi_B[inc] - zB[inc]) / delta[inc]
        ratio = np.maximum(ratio, 0.0)
        t_flip = hi[j] - lo[j]
        t_basic = ratio.min()
        if not np.isfinite(min(t_flip, t_basic)):
            raise SolverError("linear program is unbounded")
        if t_flip <= t_basic:
            z[j] += sigma * t_flip
            z[basis] = zB + delta * t_flip
            continue
        ties = np.flatnonzero(ratio <= t_basic + FEAS_TOL)
        r = ties[np.argmin(basis[ties])]
        leaving = basis[r]
        z[basis] = zB + delta * t_basic
        z[j] += sigma * t_basic
        z[leaving] = lo[leaving] if delta[r] < 0 else hi[leaving]
        is_basic[leaving] = False
        is_basic[j] = True
        basis[r] = j
        # rank-one update of the basis inverse
        piv = w[r]
        row_r = Binv[r] / piv
        Binv -= np.outer(w, row_r)
        Binv[r] = row_r
        since_refactor += 1
    raise SolverError(
        f"iteration limit {max_iter} reached (m={m}, N={N}); basis={basis.tolist()}"
    )
