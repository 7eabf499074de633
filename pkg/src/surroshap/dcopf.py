"""Coalition-restricted DC optimal power flow and the emissions characteristic function.

For a coalition ``S`` only the entities in ``S`` get dispatch variables; the
network (and so every branch limit) is always the full one.  The objective
maximizes welfare, i.e. minimizes thermal offer cost minus VOLL times served
load, subject to a single power balance row, box bounds and two-sided branch
flow rows built from bus-level PTDFs.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import Coalition, GridSystem, Kind, OperatingConditions, as_indicator
from .simplex import LPResult, SolverError, solve_bounded_lp

__all__ = [
    "LinearProgram",
    "DispatchSolution",
    "SolverError",
    "build_coalition_lp",
    "solve_lp",
    "solve_coalition",
    "characteristic_emissions",
    "emissions_batch",
    "OPFOracle",
    "dump_lp",
    "resolve_threads",
]

REPORT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """Dense bounded-variable LP; column ``k`` is entity ``members[k]``."""

    c: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    lo_in: np.ndarray
    hi_in: np.ndarray
    members: np.ndarray
    n_entities: int

    @property
    def n_vars(self) -> int:
        return self.c.size


@dataclass(frozen=True, eq=False)
class DispatchSolution:
    p: np.ndarray  # MW per entity, zero outside the coalition
    members: np.ndarray
    kinds: tuple
    objective: float
    flows: np.ndarray
    iterations: int = 0
    duals: np.ndarray = None
    status: str = "optimal"

    def _of(self, kind):
        idx = [i for i in self.members if self.kinds[i] == kind]
        return self.p[idx]

    @property
    def p_thermal(self):
        return self._of(Kind.THERMAL)

    @property
    def p_renewable(self):
        return self._of(Kind.RENEWABLE)

    @property
    def p_load(self):
        return self._of(Kind.LOAD)


def build_coalition_lp(system: GridSystem, conditions: OperatingConditions, coalition) -> LinearProgram:
    s = as_indicator(coalition, system.n_entities)
    members = np.flatnonzero(s)
    cost = conditions.costs(system)[members]
    ub = conditions.upper_bounds(system)[members]
    sign = system.sign[members]
    a_eq = sign[None, :].copy()
    a_in = system.entity_ptdf[:, members] * sign[None, :]
    cap = system.capacity
    return LinearProgram(
        c=cost,
        lb=np.zeros(members.size),
        ub=ub,
        A_eq=a_eq,
        b_eq=np.zeros(1),
        A_in=a_in,
        lo_in=-cap,
        hi_in=cap.copy(),
        members=members,
        n_entities=system.n_entities,
    )


def solve_lp(lp: LinearProgram, kinds=None) -> DispatchSolution:
    res: LPResult = solve_bounded_lp(lp.c, lp.lb, lp.ub, lp.A_eq, lp.b_eq, lp.A_in, lp.lo_in, lp.hi_in)
    p = np.zeros(lp.n_entities)
    p[lp.members] = res.x
    flows = lp.A_in @ res.x if lp.n_vars else np.zeros(lp.A_in.shape[0])
    return DispatchSolution(
        p=p,
        members=lp.members,
        kinds=tuple(kinds) if kinds is not None else (),
        objective=res.objective,
        flows=flows,
        iterations=res.iterations,
        duals=res.duals,
    )


def solve_coalition(system: GridSystem, conditions: OperatingConditions, coalition) -> DispatchSolution:
    lp = build_coalition_lp(system, conditions, coalition)
    return solve_lp(lp, kinds=[e.kind for e in system.entities])


def _trivially_clean(system: GridSystem, s: np.ndarray) -> bool:
    # no thermal unit means nothing emits; no load means nothing is dispatched
    return not s[system.thermal].any() or not s[system.load].any()


def characteristic_emissions(system: GridSystem, conditions: OperatingConditions, coalition) -> float:
    """Total emissions, tCO2eq, of the coalition's optimal dispatch."""
    s = as_indicator(coalition, system.n_entities)
    if _trivially_clean(system, s):
        return 0.0
    lp = build_coalition_lp(system, conditions, s)
    res = solve_bounded_lp(lp.c, lp.lb, lp.ub, lp.A_eq, lp.b_eq, lp.A_in, lp.lo_in, lp.hi_in)
    beta = system.beta[lp.members]
    return float(beta @ res.x)


def _emissions_chunk(args):
    system, conditions, rows = args
    return np.array([characteristic_emissions(system, conditions, r) for r in rows])


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("SURROSHAP_THREADS", "1") or 1)
    return max(1, int(threads))


def emissions_batch(system: GridSystem, conditions: OperatingConditions, coalitions,
                    threads: int | None = None) -> np.ndarray:
    """Characteristic function over a batch of indicator rows.

    Duplicate rows are solved once.  With ``threads > 1`` the unique rows are
    split into contiguous chunks solved in worker processes and written back
    by position, so the result does not depend on the worker count.
    """
    S = np.asarray(coalitions).astype(bool).reshape(-1, system.n_entities)
    if S.shape[0] == 0:
        return np.zeros(0)
    packed = np.packbits(S, axis=1)
    _, first, inverse = np.unique(packed, axis=0, return_index=True, return_inverse=True)
    uniq = S[first]
    workers = resolve_threads(threads)
    if workers == 1 or len(uniq) < 64:
        vals = _emissions_chunk((system, conditions, uniq))
    else:
        chunks = np.array_split(uniq, workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_emissions_chunk, [(system, conditions, c) for c in chunks]))
        vals = np.concatenate(parts)
    return vals[inverse.reshape(-1)]


class OPFOracle:
    """Characteristic-function evaluator backed by true OPF solves.

    Callable as ``oracle(conditions, S)`` for an indicator matrix ``S``.
    Results are memoized per (period, coalition) so repeated coalitions in a
    sampling run are solved once.
    """

    def __init__(self, system: GridSystem, threads: int | None = None, memoize: bool = True):
        self.system = system
        self.threads = threads
        self.memoize = memoize
        self._cache: dict = {}
        self.solves = 0

    def _key(self, conditions):
        return (conditions.t, conditions.rho_g.tobytes(), conditions.r_max.tobytes(),
                conditions.d_max.tobytes(), conditions.voll)

    def __call__(self, conditions: OperatingConditions, S) -> np.ndarray:
        S = np.asarray(S).astype(bool).reshape(-1, self.system.n_entities)
        if not self.memoize:
            self.solves += len(S)
            return emissions_batch(self.system, conditions, S, self.threads)
        cache = self._cache.setdefault(self._key(conditions), {})
        keys = [r.tobytes() for r in np.packbits(S, axis=1)]
        todo = [k for k in dict.fromkeys(keys) if k not in cache]
        if todo:
            rows = np.unpackbits(np.frombuffer(b"".join(todo), dtype=np.uint8).reshape(len(todo), -1),
                                 axis=1, count=self.system.n_entities).astype(bool)
            vals = emissions_batch(self.system, conditions, rows, self.threads)
            self.solves += len(todo)
            cache.update(zip(todo, vals))
        return np.array([cache[k] for k in keys])

    def grand(self, conditions: OperatingConditions) -> float:
        return float(self(conditions, np.ones((1, self.system.n_entities), dtype=bool))[0])


def dump_lp(lp: LinearProgram) -> str:
    """Plain-text canonical form of an LP, one line per row, for debugging."""
    fmt = lambda v: repr(float(v))
    names = [f"p{int(i)}" for i in lp.members]
    out = ["min " + " ".join(f"{fmt(c)}*{n}" for c, n in zip(lp.c, names))]
    for row, rhs in zip(lp.A_eq, lp.b_eq):
        out.append("eq  " + " ".join(f"{fmt(a)}*{n}" for a, n in zip(row, names) if a) + f" = {fmt(rhs)}")
    for f, (row, lo, hi) in enumerate(zip(lp.A_in, lp.lo_in, lp.hi_in)):
        terms = " ".join(f"{fmt(a)}*{n}" for a, n in zip(row, names) if a)
        out.append(f"f{f}  {fmt(lo)} <= {terms or '0'} <= {fmt(hi)}")
    for n, lo, hi in zip(names, lp.lb, lp.ub):
        out.append(f"bnd {fmt(lo)} <= {n} <= {fmt(hi)}")
    return "\n".join(out) + "\n"
