"""Exact Shapley values by enumerating every coalition.

The characteristic function is tabulated once per period over all ``2**n``
coalitions (bit ``i`` of the mask is entity ``i``) and the Shapley weights
``n_S! (n - n_S - 1)! / n!`` are evaluated in log space.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocation import AllocationResult
from .dcopf import emissions_batch
from .grid import GridSystem, OperatingConditions

__all__ = [
    "MAX_EXACT_ENTITIES",
    "CapacityError",
    "CharacteristicTable",
    "AxiomReport",
    "all_coalitions",
    "tabulate_characteristic",
    "shapley_weights",
    "exact_shapley",
    "permutation_shapley",
    "check_axioms",
    "save_table",
    "load_table",
]

MAX_EXACT_ENTITIES = 24


class CapacityError(ValueError):
    """Exhaustive enumeration requested beyond the supported entity count."""


@dataclass(frozen=True, eq=False)
class CharacteristicTable:
    values: np.ndarray
    n: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (1 << self.n,):
            raise ValueError(f"table for n={self.n} needs {1 << self.n} values, got {v.shape}")
        if v[0] != 0:
            raise ValueError("the empty coalition must have value 0")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def grand(self) -> float:
        return float(self.values[-1])

    def __call__(self, S) -> np.ndarray:
        """Look up the value of each indicator row of ``S``."""
        S = np.asarray(S).astype(np.int64).reshape(-1, self.n)
        return self.values[S @ (1 << np.arange(self.n, dtype=np.int64))]

    def as_oracle(self):
        """Evaluator with the ``oracle(conditions, S)`` signature used by the samplers."""
        return lambda conditions, S: self(S)

    def __add__(self, other):
        return CharacteristicTable(self.values + other.values, self.n)

    def __mul__(self, a: float):
        return CharacteristicTable(a * self.values, self.n)

    __rmul__ = __mul__


def all_coalitions(n: int) -> np.ndarray:
    """Indicator rows for masks ``0 .. 2**n - 1``."""
    masks = np.arange(1 << n, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def tabulate_characteristic(system: GridSystem, conditions: OperatingConditions,
                            threads: int | None = None) -> CharacteristicTable:
    n = system.n_entities
    if n > MAX_EXACT_ENTITIES:
        raise CapacityError(
            f"exact enumeration needs 2**{n} OPF solves; limit is n <= {MAX_EXACT_ENTITIES}, "
            "use a sampling method instead"
        )
    S = all_coalitions(n)
    values = np.zeros(1 << n)
    values[1:] = emissions_batch(system, conditions, S[1:], threads=threads)
    return CharacteristicTable(values, n)


def shapley_weights(n: int) -> np.ndarray:
    """Weight of a coalition of size ``z`` (not containing the player), ``z = 0..n-1``."""
    z = np.arange(n)
    logw = np.array([math.lgamma(k + 1) + math.lgamma(n - k) - math.lgamma(n + 1) for k in z])
    return np.exp(logw)


def _popcount(masks: np.ndarray) -> np.ndarray:
    counts = np.zeros(masks.shape, dtype=np.int64)
    m = masks.copy()
    while np.any(m):
        counts += m & 1
        m >>= 1
    return counts


def exact_shapley(table: CharacteristicTable, t: int = 1) -> AllocationResult:
    n = table.n
    v = table.values
    w = shapley_weights(n)
    masks = np.arange(1 << n, dtype=np.int64)
    size = _popcount(masks)
    x = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        x[i] = np.dot(w[size[without]], v[without | bit] - v[without])
    return AllocationResult(x=x, method="exact", t=t, M=0, c_full=table.grand)


def permutation_shapley(table: CharacteristicTable) -> np.ndarray:
    """Average marginal contribution over all ``n!`` join orders (small ``n`` only)."""
    n = table.n
    if n > 9:
        raise CapacityError("permutation enumeration is limited to n <= 9")
    v = table.values
    x = np.zeros(n)
    count = 0
    for order in itertools.permutations(range(n)):
        mask = 0
        for i in order:
            x[i] += v[mask | (1 << i)] - v[mask]
            mask |= 1 << i
        count += 1
    return x / count


@dataclass
class AxiomReport:
    efficiency: bool
    efficiency_residual: float
    symmetry: bool
    symmetry_residual: float
    symmetric_pairs: list
    dummy: bool
    dummy_residual: float
    null_players: list
    additivity: bool
    additivity_residual: float

    @property
    def passed(self) -> bool:
        return self.efficiency and self.symmetry and self.dummy and self.additivity


def _symmetric_pairs(table: CharacteristicTable, tol: float):
    n, v = table.n, table.values
    masks = np.arange(1 << n, dtype=np.int64)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            bi, bj = 1 << i, 1 << j
            rest = masks[(masks & (bi | bj)) == 0]
            if np.all(np.abs(v[rest | bi] - v[rest | bj]) <= tol):
                pairs.append((i, j))
    return pairs


def _null_players(table: CharacteristicTable, tol: float):
    n, v = table.n, table.values
    masks = np.arange(1 << n, dtype=np.int64)
    out = []
    for i in range(n):
        b = 1 << i
        rest = masks[(masks & b) == 0]
        if np.all(np.abs(v[rest | b] - v[rest]) <= tol):
            out.append(i)
    return out


def check_axioms(table: CharacteristicTable, x, tol: float = 1e-9, seed: int = 0) -> AxiomReport:
    """Check an allocation against the four Shapley axioms on ``table``.

    Tolerances are relative to the largest absolute table value.  Additivity
    is tested on the allocation rule itself: ``exact_shapley`` of the table
    plus a random table must equal the sum of the two allocations.
    """
    x = np.asarray(getattr(x, "x", x), dtype=float)
    scale = max(1.0, float(np.abs(table.values).max()))
    atol = tol * scale

    eff = float(abs(x.sum() - table.grand))
    pairs = _symmetric_pairs(table, atol)
    sym = max((abs(x[i] - x[j]) for i, j in pairs), default=0.0)
    nulls = _null_players(table, atol)
    dum = max((abs(x[i]) for i in nulls), default=0.0)

    rng = np.random.default_rng(seed)
    other_vals = rng.normal(scale=scale, size=table.values.size)
    other_vals[0] = 0.0
    other = CharacteristicTable(other_vals, table.n)
    lhs = exact_shapley(table + other).x
    rhs = x + exact_shapley(other).x
    add = float(np.abs(lhs - rhs).max())
    return AxiomReport(
        efficiency=eff <= atol,
        efficiency_residual=eff,
        symmetry=sym <= atol,
        symmetry_residual=float(sym),
        symmetric_pairs=pairs,
        dummy=dum <= atol,
        dummy_residual=float(dum),
        null_players=nulls,
        additivity=add <= atol,
        additivity_residual=add,
    )


_MAGIC = b"SSCT"


def save_table(table: CharacteristicTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", table.n))
        fh.write(np.asarray(table.values, dtype="<f8").tobytes())


def load_table(path) -> CharacteristicTable:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a characteristic table file")
    (n,) = struct.unpack("<I", data[4:8])
    values = np.frombuffer(data[8:], dtype="<f8")
    return CharacteristicTable(values.copy(), n)
