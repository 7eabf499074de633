"""Allocation result container shared by every allocation method."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["AllocationResult", "write_allocations_csv", "read_allocations_csv", "relative_l2"]


@dataclass(frozen=True, eq=False)
class AllocationResult:
    """Per-entity emission responsibility for one period, tCO2eq.

    ``M`` is the number of sampled coalitions (0 for exact enumeration) and
    ``c_full`` the grand-coalition emissions the allocation should add up to.
    """

    x: np.ndarray
    method: str
    t: int = 1
    M: int = 0
    seed: int | None = None
    c_full: float | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def efficiency_residual(self) -> float:
        """``sum(x) - c(N)``; nan when the grand value is unknown."""
        if self.c_full is None:
            return float("nan")
        return float(self.x.sum() - self.c_full)

    def __len__(self):
        return self.x.size


def relative_l2(a, b) -> float:
    """``||a - b|| / ||b||``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


_COLUMNS = ["t", "entity_id", "kind", "x_tCO2eq", "method", "M", "seed"]


def write_allocations_csv(results, system, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_COLUMNS)
        for res in results:
            for i, xi in enumerate(res.x):
                w.writerow([res.t, i, system.entities[i].kind.value, repr(float(xi)), res.method,
                            res.M, "" if res.seed is None else res.seed])


def read_allocations_csv(path) -> dict[int, np.ndarray]:
    """Map period -> allocation vector ordered by entity id."""
    per: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"t", "entity_id", "x_tCO2eq"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: not an allocation CSV")
        for row in reader:
            per.setdefault(int(row["t"]), {})[int(row["entity_id"])] = float(row["x_tCO2eq"])
    out = {}
    for t, d in sorted(per.items()):
        n = max(d) + 1
        if sorted(d) != list(range(n)):
            raise ValueError(f"{path}: period {t} has gaps in entity ids")
        out[t] = np.array([d[i] for i in range(n)])
    return out
