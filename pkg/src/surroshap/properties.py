"""Empirical checks of the allocation properties, plus the relative-distance metric.

Property ids:

1. renewables receive non-positive allocations
2. lowering a thermal unit's emission intensity lowers its allocation
3. lowering a low-emission thermal unit's offer lowers its allocation
4. loads receive non-negative allocations
5. lowering a load's demand lowers its allocation
6. an energy-conserving reshape of a renewable or load profile can lower
   both that entity's allocation and total emissions

Each check returns a :class:`PropertyReport` whose verdict follows from its
evidence records alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .allocation import AllocationResult
from .dcopf import characteristic_emissions
from .exact import exact_shapley, tabulate_characteristic
from .grid import GridSystem, Kind, Scenario

__all__ = [
    "PropertyReport",
    "Evidence",
    "exact_allocator",
    "check_signs",
    "perturb_and_compare",
    "reshape_profile_search",
    "relative_distance",
    "run_property_suite",
    "write_reports_json",
    "write_evidence_csv",
]

SIGN_TOL = 1e-6
PERTURBATIONS = {"beta_scale": 2, "offer_scale": 3, "load_scale": 5}


@dataclass
class Evidence:
    entity: int
    baseline: float
    perturbed: float
    description: str
    ok: bool


@dataclass
class PropertyReport:
    property_id: int
    evidence: list = field(default_factory=list)
    tolerance: float = SIGN_TOL
    vacuous: bool = False
    note: str = ""
    profile: np.ndarray | None = None  # best reshaped profile (property 6 only)

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.evidence)

    @property
    def failures(self) -> list:
        return [e for e in self.evidence if not e.ok]

    def to_dict(self) -> dict:
        return {
            "property": self.property_id,
            "passed": self.passed,
            "vacuous": self.vacuous,
            "tolerance": self.tolerance,
            "note": self.note,
            "evidence": [vars(e) for e in self.evidence],
        }


def exact_allocator(system: GridSystem, scenario: Scenario) -> np.ndarray:
    """Exact per-period allocations as a ``(T, n)`` array."""
    return np.vstack([exact_shapley(tabulate_characteristic(system, oc), t=oc.t).x for oc in scenario])


def _allocations(allocation, system):
    if isinstance(allocation, AllocationResult):
        X = allocation.x[None, :]
    else:
        X = np.atleast_2d(np.asarray(getattr(allocation, "matrix", allocation), dtype=float))
    if X.shape[1] != system.n_entities:
        raise ValueError(f"allocation has {X.shape[1]} entries, system has {system.n_entities} entities")
    return X


def _period_labels(allocation, T, periods):
    if periods is not None:
        labels = [int(t) for t in periods]
    elif isinstance(allocation, AllocationResult):
        labels = [allocation.t]
    elif hasattr(allocation, "periods"):
        labels = [p.t for p in allocation.periods]
    else:
        labels = list(range(1, T + 1))
    if len(labels) != T:
        raise ValueError(f"{len(labels)} period labels for {T} allocation rows")
    return labels


def check_signs(allocation, system: GridSystem, slack: float = 0.0,
                periods=None) -> tuple[PropertyReport, PropertyReport]:
    """Renewables non-positive and loads non-negative, in every period given.

    ``allocation`` is an :class:`AllocationResult`, a horizon allocation, a
    vector or a ``(T, n)`` array; ``periods`` labels the rows of a bare array
    (default ``1..T``).  ``slack`` widens the tolerance for approximate
    allocations.
    """
    X = _allocations(allocation, system)
    labels = _period_labels(allocation, X.shape[0], periods)
    tol = max(SIGN_TOL, slack)
    p1 = PropertyReport(1, tolerance=tol, vacuous=system.n_renewable == 0)
    p4 = PropertyReport(4, tolerance=tol, vacuous=system.n_load == 0)
    for t, x in zip(labels, X):
        for i in system.renewable:
            p1.evidence.append(Evidence(int(i), 0.0, float(x[i]), f"period {t}: x <= 0", bool(x[i] <= tol)))
        for i in system.load:
            p4.evidence.append(Evidence(int(i), 0.0, float(x[i]), f"period {t}: x >= 0", bool(x[i] >= -tol)))
    if p1.vacuous:
        p1.note = "no renewable entities"
    if p4.vacuous:
        p4.note = "no load entities"
    return p1, p4


def _position(system: GridSystem, entity: int, kind: Kind) -> int:
    idx = {Kind.THERMAL: system.thermal, Kind.RENEWABLE: system.renewable, Kind.LOAD: system.load}[kind]
    return int(np.flatnonzero(idx == entity)[0])


def _perturbed(system: GridSystem, scenario: Scenario, entity: int, perturbation: str, factor: float):
    if perturbation == "beta_scale":
        return system.replace_entity(entity, beta=system.entities[entity].beta * factor), scenario
    k = _position(system, entity, system.kind_of(entity))
    periods = []
    for oc in scenario:
        if perturbation == "offer_scale":
            v = oc.rho_g.copy()
            v[k] *= factor
            periods.append(oc.replace(rho_g=v))
        else:
            v = oc.d_max.copy()
            v[k] *= factor
            periods.append(oc.replace(d_max=v))
    return system, Scenario(periods, scenario.seed)


def perturb_and_compare(system: GridSystem, scenario: Scenario, entity: int, perturbation: str,
                        factors=(1.0, 0.9, 0.8, 0.5), allocator=exact_allocator,
                        slack: float = 0.0) -> PropertyReport:
    """Scale one entity's parameter down and check its summed allocation does not rise.

    ``perturbation`` is ``beta_scale`` or ``offer_scale`` (thermal units) or
    ``load_scale`` (loads).  ``allocator(system, scenario)`` returns the
    ``(T, n)`` allocations; exact enumeration by default.
    """
    if perturbation not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {perturbation!r}")
    kind = system.kind_of(entity)
    need = Kind.LOAD if perturbation == "load_scale" else Kind.THERMAL
    if kind != need:
        raise ValueError(f"{perturbation} applies to {need.value} entities; entity {entity} is {kind.value}")
    factors = sorted({float(f) for f in factors} | {1.0}, reverse=True)
    if factors[-1] < 0 or factors[0] > 1:
        raise ValueError("factors must lie in [0, 1]")
    tol = max(SIGN_TOL, slack)
    report = PropertyReport(PERTURBATIONS[perturbation], tolerance=tol)
    base = float(allocator(system, scenario)[:, entity].sum())
    prev = base
    for f in factors[1:]:
        s2, sc2 = _perturbed(system, scenario, entity, perturbation, f)
        val = float(allocator(s2, sc2)[:, entity].sum())
        report.evidence.append(Evidence(entity, base, val, f"{perturbation} x{f:g}", bool(val <= prev + tol)))
        prev = val
    return report


def _profile(scenario: Scenario, system: GridSystem, entity: int) -> tuple[str, int, np.ndarray]:
    kind = system.kind_of(entity)
    k = _position(system, entity, kind)
    attr = "r_max" if kind == Kind.RENEWABLE else "d_max"
    return attr, k, np.array([getattr(oc, attr)[k] for oc in scenario])


def _with_profile(scenario: Scenario, attr: str, k: int, profile) -> Scenario:
    periods = []
    for oc, v in zip(scenario, profile):
        arr = getattr(oc, attr).copy()
        arr[k] = v
        periods.append(oc.replace(**{attr: arr}))
    return Scenario(periods, scenario.seed)


def reshape_profile_search(system: GridSystem, scenario: Scenario, entity: int, step: float = 0.02,
                           budget: int = 20, allocator=exact_allocator) -> PropertyReport:
    """Greedy search for an energy-conserving reshape that helps both the entity and the system.

    Each move shifts ``step`` times the entity's scale (nameplate capacity for
    renewables, peak demand for loads) from one period to another.  A move is
    accepted when both the entity's summed allocation and total emissions drop;
    among acceptable moves the one with the largest combined relative drop
    wins.  The search stops after ``budget`` accepted moves or when no move
    helps.
    """
    kind = system.kind_of(entity)
    if kind not in (Kind.RENEWABLE, Kind.LOAD):
        raise ValueError("profile reshaping applies to renewables and loads")
    if scenario.T < 2:
        raise ValueError("profile reshaping needs at least two periods")
    attr, k, profile = _profile(scenario, system, entity)
    scale = system.entities[entity].p_max if kind == Kind.RENEWABLE else float(profile.max())
    delta = step * scale

    def score(prof):
        sc = _with_profile(scenario, attr, k, prof)
        X = allocator(system, sc)
        total = sum(characteristic_emissions(system, oc, np.ones(system.n_entities, bool)) for oc in sc)
        return float(X[:, entity].sum()), float(total)

    base_cer, base_total = score(profile)
    cur, cur_cer, cur_total = profile.copy(), base_cer, base_total
    report = PropertyReport(6, tolerance=SIGN_TOL)
    moves = 0
    for _ in range(budget):
        best = None
        for a in range(scenario.T):
            for b in range(scenario.T):
                if a == b or cur[a] < delta - 1e-12:
                    continue
                cand = cur.copy()
                cand[a] -= delta
                cand[b] += delta
                cer, total = score(cand)
                if cer < cur_cer - SIGN_TOL and total < cur_total - SIGN_TOL:
                    gain = (cur_cer - cer) / max(abs(cur_cer), 1e-9) + (cur_total - total) / max(cur_total, 1e-9)
                    if best is None or gain > best[0]:
                        best = (gain, cand, cer, total)
        if best is None:
            break
        _, cur, cur_cer, cur_total = best
        moves += 1
    conserved = abs(cur.sum() - profile.sum()) <= 1e-9 * max(1.0, abs(profile.sum()))
    if moves == 0:
        report.vacuous = True
        report.note = "none found within budget"
    else:
        report.note = f"{moves} moves; profile {np.round(profile, 6).tolist()} -> {np.round(cur, 6).tolist()}"
    report.evidence.append(Evidence(entity, base_cer, cur_cer, "entity allocation, summed over periods",
                                    bool(cur_cer <= base_cer + SIGN_TOL)))
    report.evidence.append(Evidence(entity, base_total, cur_total, "total emissions, summed over periods",
                                    bool(cur_total <= base_total + SIGN_TOL)))
    report.evidence.append(Evidence(entity, float(profile.sum()), float(cur.sum()), "profile energy",
                                    bool(conserved)))
    report.profile = cur
    return report


def relative_distance(reference, other) -> float:
    """``||other - reference|| / ||reference||``."""
    ref = np.asarray(getattr(reference, "x", reference), dtype=float)
    oth = np.asarray(getattr(other, "x", other), dtype=float)
    if ref.shape != oth.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {oth.shape}")
    norm = np.linalg.norm(ref)
    if norm == 0:
        raise ZeroDivisionError("reference allocation has zero norm")
    return float(np.linalg.norm(oth - ref) / norm)


def run_property_suite(system: GridSystem, scenario: Scenario, allocator=exact_allocator,
                       factors=(1.0, 0.9, 0.8, 0.5), slack: float = 0.0, reshape_budget: int = 10) -> list:
    """All six checks on one system and scenario.

    Offer cuts are applied to the thermal units with the lowest emission
    intensity only, since the merit-order property concerns those.
    """
    X = allocator(system, scenario)
    reports = list(check_signs(X, system, slack, periods=[oc.t for oc in scenario]))
    for i in system.thermal:
        reports.append(perturb_and_compare(system, scenario, int(i), "beta_scale", factors, allocator, slack))
    if system.n_thermal:
        beta = system.beta[system.thermal]
        for i in system.thermal[beta <= beta.min() + 1e-12]:
            reports.append(perturb_and_compare(system, scenario, int(i), "offer_scale", factors, allocator, slack))
    for i in system.load:
        reports.append(perturb_and_compare(system, scenario, int(i), "load_scale", factors, allocator, slack))
    if scenario.T >= 2:
        for i in list(system.renewable) + list(system.load):
            reports.append(reshape_profile_search(system, scenario, int(i), budget=reshape_budget,
                                                  allocator=allocator))
    return reports


def write_reports_json(reports, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
        fh.write("\n")


def write_evidence_csv(reports, path) -> None:
    """Plot-ready table: one row per evidence record."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["property", "entity", "baseline", "perturbed", "description", "ok"])
        for r in reports:
            for e in r.evidence:
                w.writerow([r.property_id, e.entity, repr(e.baseline), repr(e.perturbed), e.description, int(e.ok)])
