"""Power-system data model, system files, synthetic systems and scenarios.

Entities are indexed densely in the order thermal, renewable, load.  That
order fixes the layout of coalition indicator vectors and of the surrogate's
input features throughout the package.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix

from . import _seeding

__all__ = [
    "Kind",
    "Entity",
    "Branch",
    "GridSystem",
    "OperatingConditions",
    "Scenario",
    "Coalition",
    "SystemFormatError",
    "SystemValidationError",
    "TopologyError",
    "DEFAULT_VOLL",
    "COAL_BETA",
    "GAS_BETA",
    "load_system",
    "save_system",
    "system_to_dict",
    "system_from_dict",
    "synthesize_system",
    "compute_ptdf",
    "generate_scenario",
    "save_scenario",
    "load_scenario",
    "renewable_profile",
    "load_profile",
]

DEFAULT_VOLL = 10_000.0
COAL_BETA = 1.044  # tCO2eq/MWh
GAS_BETA = 0.44

PTDF_TOL = 1e-9


class SystemFormatError(ValueError):
    """A system file is not shaped like the system JSON schema."""


class SystemValidationError(ValueError):
    """A system parses but breaks one or more model invariants."""

    def __init__(self, failures: Sequence[str]):
        self.failures = list(failures)
        super().__init__("invalid system:\n  " + "\n  ".join(self.failures))


class TopologyError(ValueError):
    """The branch graph is not connected."""


class Kind(str, enum.Enum):
    THERMAL = "thermal"
    RENEWABLE = "renewable"
    LOAD = "load"


_KIND_ORDER = {Kind.THERMAL: 0, Kind.RENEWABLE: 1, Kind.LOAD: 2}


@dataclass(frozen=True)
class Entity:
    id: int
    kind: Kind
    bus: int
    p_max: float
    beta: float = 0.0
    base_offer: float = 0.0
    p_min: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    x: float
    capacity_mw: float


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridSystem:
    """Immutable network plus entity registry.

    ``ptdf`` is the bus-level matrix ``[n_branch, n_bus]``; entity-level
    factors are obtained by indexing its columns with ``bus``.
    """

    n_bus: int
    branches: tuple[Branch, ...]
    entities: tuple[Entity, ...]
    slack_bus: int = 0
    voll: float = DEFAULT_VOLL
    ptdf: np.ndarray = None
    ptdf_supplied: bool = False
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.ptdf is None:
            object.__setattr__(
                self, "ptdf", compute_ptdf(self.branches, self.n_bus, self.slack_bus)
            )
        object.__setattr__(self, "ptdf", _frozen(self.ptdf))
        kinds = [e.kind for e in self.entities]
        idx = lambda k: np.array([i for i, kk in enumerate(kinds) if kk == k], dtype=np.intp)
        object.__setattr__(self, "thermal", idx(Kind.THERMAL))
        object.__setattr__(self, "renewable", idx(Kind.RENEWABLE))
        object.__setattr__(self, "load", idx(Kind.LOAD))
        object.__setattr__(self, "bus", np.array([e.bus for e in self.entities], dtype=np.intp))
        object.__setattr__(self, "beta", _frozen([e.beta for e in self.entities]))
        object.__setattr__(self, "p_max", _frozen([e.p_max for e in self.entities]))
        object.__setattr__(self, "base_offer", _frozen([e.base_offer for e in self.entities]))
        object.__setattr__(self, "capacity", _frozen([b.capacity_mw for b in self.branches]))
        # +1 for injections, -1 for withdrawals
        sign = np.where(np.array([k == Kind.LOAD for k in kinds], dtype=bool), -1.0, 1.0)
        object.__setattr__(self, "sign", _frozen(sign))
        object.__setattr__(self, "entity_ptdf", _frozen(self.ptdf[:, self.bus] if len(kinds) else np.zeros((len(self.branches), 0))))

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_thermal(self) -> int:
        return len(self.thermal)

    @property
    def n_renewable(self) -> int:
        return len(self.renewable)

    @property
    def n_load(self) -> int:
        return len(self.load)

    def kind_of(self, i: int) -> Kind:
        return self.entities[i].kind

    def digest(self) -> str:
        """sha256 of the canonical JSON form; identifies the system in manifests."""
        text = json.dumps(system_to_dict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def replace_entity(self, i: int, **changes) -> "GridSystem":
        ents = list(self.entities)
        ents[i] = Entity(**{**ents[i].__dict__, **changes})
        return GridSystem(
            n_bus=self.n_bus,
            branches=self.branches,
            entities=tuple(ents),
            slack_bus=self.slack_bus,
            voll=self.voll,
            ptdf=self.ptdf,
            ptdf_supplied=self.ptdf_supplied,
            warnings=self.warnings,
        )


@dataclass(frozen=True, eq=False)
class OperatingConditions:
    """Per-period offers, renewable caps and load caps."""

    t: int
    rho_g: np.ndarray
    r_max: np.ndarray
    d_max: np.ndarray
    voll: float = DEFAULT_VOLL

    def __post_init__(self):
        for name in ("rho_g", "r_max", "d_max"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        bad = [n for n in ("rho_g", "r_max", "d_max") if np.any(getattr(self, n) < 0)]
        if bad:
            raise ValueError(f"negative entries in {', '.join(bad)}")
        if self.rho_g.size and not self.voll > self.rho_g.max():
            raise ValueError("voll must exceed every thermal offer")

    def upper_bounds(self, system: GridSystem) -> np.ndarray:
        """Upper output bound of every entity in this period, in entity order."""
        ub = np.empty(system.n_entities)
        ub[system.thermal] = system.p_max[system.thermal]
        ub[system.renewable] = self.r_max
        ub[system.load] = self.d_max
        return ub

    def costs(self, system: GridSystem) -> np.ndarray:
        """Objective coefficient of every entity (renewables at zero offer)."""
        c = np.zeros(system.n_entities)
        c[system.thermal] = self.rho_g
        c[system.load] = -self.voll
        return c

    def replace(self, **changes) -> "OperatingConditions":
        d = dict(t=self.t, rho_g=self.rho_g, r_max=self.r_max, d_max=self.d_max, voll=self.voll)
        d.update(changes)
        return OperatingConditions(**d)

    def equals(self, other: "OperatingConditions") -> bool:
        return (
            self.t == other.t
            and self.voll == other.voll
            and np.array_equal(self.rho_g, other.rho_g)
            and np.array_equal(self.r_max, other.r_max)
            and np.array_equal(self.d_max, other.d_max)
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    periods: tuple[OperatingConditions, ...]
    seed: int | None = None

    def __post_init__(self):
        if len(self.periods) < 1:
            raise ValueError("a scenario needs at least one period")

    def __len__(self):
        return len(self.periods)

    def __iter__(self):
        return iter(self.periods)

    def __getitem__(self, k):
        return self.periods[k]

    @property
    def T(self) -> int:
        return len(self.periods)

    def equals(self, other: "Scenario") -> bool:
        return len(self) == len(other) and all(a.equals(b) for a, b in zip(self, other))


@dataclass(frozen=True, eq=False)
class Coalition:
    """Fixed-width indicator vector of a subset of entities."""

    s: np.ndarray
    size: int = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.s).astype(bool)
        s.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "size", int(s.sum()))

    @classmethod
    def from_members(cls, members: Iterable[int], n: int) -> "Coalition":
        s = np.zeros(n, dtype=bool)
        s[list(members)] = True
        return cls(s)

    @classmethod
    def from_mask(cls, mask: int, n: int) -> "Coalition":
        return cls((int(mask) >> np.arange(n)) & 1)

    @classmethod
    def full(cls, n: int) -> "Coalition":
        return cls(np.ones(n, dtype=bool))

    @property
    def mask(self) -> int:
        return int(np.dot(self.s.astype(np.int64), 1 << np.arange(len(self.s), dtype=np.int64)))

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self.s)

    def __len__(self):
        return len(self.s)


def as_indicator(coalition, n: int) -> np.ndarray:
    """Coerce a Coalition / sequence of bools to a bool vector of width ``n``."""
    s = coalition.s if isinstance(coalition, Coalition) else np.asarray(coalition).astype(bool)
    if s.shape != (n,):
        raise ValueError(f"coalition has width {s.shape}, expected ({n},)")
    return s


# ---------------------------------------------------------------------------
# PTDF

def compute_ptdf(branches: Sequence[Branch], n_bus: int, slack_bus: int = 0) -> np.ndarray:
    """DC power-transfer-distribution factors, shape ``[n_branch, n_bus]``.

    Entry ``[f, k]`` is the flow on branch ``f`` (positive from -> to) caused by
    injecting 1 MW at bus ``k`` and withdrawing it at the slack bus.
    """
    n_br = len(branches)
    if n_bus < 1:
        raise ValueError("n_bus must be >= 1")
    if not 0 <= slack_bus < n_bus:
        raise ValueError(f"slack bus {slack_bus} outside 0..{n_bus - 1}")
    if n_br == 0:
        if n_bus > 1:
            raise TopologyError(f"{n_bus} buses but no branches")
        return np.zeros((0, n_bus))
    frm = np.array([b.from_bus for b in branches])
    to = np.array([b.to_bus for b in branches])
    x = np.array([b.x for b in branches], dtype=float)
    graph = coo_matrix((np.ones(n_br), (frm, to)), shape=(n_bus, n_bus))
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp > 1:
        raise TopologyError(f"branch graph has {n_comp} disconnected components")

    inc = np.zeros((n_br, n_bus))
    inc[np.arange(n_br), frm] = 1.0
    inc[np.arange(n_br), to] = -1.0
    bf = inc / x[:, None]
    bbus = inc.T @ bf
    keep = np.array([k for k in range(n_bus) if k != slack_bus], dtype=np.intp)
    ptdf = np.zeros((n_br, n_bus))
    if keep.size:
        ptdf[:, keep] = np.linalg.solve(bbus[np.ix_(keep, keep)], bf[:, keep].T).T
    ptdf[np.abs(ptdf) < 1e-15] = 0.0
    return ptdf


# ---------------------------------------------------------------------------
# JSON system files

_TOP_KEYS = ("buses", "branches", "entities", "slack_bus")


def system_to_dict(system: GridSystem) -> dict:
    d = {
        "buses": system.n_bus,
        "slack_bus": system.slack_bus,
        "branches": [
            {"from": b.from_bus, "to": b.to_bus, "x": b.x, "capacity_mw": b.capacity_mw}
            for b in system.branches
        ],
        "entities": [
            {
                "id": e.id,
                "kind": e.kind.value,
                "bus": e.bus,
                "beta": e.beta,
                "p_max": e.p_max,
                "base_offer": e.base_offer,
            }
            for e in system.entities
        ],
    }
    if system.voll != DEFAULT_VOLL:
        d["voll"] = system.voll
    if system.ptdf_supplied:
        d["ptdf"] = system.ptdf.tolist()
    return d


def _field(obj: dict, key: str, where: str, types):
    if not isinstance(obj, dict):
        raise SystemFormatError(f"{where}: expected an object")
    if key not in obj:
        raise SystemFormatError(f"{where}: missing field '{key}'")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, types):
        raise SystemFormatError(f"{where}.{key}: wrong type {type(v).__name__}")
    return v


def system_from_dict(data: dict) -> GridSystem:
    """Build and validate a GridSystem from the parsed JSON document."""
    num = (int, float)
    for k in _TOP_KEYS:
        _field(data, k, "system", (int, list) if k == "buses" else (list if k in ("branches", "entities") else int))
    buses = data["buses"]
    n_bus = buses if isinstance(buses, int) else len(buses)
    slack = data["slack_bus"]
    failures: list[str] = []
    notes: list[str] = []

    branches = []
    for f, b in enumerate(data["branches"]):
        where = f"branches[{f}]"
        frm = _field(b, "from", where, int)
        to = _field(b, "to", where, int)
        x = float(_field(b, "x", where, num))
        cap = float(_field(b, "capacity_mw", where, num))
        for name, bus in (("from", frm), ("to", to)):
            if not 0 <= bus < n_bus:
                failures.append(f"{where}.{name}: bus {bus} outside 0..{n_bus - 1}")
        if frm == to:
            failures.append(f"{where}: self-loop on bus {frm}")
        if not x > 0:
            failures.append(f"{where}.x: reactance must be > 0, got {x}")
        if not cap > 0:
            failures.append(f"{where}.capacity_mw: capacity must be > 0, got {cap}")
        branches.append(Branch(frm, to, x, cap))

    entities = []
    for i, e in enumerate(data["entities"]):
        where = f"entities[{i}]"
        eid = _field(e, "id", where, int)
        kind_s = _field(e, "kind", where, str)
        try:
            kind = Kind(kind_s.lower())
        except ValueError:
            raise SystemFormatError(f"{where}.kind: unknown kind '{kind_s}'") from None
        bus = _field(e, "bus", where, int)
        p_max = float(_field(e, "p_max", where, num))
        beta = float(e.get("beta", 0.0)) if "beta" in e else 0.0
        offer = float(e.get("base_offer", 0.0)) if "base_offer" in e else 0.0
        p_min = float(e.get("p_min", 0.0))
        if eid != i:
            failures.append(f"{where}.id: ids must be dense 0..n-1 in file order, got {eid}")
        if not 0 <= bus < n_bus:
            failures.append(f"{where}.bus: bus {bus} outside 0..{n_bus - 1}")
        if not p_max > 0:
            failures.append(f"{where}.p_max: must be > 0, got {p_max}")
        if beta < 0:
            failures.append(f"{where}.beta: must be >= 0, got {beta}")
        if offer < 0:
            failures.append(f"{where}.base_offer: must be >= 0, got {offer}")
        if kind != Kind.THERMAL and beta != 0:
            failures.append(f"{where}.beta: only thermal units carry an emission intensity")
        if p_min != 0:
            notes.append(f"{where}.p_min: {p_min} clamped to 0")
            p_min = 0.0
        entities.append(Entity(eid, kind, bus, p_max, beta, offer, p_min))

    order = [_KIND_ORDER[e.kind] for e in entities]
    if order != sorted(order):
        failures.append("entities: must be ordered thermal, renewable, load")
    if not entities:
        failures.append("entities: at least one entity is required")
    if not 0 <= slack < n_bus:
        failures.append(f"slack_bus: {slack} outside 0..{n_bus - 1}")

    voll = float(data.get("voll", DEFAULT_VOLL))
    offers = [e.base_offer for e in entities if e.kind == Kind.THERMAL]
    if offers and not voll > 1.2 * max(offers):
        failures.append(f"voll: {voll} does not exceed the largest perturbed offer")

    ptdf = None
    if "ptdf" in data:
        try:
            ptdf = np.array(data["ptdf"], dtype=float).reshape(len(branches), n_bus)
        except (ValueError, TypeError):
            raise SystemFormatError(f"ptdf: expected a {len(branches)}x{n_bus} matrix") from None
        if 0 <= slack < n_bus and np.any(ptdf[:, slack] != 0):
            failures.append(f"ptdf: slack column {slack} must be exactly zero")
        if np.any(np.abs(ptdf) > 1 + PTDF_TOL):
            failures.append("ptdf: entries must satisfy |F| <= 1")

    if failures:
        raise SystemValidationError(failures)
    if ptdf is None:
        try:
            ptdf = compute_ptdf(branches, n_bus, slack)
        except TopologyError as exc:
            raise SystemValidationError([f"branches: {exc}"]) from None
    for msg in notes:
        warnings.warn(msg, stacklevel=3)
    return GridSystem(
        n_bus=n_bus,
        branches=tuple(branches),
        entities=tuple(entities),
        slack_bus=slack,
        voll=voll,
        ptdf=ptdf,
        ptdf_supplied="ptdf" in data,
        warnings=tuple(notes),
    )


def load_system(path) -> GridSystem:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemFormatError(f"{path}: not valid JSON ({exc})") from None
    return system_from_dict(data)


def save_system(system: GridSystem, path) -> None:
    Path(path).write_text(json.dumps(system_to_dict(system), indent=2) + "\n")


# ---------------------------------------------------------------------------
# synthetic systems

def synthesize_system(
    n_thermal: int,
    n_renewable: int,
    n_load: int,
    n_bus: int,
    seed: int,
    *,
    capacity_factor: float = 1.0,
    coal_share: float = 0.5,
    reserve_margin: float = 1.3,
) -> GridSystem:
    """Reproducible synthetic test system.

    The network is a ring over ``n_bus`` buses plus ``n_bus // 3`` random
    chords.  Each thermal unit is coal (beta 1.044, cheap) or gas (beta 0.44,
    dear) with probability ``coal_share``; total thermal capacity is
    ``reserve_margin`` times the total load nameplate.  Branch ratings are
    ``capacity_factor * U[0.5, 1] * total load`` so the default network is
    only occasionally congested; lower ``capacity_factor`` for congestion.
    """
    counts = (n_thermal, n_renewable, n_load, n_bus)
    if min(counts) < 0:
        raise ValueError("counts must be non-negative")
    if n_thermal + n_renewable + n_load < 1:
        raise ValueError("a system needs at least one entity")
    if n_bus < 1:
        raise ValueError("n_bus must be >= 1")
    rng = _seeding.stream(seed, _seeding.TAG_SYSTEM)

    edges = []
    if n_bus == 2:
        edges.append((0, 1))
    elif n_bus >= 3:
        edges.extend((k, (k + 1) % n_bus) for k in range(n_bus))
        existing = {frozenset(e) for e in edges}
        candidates = [(a, b) for a in range(n_bus) for b in range(a + 2, n_bus)
                      if frozenset((a, b)) not in existing]
        n_chords = min(n_bus // 3, len(candidates))
        if n_chords:
            pick = rng.choice(len(candidates), size=n_chords, replace=False)
            edges.extend(candidates[k] for k in sorted(pick))

    load_p = np.round(rng.uniform(20.0, 80.0, n_load), 3)
    ren_p = np.round(rng.uniform(20.0, 80.0, n_renewable), 3)
    total_load = float(load_p.sum()) if n_load else 100.0
    raw = rng.uniform(0.5, 1.5, n_thermal)
    th_p = np.round(raw / raw.sum() * reserve_margin * total_load, 3) if n_thermal else raw
    is_coal = rng.uniform(size=n_thermal) < coal_share
    offers = np.where(is_coal, rng.uniform(15.0, 25.0, n_thermal), rng.uniform(32.0, 50.0, n_thermal))
    offers = np.round(offers, 3)
    x = np.round(rng.uniform(0.05, 0.25, len(edges)), 4)
    cap = np.round(capacity_factor * rng.uniform(0.5, 1.0, len(edges)) * total_load, 3)
    buses = rng.integers(0, n_bus, n_thermal + n_renewable + n_load)

    entities = []
    k = 0
    for g in range(n_thermal):
        entities.append(Entity(k, Kind.THERMAL, int(buses[k]), float(th_p[g]),
                               COAL_BETA if is_coal[g] else GAS_BETA, float(offers[g])))
        k += 1
    for r in range(n_renewable):
        entities.append(Entity(k, Kind.RENEWABLE, int(buses[k]), float(ren_p[r])))
        k += 1
    for d in range(n_load):
        entities.append(Entity(k, Kind.LOAD, int(buses[k]), float(load_p[d])))
        k += 1
    branches = tuple(Branch(a, b, float(xx), float(cc)) for (a, b), xx, cc in zip(edges, x, cap))
    return GridSystem(n_bus=n_bus, branches=branches, entities=tuple(entities), slack_bus=0)


# ---------------------------------------------------------------------------
# scenarios

def _hour(t: int) -> int:
    return (t - 1) % 24


def renewable_profile(t: int) -> float:
    """Stand-in diurnal availability shape in [0.2, 1.0], peaking mid-afternoon."""
    return 0.6 + 0.4 * math.cos(2 * math.pi * (_hour(t) - 14) / 24)


def load_profile(t: int) -> float:
    """Stand-in diurnal demand shape in [0, 1], peaking in the early evening."""
    return 0.5 + 0.5 * math.cos(2 * math.pi * (_hour(t) - 18) / 24)


def draw_conditions(system: GridSystem, t: int, rng: np.random.Generator) -> OperatingConditions:
    """One period of operating conditions.

    Offers are base offers times U[0.8, 1.2]; renewable caps are nameplate
    times the diurnal shape times U[0, 1.2]; load caps are nameplate times a
    factor in [0.4, 1.2] that mixes the diurnal shape with uniform noise.
    """
    th, rn, ld = system.thermal, system.renewable, system.load
    rho = system.base_offer[th] * rng.uniform(0.8, 1.2, len(th))
    r_max = system.p_max[rn] * renewable_profile(t) * rng.uniform(0.0, 1.2, len(rn))
    mix = 0.5 * load_profile(t) + 0.5 * rng.uniform(0.0, 1.0, len(ld))
    d_max = system.p_max[ld] * (0.4 + 0.8 * mix)
    return OperatingConditions(t=t, rho_g=rho, r_max=r_max, d_max=d_max, voll=system.voll)


def generate_scenario(system: GridSystem, T: int, seed: int) -> Scenario:
    if T < 1:
        raise ValueError("T must be >= 1")
    periods = tuple(
        draw_conditions(system, t, _seeding.stream(seed, _seeding.TAG_SCENARIO, t))
        for t in range(1, T + 1)
    )
    return Scenario(periods=periods, seed=seed)


_VALUE_TYPES = ("offer", "r_max", "d_max")


def save_scenario(scenario: Scenario, system: GridSystem, path) -> None:
    """CSV with one row per (t, entity_id, value_type, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "entity_id", "value_type", "value"])
        for oc in scenario:
            for vt, idx, vals in (("offer", system.thermal, oc.rho_g),
                                  ("r_max", system.renewable, oc.r_max),
                                  ("d_max", system.load, oc.d_max)):
                for i, v in zip(idx, vals):
                    w.writerow([oc.t, int(i), vt, repr(float(v))])
            w.writerow([oc.t, "", "voll", repr(float(oc.voll))])


def load_scenario(path, system: GridSystem) -> Scenario:
    rows: dict[int, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"t", "entity_id", "value_type", "value"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for n, row in enumerate(reader, start=2):
            t = int(row["t"])
            per = rows.setdefault(t, {"offer": {}, "r_max": {}, "d_max": {}, "voll": system.voll})
            vt = row["value_type"]
            if vt == "voll":
                per["voll"] = float(row["value"])
            elif vt in _VALUE_TYPES:
                per[vt][int(row["entity_id"])] = float(row["value"])
            else:
                raise ValueError(f"{path}:{n}: unknown value_type '{vt}'")
    periods = []
    for t in sorted(rows):
        per = rows[t]
        try:
            rho = [per["offer"][int(i)] for i in system.thermal]
            r = [per["r_max"][int(i)] for i in system.renewable]
            d = [per["d_max"][int(i)] for i in system.load]
        except KeyError as exc:
            raise ValueError(f"{path}: period {t} lacks a value for entity {exc}") from None
        periods.append(OperatingConditions(t=t, rho_g=rho, r_max=r, d_max=d, voll=per["voll"]))
    return Scenario(periods=tuple(periods))
