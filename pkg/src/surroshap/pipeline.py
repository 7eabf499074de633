"""Per-period and multi-period emission allocation.

The surrogate-accelerated estimator evaluates the sampled coalitions with a
trained model and anchors the efficiency constraint to the grand-coalition
emissions from one true OPF solve per period.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import _seeding
from .allocation import AllocationResult, write_allocations_csv
from .dcopf import OPFOracle, characteristic_emissions
from .exact import exact_shapley, tabulate_characteristic
from .grid import GridSystem, OperatingConditions, Scenario
from .sampling import kernel_estimate, kernelshap_allocate, stratified_mc_allocate
from .surrogate import Layout, SurrogateEvaluator, SurrogateModel

__all__ = [
    "METHODS",
    "HorizonAllocation",
    "period_seed",
    "surroshap_allocate_period",
    "allocate_horizon",
    "model_digest",
]

METHODS = ("exact", "kernelshap", "surroshap", "stratified")


def period_seed(seed: int, t: int) -> int:
    return _seeding.hash64(seed, t)


def model_digest(model) -> str | None:
    if not isinstance(model, SurrogateModel):
        return None
    h = hashlib.sha256()
    for p in model.params():
        h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
    h.update(np.asarray([*model.x_mean, *model.x_std, model.y_mean, model.y_std], dtype="<f4").tobytes())
    return h.hexdigest()


def _as_evaluator(system: GridSystem, model):
    if isinstance(model, SurrogateModel):
        if model.layout != Layout.of(system):
            raise ValueError(f"model was built for {model.layout}, system has {Layout.of(system)}")
        trained_on = model.metadata.get("system")
        if trained_on and trained_on != system.digest():
            raise ValueError("model was trained on a different system")
        return SurrogateEvaluator(model)
    if callable(model):
        return model
    raise TypeError("model must be a SurrogateModel or an oracle(conditions, S) callable")


class _Timed:
    def __init__(self, fn):
        self.fn = fn
        self.seconds = 0.0
        self.rows = 0

    def __call__(self, S):
        t0 = time.perf_counter()
        out = self.fn(S)
        self.seconds += time.perf_counter() - t0
        self.rows += len(S)
        return out


def surroshap_allocate_period(system: GridSystem, conditions: OperatingConditions, model, M: int, seed: int, *,
                              grand_coalition: str = "opf", checkpoints=None) -> AllocationResult:
    """Kernel estimate of one period's allocation with surrogate-evaluated coalitions.

    ``model`` is a trained :class:`SurrogateModel` or any ``oracle(conditions, S)``
    callable.  ``grand_coalition="opf"`` takes ``c(N)`` from a true OPF solve;
    ``"surrogate"`` uses the model's own prediction instead.
    """
    evaluate = _as_evaluator(system, model)
    n = system.n_entities
    t0 = time.perf_counter()
    if grand_coalition == "opf":
        c_full = characteristic_emissions(system, conditions, np.ones(n, dtype=bool))
    elif grand_coalition == "surrogate":
        c_full = float(np.asarray(evaluate(conditions, np.ones((1, n), dtype=bool)))[0])
    else:
        raise ValueError("grand_coalition must be 'opf' or 'surrogate'")
    t_grand = time.perf_counter() - t0

    timed = _Timed(lambda S: evaluate(conditions, S))
    t1 = time.perf_counter()
    res = kernel_estimate(n, timed, c_full, M, seed, checkpoints=checkpoints, t=conditions.t,
                          method="surroshap")
    total = time.perf_counter() - t1
    res.info.update(
        grand_coalition=grand_coalition,
        timings={"grand_coalition": t_grand, "evaluate": timed.seconds,
                 "sample_and_solve": total - timed.seconds},
    )
    return res


@dataclass(eq=False)
class HorizonAllocation:
    periods: list
    method: str
    manifest: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.periods)

    @property
    def matrix(self) -> np.ndarray:
        """Per-period allocations stacked as ``(T, n)``."""
        return np.vstack([p.x for p in self.periods])

    @property
    def average(self) -> np.ndarray:
        return self.matrix.mean(axis=0)

    @property
    def cumulative(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    @property
    def grand(self) -> np.ndarray:
        return np.array([np.nan if p.c_full is None else p.c_full for p in self.periods])

    def write_csv(self, system: GridSystem, path) -> None:
        write_allocations_csv(self.periods, system, path)

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


def _allocate_one(system, conditions, method, model, M, seed, oracle, threads):
    if method == "exact":
        table = tabulate_characteristic(system, conditions, threads=threads)
        res = exact_shapley(table, t=conditions.t)
        res.info["table"] = table
        return res
    if method == "kernelshap":
        return kernelshap_allocate(system, conditions, M, seed, oracle)
    if method == "surroshap":
        return surroshap_allocate_period(system, conditions, model, M, seed)
    return stratified_mc_allocate(system, conditions, M, seed, oracle)


def allocate_horizon(system: GridSystem, scenario: Scenario, model=None, M: int = 100_000, seed: int = 0,
                     method: str = "surroshap", threads: int | None = None) -> HorizonAllocation:
    """Allocate every period of ``scenario`` with independent per-period seeds.

    ``model`` is only used by ``method="surroshap"``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "surroshap" and model is None:
        raise ValueError("method 'surroshap' needs a trained model")
    if method == "exact":
        # fail before any work if the system is too large
        from .exact import MAX_EXACT_ENTITIES, CapacityError
        if system.n_entities > MAX_EXACT_ENTITIES:
            raise CapacityError(f"exact allocation supports at most {MAX_EXACT_ENTITIES} entities, "
                                f"system has {system.n_entities}")
    oracle = OPFOracle(system, threads=threads, memoize=False) if method in ("kernelshap", "stratified") else None
    periods, timings = [], []
    start = time.perf_counter()
    for oc in scenario:
        s_t = period_seed(seed, oc.t)
        t0 = time.perf_counter()
        res = _allocate_one(system, oc, method, model, M, s_t, oracle, threads)
        timings.append({"t": oc.t, "seconds": time.perf_counter() - t0, **res.info.get("timings", {})})
        periods.append(AllocationResult(x=res.x, method=method, t=oc.t, M=res.M, seed=s_t,
                                        c_full=res.c_full, info=res.info))
    manifest = {
        "method": method,
        "M": M if method != "exact" else 0,
        "seed": seed,
        "T": scenario.T,
        "system": system.digest(),
        "model": model_digest(model),
        "scenario_seed": scenario.seed,
        "threads": threads,
        "timings": {"total": time.perf_counter() - start, "periods": timings},
        "platform": {"python": platform.python_version(), "numpy": np.__version__},
    }
    return HorizonAllocation(periods=periods, method=method, manifest=manifest)
