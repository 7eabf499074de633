"""
A day of allocations with a learned emissions model
===================================================

Solving a dispatch problem for every sampled coalition is the expensive part
of the estimator.  Here a small network learns coalition emissions from
solved examples, stands in for the solver during sampling, and we compare a
24-hour allocation with the exact one.
"""

import time

import numpy as np

from surroshap import (TrainConfig, allocate_horizon, epsilon_from_bias, evaluate_metrics, generate_dataset,
                       total_bound, train)
from surroshap.grid import generate_scenario, synthesize_system
from surroshap.surrogate import TEST

system = synthesize_system(2, 2, 4, 5, seed=31)
print(f"{system.n_entities} entities on {system.n_bus} buses")

# label coalitions with true dispatch results, then fit the network
t0 = time.perf_counter()
data = generate_dataset(system, 20_000, seed=1)
print(f"labelled {len(data)} coalitions in {time.perf_counter() - t0:.0f} s")

t0 = time.perf_counter()
model = train(data, TrainConfig(epochs=30), beta_thermal=system.beta[system.thermal])
metrics = evaluate_metrics(model, data, TEST)
print(f"trained in {time.perf_counter() - t0:.0f} s: test R2 {metrics.r_squared:.4f}, "
      f"rmse {metrics.rmse:.3f} t, mean bias {metrics.mbe:+.4f} t")

day = generate_scenario(system, 24, seed=7)
fast = allocate_horizon(system, day, model, M=100_000, seed=0)
exact = allocate_horizon(system, day, method="exact")

per_hour = np.linalg.norm(fast.matrix - exact.matrix, axis=1) / np.linalg.norm(exact.matrix, axis=1)
daily = np.linalg.norm(fast.average - exact.average) / np.linalg.norm(exact.average)
print(f"hourly relative error: median {100 * np.median(per_hour):.2f}%, worst {100 * per_hour.max():.2f}%")
print(f"error of the daily average: {100 * daily:.2f}%")

# the surrogate's per-entity bias sets the part of the error that averaging cannot remove
eps = epsilon_from_bias(metrics.conditional_mbe)
print(f"bias term of the error budget: {eps:.4f} t "
      f"({100 * total_bound(0.0, eps, np.linalg.norm(exact.average)).total_rel:.2f}% of the average)")

print("entity   kind        daily average (t)")
for e, x in zip(system.entities, fast.average):
    print(f"{e.id:>6}   {e.kind.value:<10}  {x:+.3f}")
