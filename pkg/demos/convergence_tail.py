"""
Reading the sampling error off the convergence tail
===================================================

The kernel estimator drifts less and less as samples accumulate.  Fitting a
decaying curve to that drift over the last tenth of the run gives an estimate
of the error still left in the answer, without knowing the exact value.  On a
small system we can compare that estimate with the truth.

The tail only covers a tenth of the run, so the drift seen there is a small
part of its limit and the extrapolated asymptote is rough: expect estimates
that miss the actual error by a large factor in either direction.
"""

import numpy as np

from surroshap import estimate_eta, exact_shapley, tabulate_characteristic
from surroshap.grid import generate_scenario, synthesize_system

system = synthesize_system(2, 1, 3, 4, seed=3)
hour = generate_scenario(system, 1, seed=0)[0]

table = tabulate_characteristic(system, hour)
exact = exact_shapley(table).x

# the table doubles as a free oracle, so a long run costs only the sampling
for M in (20_000, 200_000, 2_000_000):
    est = estimate_eta(system, hour, M, seed=1, oracle=table.as_oracle())
    true_err = np.linalg.norm(est.allocation.x - exact)
    f = est.fit
    print(f"M={M:>9,}  estimated {est.eta:.3e}  actual {true_err:.3e}  "
          f"(fit alpha {f.alpha:.2f}, gamma {f.gamma:.3g}, rms residual {f.residual:.1e})")

# the drift itself, at a few offsets into the tail
print("offset   drift")
for m, phi in list(zip(est.m, est.phi))[::20]:
    print(f"{int(m):>7}  {phi:.3e}")
