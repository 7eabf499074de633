"""Kernel-weighted coalition sampling and the constrained least-squares Shapley estimator.

Coalitions are drawn in two stages: a size ``z`` from the Shapley-kernel size
distribution, then a uniform subset of that size.  With paired sampling every
drawn coalition is followed by its complement, so each entity appears in
exactly half of the samples and the diagonal of the second-moment matrix is
exactly 1/2.

Samples are produced in fixed blocks of ``BLOCK_PAIRS`` pairs; block ``k`` is
drawn from its own Philox stream keyed by ``(seed, k)``, so any block can be
regenerated independently and results never depend on how work is scheduled.
The moment sums are accumulated block by block in index order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _seeding
from .allocation import AllocationResult
from .dcopf import OPFOracle
from .grid import GridSystem, OperatingConditions

__all__ = [
    "BLOCK_PAIRS",
    "NeedsMoreSamplesError",
    "SizeDistribution",
    "SamplerState",
    "Trajectory",
    "kernel_size_distribution",
    "new_state",
    "draw_pairs",
    "sample_paired_batch",
    "accumulate",
    "merge",
    "solve_constrained_wls",
    "kernel_estimate",
    "kernelshap_allocate",
    "stratified_mc_allocate",
    "tail_checkpoints",
    "log_checkpoints",
    "auto_sample_count",
]

BLOCK_PAIRS = 1 << 14
MAX_CONDITION = 1e12


class NeedsMoreSamplesError(ValueError):
    """The sampled second-moment matrix is singular or too ill-conditioned."""


@dataclass(frozen=True)
class SizeDistribution:
    sizes: np.ndarray
    probs: np.ndarray


def kernel_size_distribution(n: int) -> SizeDistribution:
    """Probability of each coalition size under the Shapley kernel.

    A coalition of size ``z`` has weight ``(n-1) / (C(n,z) z (n-z))`` and there
    are ``C(n,z)`` of them, so the size marginal is proportional to
    ``(n-1) / (z (n-z))``.  Sizes 0 and ``n`` carry infinite weight and are
    excluded; they are handled by the efficiency constraint instead.
    """
    if n < 2:
        raise ValueError("kernel sampling needs at least two entities")
    z = np.arange(1, n)
    w = (n - 1) / (z * (n - z))
    p = w / w.sum()
    # enforce exact symmetry p(z) == p(n - z)
    p = 0.5 * (p + p[::-1])
    return SizeDistribution(sizes=z, probs=p)


@dataclass
class SamplerState:
    """Running sums for the moment estimates.

    ``ss_sum`` holds the integer counts ``sum_m s_m s_m^T`` (exact in float64),
    ``b_sum`` holds ``sum_m c(S_m) s_m``.  ``position`` is the index of the
    next pair to draw from the seeded stream.
    """

    n: int
    seed: int = 0
    ss_sum: np.ndarray = None
    b_sum: np.ndarray = None
    M: int = 0
    position: int = 0
    paired: bool = True

    def __post_init__(self):
        if self.ss_sum is None:
            self.ss_sum = np.zeros((self.n, self.n))
        if self.b_sum is None:
            self.b_sum = np.zeros(self.n)

    @property
    def A_hat(self) -> np.ndarray:
        return self.ss_sum / self.M

    @property
    def b(self) -> np.ndarray:
        return self.b_sum / self.M

    def copy(self) -> "SamplerState":
        return SamplerState(self.n, self.seed, self.ss_sum.copy(), self.b_sum.copy(), self.M,
                            self.position, self.paired)


def new_state(n: int, seed: int, paired: bool = True) -> SamplerState:
    return SamplerState(n=n, seed=seed, paired=paired)


def _uniform_subsets(rng, sizes: np.ndarray, n: int) -> np.ndarray:
    keys = rng.random((sizes.size, n))
    rank = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    return rank < sizes[:, None]


def _draw_block(n: int, seed: int, block: int, paired: bool) -> np.ndarray:
    rng = _seeding.stream(seed, _seeding.TAG_SAMPLER, int(paired), block)
    dist = kernel_size_distribution(n)
    sizes = rng.choice(dist.sizes, size=BLOCK_PAIRS, p=dist.probs)
    return _uniform_subsets(rng, sizes, n)


def draw_pairs(n: int, seed: int, start: int, stop: int, paired: bool = True) -> np.ndarray:
    """First halves of pairs ``start .. stop-1`` (independent draws if unpaired)."""
    if stop <= start:
        return np.zeros((0, n), dtype=bool)
    b0, b1 = start // BLOCK_PAIRS, (stop - 1) // BLOCK_PAIRS
    rows = np.concatenate([_draw_block(n, seed, b, paired) for b in range(b0, b1 + 1)])
    off = b0 * BLOCK_PAIRS
    return rows[start - off:stop - off]


def sample_paired_batch(state: SamplerState, count: int) -> np.ndarray:
    """Next ``count`` coalitions: ``count/2`` draws followed by their complements.

    Row ``count/2 + m`` is the bitwise complement of row ``m``.
    """
    if count % 2:
        raise ValueError(f"paired sampling needs an even count, got {count}")
    half = count // 2
    first = draw_pairs(state.n, state.seed, state.position, state.position + half, True)
    state.position += half
    return np.concatenate([first, ~first])


def accumulate(state: SamplerState, coalitions, emissions) -> SamplerState:
    S = np.asarray(coalitions, dtype=float).reshape(-1, state.n)
    c = np.asarray(emissions, dtype=float).reshape(-1)
    if S.shape[0] != c.size:
        raise ValueError("coalitions and emissions differ in length")
    state.ss_sum += S.T @ S
    state.b_sum += S.T @ c
    state.M += c.size
    return state


def merge(a: SamplerState, b: SamplerState) -> SamplerState:
    """Combine two partial states; the result is the state of the concatenated samples."""
    if a.n != b.n:
        raise ValueError("cannot merge states of different width")
    return SamplerState(a.n, a.seed, a.ss_sum + b.ss_sum, a.b_sum + b.b_sum, a.M + b.M,
                        max(a.position, b.position), a.paired)


def _solve(A: np.ndarray, b: np.ndarray, c_full: float) -> np.ndarray:
    ev = np.linalg.eigvalsh(A)
    if ev[0] <= 0 or ev[-1] / ev[0] > MAX_CONDITION:
        raise NeedsMoreSamplesError(
            f"second-moment matrix is singular or ill-conditioned (eigenvalues {ev[0]:.3g}..{ev[-1]:.3g})"
        )
    fac = cho_factor(A, lower=True)
    Ainv_b = cho_solve(fac, b)
    Ainv_e = cho_solve(fac, np.ones_like(b))
    shift = (Ainv_b.sum() - c_full) / Ainv_e.sum()
    x = Ainv_b - shift * Ainv_e
    # remove the rounding left in sum(x); keeps efficiency at machine precision
    return x - (x.sum() - c_full) / x.size


def solve_constrained_wls(state: SamplerState, c_full: float, t: int = 1) -> AllocationResult:
    """Efficiency-constrained weighted least squares on the accumulated moments."""
    if state.M <= 0:
        raise NeedsMoreSamplesError("no samples accumulated")
    x = _solve(state.A_hat, state.b, float(c_full))
    return AllocationResult(x=x, method="kernelshap", t=t, M=state.M, seed=state.seed, c_full=float(c_full))


@dataclass
class Trajectory:
    """Estimates recorded at increasing sample counts ``k``."""

    k: np.ndarray
    x: np.ndarray  # [len(k), n]; rows are nan where the moments were still singular

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "norm"] + [f"x{i}" for i in range(self.x.shape[1])])
            for k, xk, nk in zip(self.k, self.x, self.norms):
                w.writerow([int(k), repr(float(nk))] + [repr(float(v)) for v in xk])


def _even(v) -> np.ndarray:
    return (np.asarray(v, dtype=np.int64) // 2) * 2


def tail_checkpoints(M: int, tail_fraction: float = 0.1, n_points: int = 100) -> np.ndarray:
    """Sample counts covering the tail window ``[M - dM, M]`` with log spacing in the offset."""
    dM = max(2, int(round(M * tail_fraction)))
    k0 = int(_even(M - dM))
    offsets = np.geomspace(2, M - k0, n_points)
    return np.unique(np.concatenate([[k0], _even(k0 + offsets), [M]]))


def log_checkpoints(M: int, n_points: int = 100, k_min: int = 2) -> np.ndarray:
    return np.unique(np.concatenate([_even(np.geomspace(k_min, M, n_points)), [M]]))


def kernel_estimate(n: int, evaluate, c_full: float, M: int, seed: int, *,
                    checkpoints=None, paired: bool = True, t: int = 1,
                    method: str = "kernelshap") -> AllocationResult:
    """Constrained kernel regression estimate from ``M`` sampled coalitions.

    ``evaluate(S)`` returns the characteristic value of every indicator row of
    ``S``.  Pairs are consumed in index order as ``(s_m, e - s_m)``; the set of
    samples after ``M`` draws is exactly the paired design of size ``M``.
    When ``checkpoints`` (even sample counts) are given, the estimate at each
    is recorded in ``info['trajectory']``.
    """
    if M < 2 or M % 2:
        raise ValueError(f"M must be even and >= 2, got {M}")
    state = new_state(n, seed, paired)
    ks = np.array(sorted(set(int(k) for k in checkpoints)), dtype=np.int64) if checkpoints is not None else np.zeros(0, np.int64)
    if ks.size and (ks.min() < 2 or ks.max() > M or np.any(ks % 2)):
        raise ValueError("checkpoints must be even sample counts in [2, M]")
    traj = []
    n_pairs = M // 2
    for block_start in range(0, n_pairs, BLOCK_PAIRS):
        block_stop = min(block_start + BLOCK_PAIRS, n_pairs)
        if paired:
            first = draw_pairs(n, seed, block_start, block_stop, True)
            S = np.empty((2 * first.shape[0], n), dtype=bool)
            S[0::2] = first
            S[1::2] = ~first
        else:
            S = np.concatenate([draw_pairs(n, seed, 2 * block_start, 2 * block_stop, False)])
        c = np.asarray(evaluate(S), dtype=float)
        Sf = S.astype(float)
        base_M = state.M
        for k in ks[(ks > base_M) & (ks <= base_M + S.shape[0])]:
            j = int(k - base_M)
            part_ss = state.ss_sum + Sf[:j].T @ Sf[:j]
            part_b = state.b_sum + Sf[:j].T @ c[:j]
            try:
                traj.append(_solve(part_ss / k, part_b / k, c_full))
            except NeedsMoreSamplesError:
                traj.append(np.full(n, np.nan))
        state.ss_sum += Sf.T @ Sf
        state.b_sum += Sf.T @ c
        state.M += S.shape[0]
        state.position = block_stop
    x = _solve(state.A_hat, state.b, float(c_full))
    info = {"state": state, "paired": paired}
    if ks.size:
        info["trajectory"] = Trajectory(k=ks, x=np.array(traj).reshape(len(ks), n))
    return AllocationResult(x=x, method=method, t=t, M=M, seed=seed, c_full=float(c_full), info=info)


def kernelshap_allocate(system: GridSystem, conditions: OperatingConditions, M: int, seed: int,
                        oracle=None, *, c_full: float | None = None, checkpoints=None,
                        paired: bool = True) -> AllocationResult:
    """KernelSHAP allocation for one period.

    ``oracle(conditions, S)`` evaluates the characteristic function; it
    defaults to memoized true OPF solves.  ``c_full`` defaults to the oracle's
    value of the grand coalition.
    """
    oracle = OPFOracle(system) if oracle is None else oracle
    n = system.n_entities
    if c_full is None:
        c_full = float(np.asarray(oracle(conditions, np.ones((1, n), dtype=bool)))[0])
    return kernel_estimate(n, lambda S: oracle(conditions, S), c_full, M, seed,
                           checkpoints=checkpoints, paired=paired, t=conditions.t)


def stratified_mc_allocate(system: GridSystem, conditions: OperatingConditions, M: int, seed: int,
                           oracle=None) -> AllocationResult:
    """Stratified Monte Carlo estimate of the Shapley value.

    For each entity ``i`` the strata are the sizes ``z = 0..n-1`` of the
    coalition it joins.  The Shapley value is the plain average over strata of
    the mean marginal contribution within each stratum; every stratum gets an
    equal share ``M // n**2`` of the budget (at least one sample), and the two
    single-member strata ``z = 0`` and ``z = n-1`` are evaluated exactly.
    Efficiency is not enforced; ``info['efficiency_residual']`` reports it.
    """
    n = system.n_entities
    if M < n:
        raise ValueError(f"stratified sampling needs M >= n ({n}), got {M}")
    oracle = OPFOracle(system) if oracle is None else oracle
    per_stratum = max(1, M // (n * n))
    x = np.zeros(n)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i], dtype=np.intp)
        means = np.zeros(n)
        for z in range(n):
            if z == 0 or z == n - 1:
                k = 1
                sub = np.full((1, n - 1), z == n - 1)
            else:
                k = per_stratum
                rng = _seeding.stream(seed, _seeding.TAG_STRATIFIED, i, z)
                sub = _uniform_subsets(rng, np.full(k, z), n - 1)
            S = np.zeros((k, n), dtype=bool)
            S[:, others] = sub
            Si = S.copy()
            Si[:, i] = True
            means[z] = float(np.mean(oracle(conditions, Si) - oracle(conditions, S)))
        x[i] = means.mean()
    c_full = float(np.asarray(oracle(conditions, np.ones((1, n), dtype=bool)))[0])
    res = AllocationResult(x=x, method="stratified", t=conditions.t, M=M, seed=seed, c_full=c_full)
    res.info["efficiency_residual"] = res.efficiency_residual
    res.info["samples_per_stratum"] = per_stratum
    return res


def auto_sample_count(n: int, evaluate, c_full: float, seed: int, M_start: int = 10_000,
                      growth: float = 0.1, rtol: float = 1e-3, M_max: int = 10_000_000) -> int:
    """Smallest sample count at which ``growth`` more samples move ``||x||`` by less than ``rtol``.

    Samples are drawn in the same interleaved pair order as
    :func:`kernel_estimate`, so the returned count can be passed straight to
    it.  Returns ``M_max`` if the rule never triggers.
    """
    state = new_state(n, seed)
    M = int(_even(max(M_start, 2)))
    prev = None
    while True:
        pairs = draw_pairs(n, seed, state.M // 2, M // 2)
        S = np.empty((2 * pairs.shape[0], n), dtype=bool)
        S[0::2] = pairs
        S[1::2] = ~pairs
        accumulate(state, S, evaluate(S))
        try:
            norm = float(np.linalg.norm(_solve(state.A_hat, state.b, c_full)))
        except NeedsMoreSamplesError:
            norm = None
        if prev is not None and norm is not None and abs(norm - prev[1]) <= rtol * max(abs(prev[1]), 1e-300):
            return prev[0]
        if M >= M_max:
            return M_max
        prev = (M, norm) if norm is not None else None
        M = min(int(_even(int(np.ceil(M * (1 + growth))) + 1)), M_max)
