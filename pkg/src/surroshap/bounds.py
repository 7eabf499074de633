"""Error budget for surrogate-accelerated kernel Shapley estimates.

Two pieces add up to the bound on the time-averaged allocation error:

* ``eta``: the sampling error of the kernel estimator, estimated per period
  by fitting ``phi(m) = lam + kappa / (m**alpha * ln(m + gamma))`` to the
  drift of the estimate over the last part of the sample path and reading off
  the asymptote ``lam``;
* ``epsilon``: the surrogate bias pushed through the constrained solve, using
  the limiting second-moment matrix ``A~`` and the surrogate's conditional
  mean bias per entity.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dcopf import OPFOracle
from .grid import GridSystem, OperatingConditions
from .sampling import Trajectory, kernelshap_allocate, tail_checkpoints

__all__ = [
    "ATilde",
    "PowerLawFit",
    "FitError",
    "ErrorBudget",
    "EtaEstimate",
    "a_tilde",
    "bias_map",
    "epsilon_bound",
    "epsilon_from_bias",
    "power_law",
    "phi_from_trajectory",
    "fit_power_law",
    "estimate_eta",
    "total_bound",
    "write_fit_csv",
    "write_budget_json",
]


@dataclass(frozen=True)
class ATilde:
    n: int
    diag: float
    off: float

    def matrix(self) -> np.ndarray:
        A = np.full((self.n, self.n), self.off)
        np.fill_diagonal(A, self.diag)
        return A

    @property
    def eigenvalues(self) -> tuple[float, float]:
        """The two distinct eigenvalues, ``d - o`` (multiplicity n-1) and ``d + (n-1) o``."""
        return self.diag - self.off, self.diag + (self.n - 1) * self.off


def a_tilde(n: int) -> ATilde:
    """Large-sample limit of the paired second-moment matrix for ``n`` entities."""
    if n < 2:
        raise ValueError("A~ needs n >= 2")
    num = sum((Fraction(z - 1, n - z) for z in range(2, n)), Fraction(0))
    den = sum(Fraction(n * (n - 1), z * (n - z)) for z in range(1, n))
    return ATilde(n=n, diag=0.5, off=float(num / den))


def bias_map(A: np.ndarray) -> np.ndarray:
    """``1/2 (A^-1 - A^-1 e e^T A^-1 / (e^T A^-1 e))`` via a Cholesky factorization."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    fac = cho_factor(A, lower=True)
    Ainv = cho_solve(fac, np.eye(n))
    Ainv_e = Ainv.sum(axis=1)
    return 0.5 * (Ainv - np.outer(Ainv_e, Ainv_e) / Ainv_e.sum())


def epsilon_bound(at: ATilde, epsilon_vec) -> float:
    """Norm of the allocation shift caused by a per-entity conditional bias vector."""
    eps = np.asarray(epsilon_vec, dtype=float)
    if eps.shape != (at.n,):
        raise ValueError(f"bias vector has shape {eps.shape}, expected ({at.n},)")
    return float(np.linalg.norm(bias_map(at.matrix()) @ eps))


def epsilon_from_bias(conditional_mbe) -> float:
    """Surrogate-bias bound from a conditional MBE vector.

    Entities whose bias is undefined (never present in the evaluation split)
    are excluded from the norm, with a warning.
    """
    eps = np.asarray(conditional_mbe, dtype=float)
    bad = ~np.isfinite(eps)
    if bad.any():
        warnings.warn(f"conditional bias undefined for entities {np.flatnonzero(bad).tolist()}; treated as 0")
        eps = np.where(bad, 0.0, eps)
    return epsilon_bound(a_tilde(eps.size), eps)


# ---------------------------------------------------------------------------
# power-law fit

class FitError(RuntimeError):
    def __init__(self, message, best_residual=float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


@dataclass
class PowerLawFit:
    lam: float
    kappa: float
    alpha: float
    gamma: float
    residual: float  # root-mean-square
    window: int
    n_points: int
    iterations: int = 0

    def __call__(self, m):
        return power_law(np.asarray(m, dtype=float), self.lam, self.kappa, self.alpha, self.gamma)


def power_law(m, lam, kappa, alpha, gamma):
    return lam + kappa / (m ** alpha * np.log(m + gamma))


def _project(p, m_min):
    lam, kappa, alpha, gamma = p
    return np.array([max(lam, 0.0), kappa, min(max(alpha, 1e-6), 2.0),
                     max(gamma, 1.0 - m_min + 1e-9)])


def _jacobian(fun, p, m_min):
    J = np.empty((fun(p).size, p.size))
    for j in range(p.size):
        h = 1e-6 * max(abs(p[j]), 1e-3)
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        # stay inside the feasible box at the boundary
        if j == 0 and dn[0] < 0:
            dn[0] = p[0]
            J[:, j] = (fun(up) - fun(dn)) / h
            continue
        if j == 3 and dn[3] <= 1.0 - m_min:
            dn[3] = p[3]
            J[:, j] = (fun(up) - fun(dn)) / h
            continue
        J[:, j] = (fun(up) - fun(dn)) / (2 * h)
    return J


def _levenberg_marquardt(m, phi, p0, max_iter=500):
    m_min = float(m.min())
    fun = lambda p: power_law(m, *p) - phi
    p = _project(np.asarray(p0, dtype=float), m_min)
    r = fun(p)
    cost = float(r @ r)
    mu = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        J = _jacobian(fun, p, m_min)
        g = J.T @ r
        H = J.T @ J
        dscale = np.maximum(np.diag(H), 1e-300)
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(H + mu * np.diag(dscale), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            p_new = _project(p + step, m_min)
            r_new = fun(p_new)
            if not np.all(np.isfinite(r_new)):
                mu *= 10
                continue
            c_new = float(r_new @ r_new)
            if c_new <= cost:
                rel = (cost - c_new) / max(cost, 1e-300)
                small_step = np.all(np.abs(p_new - p) <= 1e-13 * (np.abs(p) + 1e-12))
                p, r, cost = p_new, r_new, c_new
                mu = max(mu / 3, 1e-12)
                improved = True
                if rel < 1e-15 or small_step or cost == 0.0:
                    return p, cost, it
                break
            mu *= 10
        if not improved:
            return p, cost, it
    return p, cost, it


def _linear_start(m, phi, alpha, gamma, lam0=None):
    basis = 1.0 / (m ** alpha * np.log(m + gamma))
    if lam0 is None:
        X = np.column_stack([np.ones_like(m), basis])
        (lam, kappa), *_ = np.linalg.lstsq(X, phi, rcond=None)
        return max(lam, 0.0), kappa
    kappa = float(basis @ (phi - lam0) / (basis @ basis))
    return lam0, kappa


def fit_power_law(m, phi, window: int | None = None) -> PowerLawFit:
    """Fit the asymptotic drift model to ``phi`` sampled at offsets ``m``.

    Damped Gauss-Newton (Levenberg-Marquardt with a numeric Jacobian) from a
    grid of starts; the lowest-residual fit wins.  ``kappa`` is left free in
    sign: for the drift of a converging estimate ``phi`` rises toward its
    asymptote, which the model expresses with ``kappa < 0``.
    """
    m = np.asarray(m, dtype=float)
    phi = np.asarray(phi, dtype=float)
    ok = np.isfinite(phi) & (m > 0)
    m, phi = m[ok], phi[ok]
    if m.size < 8:
        raise FitError(f"need at least 8 tail checkpoints, got {m.size}")
    m_min = float(m.min())
    gamma_starts = sorted({max(1.0, 2.0 - m_min), 10.0})
    best = None
    for lam0 in (0.0, float(phi[np.argmax(m)])):
        for alpha0 in (0.3, 0.5, 1.0):
            for gamma0 in gamma_starts:
                for joint in (False, True):
                    lam_s, kappa_s = _linear_start(m, phi, alpha0, gamma0, None if joint else lam0)
                    p, cost, its = _levenberg_marquardt(m, phi, [lam_s, kappa_s, alpha0, gamma0])
                    if np.isfinite(cost) and (best is None or cost < best[1]):
                        best = (p, cost, its)
    if best is None:
        raise FitError("power-law fit failed from every start")
    p, cost, its = best
    return PowerLawFit(lam=float(p[0]), kappa=float(p[1]), alpha=float(p[2]), gamma=float(p[3]),
                       residual=float(np.sqrt(cost / m.size)),
                       window=int(window if window is not None else m.max()),
                       n_points=int(m.size), iterations=its)


def phi_from_trajectory(traj: Trajectory, k0: int | None = None):
    """Offsets ``m`` and drifts ``||x^(k0+m) - x^(k0)||`` from a recorded trajectory."""
    k = np.asarray(traj.k)
    k0 = int(k[0]) if k0 is None else int(k0)
    idx = np.flatnonzero(k == k0)
    if idx.size == 0:
        raise ValueError(f"trajectory has no checkpoint at k={k0}")
    ref = traj.x[idx[0]]
    later = k > k0
    return (k[later] - k0).astype(float), np.linalg.norm(traj.x[later] - ref, axis=1)


@dataclass
class EtaEstimate:
    eta: float
    eta_rel: float
    fit: PowerLawFit
    allocation: object
    m: np.ndarray
    phi: np.ndarray


def estimate_eta(system: GridSystem, conditions: OperatingConditions, M: int, seed: int,
                 oracle=None, *, tail_fraction: float = 0.1, n_points: int = 100,
                 c_full: float | None = None) -> EtaEstimate:
    """Estimate the kernel-sampling error of one period from its convergence tail.

    ``oracle`` evaluates coalitions (true OPF by default; a surrogate
    evaluator when the true characteristic function is too expensive).
    """
    oracle = OPFOracle(system) if oracle is None else oracle
    ks = tail_checkpoints(M, tail_fraction, n_points)
    res = kernelshap_allocate(system, conditions, M, seed, oracle, c_full=c_full, checkpoints=ks)
    m, phi = phi_from_trajectory(res.info["trajectory"], int(ks[0]))
    fit = fit_power_law(m, phi, window=int(M - ks[0]))
    eta = fit.lam
    return EtaEstimate(eta=eta, eta_rel=eta / float(np.linalg.norm(res.x)), fit=fit,
                       allocation=res, m=m, phi=phi)


@dataclass
class ErrorBudget:
    eta: float
    epsilon: float
    total: float
    reference_norm: float | None = None

    @property
    def eta_rel(self):
        return self.eta / self.reference_norm if self.reference_norm else float("nan")

    @property
    def epsilon_rel(self):
        return self.epsilon / self.reference_norm if self.reference_norm else float("nan")

    @property
    def total_rel(self):
        return self.total / self.reference_norm if self.reference_norm else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(eta_rel=self.eta_rel, epsilon_rel=self.epsilon_rel, total_rel=self.total_rel)
        return d


def total_bound(eta: float, epsilon: float, reference_norm: float | None = None) -> ErrorBudget:
    """Combined bound ``eta + epsilon``; relative forms divide by ``reference_norm``."""
    if eta < 0 or epsilon < 0:
        raise ValueError("eta and epsilon must be non-negative")
    return ErrorBudget(eta=float(eta), epsilon=float(epsilon), total=float(eta + epsilon),
                       reference_norm=None if reference_norm is None else float(reference_norm))


def write_fit_csv(rows, path) -> None:
    """One line per period: t, lam, kappa, alpha, gamma, residual, window, n_points."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lam", "kappa", "alpha", "gamma", "residual", "window", "n_points"])
        for t, fit in rows:
            w.writerow([t] + [repr(float(v)) for v in (fit.lam, fit.kappa, fit.alpha, fit.gamma, fit.residual)]
                       + [fit.window, fit.n_points])


def write_budget_json(budget: ErrorBudget, path, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({**budget.to_dict(), **extra}, fh, indent=2, sort_keys=True)
        fh.write("\n")
