"""Entropic unbalanced Wasserstein barycenters on a fixed support grid.

The barycenter of atoms ``nu_1..nu_k`` under simplex weights ``lam``
minimizes ``sum_j lam_j * UOT(p, nu_j)`` over nonnegative measures
``p``.  It is computed by a fixed number ``L`` of scaling iterations:
per-atom scalings raised to the exponent ``tau/(tau+eps)`` alternate
with a lam-weighted power-mean update of the barycenter (the power
``eps/(tau+eps)`` degenerates to a geometric mean as ``tau`` grows;
the balanced variant uses the geometric mean outright).

The iteration count is fixed rather than adaptive so that the whole
computation is a deterministic, differentiable graph; the training
module backpropagates through these exact updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .transport import SinkhornConfig, solve_unbalanced

MASS_FLOOR = 1e-300
SIMPLEX_ATOL = 1e-6


@dataclass
class BarycenterConfig:
    """Fixed-iteration barycenter parameters bound to one support grid.

    ``cost`` is the (rescaled) pairwise cost matrix of the support;
    ``inner_iters`` is the fixed unrolled length L.
    """

    epsilon: float
    tau: float
    cost: np.ndarray
    inner_iters: int = 100

    def __post_init__(self):
        if self.epsilon <= 0 or self.tau <= 0:
            raise ValueError("epsilon and tau must be positive")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be at least 1")
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if self.cost.ndim != 2 or self.cost.shape[0] != self.cost.shape[1]:
            raise ValueError("cost must be square")

    @property
    def bands(self) -> int:
        return self.cost.shape[0]

    def kernel(self) -> np.ndarray:
        return np.exp(-self.cost / self.epsilon)


def _check_weights(lam, k: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64).ravel()
    if lam.size != k:
        raise ValueError(f"expected {k} weights, got {lam.size}")
    if np.any(lam < 0):
        raise ValueError("weights must be nonnegative")
    if abs(lam.sum() - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"weights sum to {lam.sum()}, not 1")
    return lam


def _check_atoms(atoms, cfg: BarycenterConfig) -> np.ndarray:
    atoms = np.atleast_2d(np.asarray(atoms, dtype=np.float64))
    if atoms.shape[0] == 0:
        raise ValueError("need at least one atom")
    if atoms.shape[1] != cfg.bands:
        raise ValueError("atoms do not match the cost matrix support")
    if np.any(atoms < 0):
        raise ValueError("atoms must be nonnegative")
    return atoms


def _plain_unbalanced(atoms, lam, cfg):
    """Multiplicative-domain iteration; returns None on numeric breakdown.

    Breakdown means a non-finite intermediate or an intermediate pinned
    at the clamp floor, both of which signal that the scalings left the
    representable range (tiny epsilon or extreme tau); the caller then
    reruns the same recursion in log space.
    """
    K = cfg.kernel()
    f = cfg.tau / (cfg.tau + cfg.epsilon)
    m1 = 1.0 - f
    s = np.ones_like(atoms)
    p = np.zeros(cfg.bands)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for _ in range(cfg.inner_iters):
            A = np.maximum(s @ K, MASS_FLOOR)
            T = (atoms / A) ** f
            B = np.maximum(T @ K, MASS_FLOOR)
            W = B**m1
            q = np.maximum(lam @ W, MASS_FLOOR)
            p = q ** (1.0 / m1)
            s = (p[None, :] / B) ** f
            if not (np.all(np.isfinite(s)) and np.all(np.isfinite(p))):
                return None
    if np.any(p > 0) and p.max() < 10 * MASS_FLOOR:
        return None
    return p


def _log_unbalanced(atoms, lam, cfg):
    """Same recursion in log space; stable for any epsilon."""
    logK = -cfg.cost / cfg.epsilon
    f = cfg.tau / (cfg.tau + cfg.epsilon)
    m1 = 1.0 - f
    with np.errstate(divide="ignore"):
        log_atoms = np.log(atoms)
    log_s = np.zeros_like(atoms)
    log_p = np.full(cfg.bands, -np.inf)
    lam_col = lam[:, None]
    for _ in range(cfg.inner_iters):
        log_A = _log_matvec(log_s, logK)
        log_T = f * (log_atoms - log_A)
        log_B = _log_matvec(log_T, logK)
        # power mean with exponent m1, computed as a logsumexp in m1-scaled space
        log_q = logsumexp(m1 * log_B + np.log(lam_col), axis=0)
        log_p = log_q / m1
        log_s = f * (log_p[None, :] - log_B)
    with np.errstate(over="ignore"):
        return np.exp(log_p)


def _log_balanced(atoms, lam, cfg):
    logK = -cfg.cost / cfg.epsilon
    with np.errstate(divide="ignore"):
        log_atoms = np.log(atoms)
    log_s = np.zeros_like(atoms)
    log_p = np.full(cfg.bands, -np.inf)
    for _ in range(cfg.inner_iters):
        log_A = _log_matvec(log_s, logK)
        log_T = log_atoms - log_A
        log_B = _log_matvec(log_T, logK)
        log_p = lam @ log_B
        log_s = log_p[None, :] - log_B
    with np.errstate(over="ignore"):
        return np.exp(log_p)


def _log_matvec(log_x, logK):
    """log of (exp(log_x) @ exp(logK)), rowwise logsumexp."""
    return logsumexp(log_x[:, :, None] + logK[None, :, :], axis=1)


def barycenter(atoms, lam, cfg: BarycenterConfig) -> np.ndarray:
    """Unbalanced barycenter after exactly ``cfg.inner_iters`` updates.

    Runs the scaling recursion in multiplicative form and falls back to
    an equivalent log-space evaluation if the scalings leave the
    representable range (the fallback is a deterministic function of
    the inputs, so repeated calls still agree bitwise).

    Parameters
    ----------
    atoms : array (k, d)
        Reference measures on the shared support.
    lam : array (k,)
        Simplex weights (checked to 1e-6).
    cfg : BarycenterConfig

    Returns
    -------
    p : ndarray (d,), nonnegative.
    """
    atoms = _check_atoms(atoms, cfg)
    lam = _check_weights(lam, atoms.shape[0])
    p = _plain_unbalanced(atoms, lam, cfg)
    if p is None:
        p = _log_unbalanced(atoms, lam, cfg)
    return p


def balanced_barycenter(atoms, lam, cfg: BarycenterConfig) -> np.ndarray:
    """Balanced (mass-conserving) barycenter, same fixed-L structure.

    The atoms should share one total mass; the geometric-mean update is
    the tau -> infinity limit of the unbalanced power mean.  Always
    evaluated in log space: the unit-exponent scalings are exactly the
    ones that overflow first, and this path is never differentiated
    through at scale.
    """
    atoms = _check_atoms(atoms, cfg)
    lam = _check_weights(lam, atoms.shape[0])
    return _log_balanced(atoms, lam, cfg)


def barycenter_batch(atoms, Lambda, cfg: BarycenterConfig) -> np.ndarray:
    """Barycenters for each weight row; identical to n single calls."""
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=np.float64))
    out = np.empty((Lambda.shape[0], cfg.bands))
    for i, lam in enumerate(Lambda):
        out[i] = barycenter(atoms, lam, cfg)
    return out


def barycenter_objective(
    p,
    atoms,
    lam,
    cfg: BarycenterConfig,
    max_iters: int = 20000,
    tolerance: float = 1e-11,
) -> float:
    """Evaluate ``sum_j lam_j * UOT(p, nu_j)`` with a high-accuracy solve."""
    atoms = _check_atoms(atoms, cfg)
    lam = _check_weights(lam, atoms.shape[0])
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size != cfg.bands:
        raise ValueError("candidate measure does not match the support")
    scfg = SinkhornConfig(
        epsilon=cfg.epsilon,
        tau=cfg.tau,
        max_iters=max_iters,
        tolerance=tolerance,
    )
    total = 0.0
    for weight, atom in zip(lam, atoms):
        if weight == 0.0:
            continue
        total += weight * solve_unbalanced(p, atom, cfg.cost, scfg).cost
    return total
