"""Entropic optimal-transport solvers via Sinkhorn-type scaling.

Two problems are solved between nonnegative mass vectors ``mu`` (length
n) and ``nu`` (length m) with cost matrix ``C``:

* balanced: minimize ``<C, X> + eps * sum(X log X)`` over couplings
  whose marginals equal ``mu`` and ``nu`` exactly;
* unbalanced: minimize over all nonnegative ``X``
  ``<X, C> + tau*KL(X 1 | mu) + tau*KL(X^T 1 | nu) + eps*KL(X | mu nu^T)``
  where ``KL(a | b) = sum a log(a/b) - a + b`` (unnormalized form).

Both solvers run multiplicative scaling iterations against the kernel
and absorb the scaling vectors into additive dual potentials whenever
they exceed ``stabilize_threshold``, which keeps iterations finite for
regularizations as small as 1e-3.

On the coupling polytope the balanced entropy term and
``KL(X | mu nu^T)`` differ only by a constant depending on (mu, nu),
so results carry two objective values: ``cost`` is the literal per-mode
objective above, while ``cost_kl`` always measures entropy relative to
the product coupling and is the value to use when comparing balanced
and unbalanced solves (e.g. in the large-tau limit).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASS_MATCH_RTOL = 1e-9


@dataclass
class SinkhornConfig:
    """Solver knobs shared by the balanced and unbalanced routines.

    ``tau`` is only read by the unbalanced solver.  Iterations stop when
    the l1 residual of the marginal fixed-point condition drops below
    ``tolerance`` on both sides, or after ``max_iters``.
    """

    epsilon: float
    tau: float = 1.0
    max_iters: int = 10000
    tolerance: float = 1e-9
    stabilize_threshold: float = 1e30

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class TransportResult:
    plan: np.ndarray
    cost: float
    cost_kl: float
    iterations: int
    marginal_error: float
    converged: bool
    residual_trace: list[float] = field(default_factory=list)


def _as_measure(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if np.any(a < 0):
        raise ValueError(f"{name} has negative mass")
    return a


def kl_div(a: np.ndarray, b: np.ndarray) -> float:
    """Unnormalized KL divergence ``sum a log(a/b) - a + b``.

    Entries with ``a == 0`` contribute ``b``; positive mass where
    ``b == 0`` makes the divergence infinite.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any((a > 0) & (b == 0)):
        return np.inf
    pos = a > 0
    out = float(b.sum() - a.sum())
    if np.any(pos):
        out += float(np.sum(a[pos] * np.log(a[pos] / b[pos])))
    return out


def entropy_sum(X: np.ndarray) -> float:
    """``sum X log X`` with the 0 log 0 = 0 convention."""
    X = np.asarray(X, dtype=np.float64)
    pos = X > 0
    return float(np.sum(X[pos] * np.log(X[pos])))


def primal_cost(plan, C, mu, nu, epsilon, tau=None, mode="balanced") -> float:
    """Evaluate the balanced or unbalanced transport objective at a plan.

    Evaluation-only: the plan is not required to satisfy any marginal
    constraint.  In unbalanced mode, positive plan mass outside the
    support of ``mu nu^T`` yields ``+inf``.
    """
    X = np.asarray(plan, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    mu = _as_measure(mu, "mu")
    nu = _as_measure(nu, "nu")
    if X.shape != (mu.size, nu.size) or C.shape != X.shape:
        raise ValueError("plan, cost and marginal shapes disagree")
    if np.any(X < 0):
        raise ValueError("plan has negative entries")
    linear = float(np.sum(X * C))
    if mode == "balanced":
        return linear + epsilon * entropy_sum(X)
    if mode == "unbalanced":
        if tau is None:
            raise ValueError("unbalanced mode requires tau")
        return (
            linear
            + tau * kl_div(X.sum(axis=1), mu)
            + tau * kl_div(X.sum(axis=0), nu)
            + epsilon * kl_div(X, np.outer(mu, nu))
        )
    raise ValueError(f"unknown mode {mode!r}")


def relative_entropy_cost(plan, C, mu, nu, epsilon) -> float:
    """``<C, X> + eps * KL(X | mu nu^T)``: the convention-free objective.

    Equals the literal balanced objective plus a plan-independent
    constant on the coupling polytope, and equals the epsilon part of
    the unbalanced objective exactly.
    """
    X = np.asarray(plan, dtype=np.float64)
    return float(np.sum(X * C)) + epsilon * kl_div(X, np.outer(mu, nu))


def _scaling_loop(mu, nu, log_kernel, cfg, exponent, tau=np.inf):
    """Shared scaling iteration with log-domain absorption.

    ``exponent`` is 1.0 for balanced solves and tau/(tau+eps) for
    unbalanced ones.  Returns the plan plus iteration diagnostics.
    The marginal fixed-point condition being monitored is
    ``row_marginal = mu * s^(-eps/tau)`` (and its column analogue),
    where ``s`` is the full row scaling; for exponent 1 this reduces to
    plain marginal agreement.
    """
    eps = cfg.epsilon
    n, m = log_kernel.shape
    with np.errstate(over="ignore"):
        K = np.exp(log_kernel)
    u = np.ones(n)
    v = np.ones(m)
    alpha = np.zeros(n)
    beta = np.zeros(m)
    # exponent = tau/(tau+eps): residual compares r with mu * s^(-eps/tau)
    gap = 1.0 / exponent - 1.0  # = eps/tau, 0 when balanced
    trace: list[float] = []
    err = np.inf
    it = 0
    for it in range(1, cfg.max_iters + 1):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            Kv = K @ v
            f_alpha = np.exp(-alpha / (eps + tau)) if exponent < 1 else 1.0
            u = np.where(mu > 0, (mu / Kv) ** exponent, 0.0)
            u = u * f_alpha if exponent < 1 else u
            Ktu = K.T @ u
            f_beta = np.exp(-beta / (eps + tau)) if exponent < 1 else 1.0
            v = np.where(nu > 0, (nu / Ktu) ** exponent, 0.0)
            v = v * f_beta if exponent < 1 else v

        if (
            np.any(u > cfg.stabilize_threshold)
            or np.any(v > cfg.stabilize_threshold)
            or not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)))
        ):
            # absorb scalings into the dual potentials and restart from 1
            with np.errstate(divide="ignore", invalid="ignore"):
                alpha += eps * np.log(np.maximum(u, 1e-300))
                beta += eps * np.log(np.maximum(v, 1e-300))
                K = np.exp(
                    (alpha[:, None] + beta[None, :]) / eps + log_kernel
                )
            u = np.ones(n)
            v = np.ones(m)

        # residuals of the marginal fixed-point condition, l1
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            Kv = K @ v
            row = u * Kv
            col = v * (K.T @ u)
            if gap > 0:
                s_row = np.exp(alpha / eps) * u
                s_col = np.exp(beta / eps) * v
                row_target = np.where(mu > 0, mu * s_row ** (-gap), 0.0)
                col_target = np.where(nu > 0, nu * s_col ** (-gap), 0.0)
            else:
                row_target, col_target = mu, nu
        err_row = float(np.abs(row - row_target).sum())
        err_col = float(np.abs(col - col_target).sum())
        err = max(err_row, err_col)
        trace.append(err)
        if err_row < cfg.tolerance and err_col < cfg.tolerance:
            break

    plan = u[:, None] * K * v[None, :]
    plan = np.where(np.isfinite(plan), plan, 0.0)
    return plan, it, err, err < cfg.tolerance, trace


def solve_balanced(mu, nu, C, cfg: SinkhornConfig) -> TransportResult:
    """Entropic balanced optimal transport between equal-mass measures.

    Parameters
    ----------
    mu, nu : nonnegative mass vectors with equal totals (relative
        mismatch beyond 1e-9 is an error)
    C : cost matrix, shape (len(mu), len(nu))
    cfg : SinkhornConfig

    Returns
    -------
    TransportResult with the scaled-kernel plan, the literal objective
    ``<C, X> + eps * sum(X log X)`` in ``cost`` and the
    product-relative form in ``cost_kl``.  Non-convergence within
    ``max_iters`` is reported via ``converged``, not an exception.
    """
    mu = _as_measure(mu, "mu")
    nu = _as_measure(nu, "nu")
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (mu.size, nu.size):
        raise ValueError("cost matrix shape does not match the measures")
    tm, tn = mu.sum(), nu.sum()
    if tm <= 0 or tn <= 0:
        raise ValueError("balanced transport needs positive total mass")
    if abs(tm - tn) > MASS_MATCH_RTOL * max(tm, tn):
        raise ValueError(f"total masses differ: {tm} vs {tn}")

    log_kernel = -C / cfg.epsilon
    plan, it, err, ok, trace = _scaling_loop(mu, nu, log_kernel, cfg, 1.0)
    cost = primal_cost(plan, C, mu, nu, cfg.epsilon, mode="balanced")
    cost_kl = relative_entropy_cost(plan, C, mu, nu, cfg.epsilon)
    return TransportResult(plan, cost, cost_kl, it, err, ok, trace)


def solve_unbalanced(mu, nu, C, cfg: SinkhornConfig) -> TransportResult:
    """Entropic unbalanced optimal transport with KL marginal relaxation.

    Totals of ``mu`` and ``nu`` may differ; the scaling updates are
    raised to the exponent ``tau / (tau + eps)``.  If either measure is
    identically zero the optimal plan is zero and the objective reduces
    to ``tau`` times the remaining total mass, returned exactly.

    ``cost`` (== ``cost_kl``) is the full unbalanced objective of the
    returned plan.
    """
    mu = _as_measure(mu, "mu")
    nu = _as_measure(nu, "nu")
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (mu.size, nu.size):
        raise ValueError("cost matrix shape does not match the measures")
    tm, tn = mu.sum(), nu.sum()
    if tm <= 0 and tn <= 0:
        raise ValueError("at least one measure must carry positive mass")
    if tm == 0 or tn == 0:
        plan = np.zeros((mu.size, nu.size))
        cost = cfg.tau * (tm + tn)
        return TransportResult(plan, cost, cost, 0, 0.0, True, [])

    with np.errstate(divide="ignore"):
        log_kernel = (
            -C / cfg.epsilon
            + np.log(mu)[:, None]
            + np.log(nu)[None, :]
        )
    exponent = cfg.tau / (cfg.tau + cfg.epsilon)
    plan, it, err, ok, trace = _scaling_loop(
        mu, nu, log_kernel, cfg, exponent, tau=cfg.tau
    )
    cost = primal_cost(plan, C, mu, nu, cfg.epsilon, cfg.tau, mode="unbalanced")
    return TransportResult(plan, cost, cost, it, err, ok, trace)
