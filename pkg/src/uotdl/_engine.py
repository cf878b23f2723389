"""Unrolled barycenter reconstruction with hand-written reverse mode.

This is the computational core of dictionary training: for every pixel
``i`` with simplex weights ``Lambda[i]`` it runs exactly ``L`` scaling
iterations against the shared kernel and returns the reconstruction
``P[i]``, plus exact gradients of a reconstruction loss with respect to
the dictionary and the weights, obtained by backpropagating through the
recorded iterations (checkpointing one scaling state per iteration and
recomputing the cheap intermediates on the way back).

Two numerics notes:

* the power-mean update is evaluated via ``expm1``/``log1p`` in the
  exponent-scaled space, because at ``tau >> eps`` the mean is a
  near-degenerate ``1 + O(eps/tau)`` quantity whose direct evaluation
  cancels catastrophically in float32;
* a float32 fast path (numba-fused elementwise stages + BLAS sgemm)
  exists for full-size training runs; the float64 path is the contract
  reference and the one validated against finite differences.

Shapes: dictionary ``D`` is (k, d); weights ``Lambda`` are (n, k);
targets ``X`` are (n, d); internal scaling states are (n, k, d).
"""

from __future__ import annotations

import numpy as np
from numba import njit

FLOOR64 = 1e-300
FLOOR32 = 1e-35


class EngineError(RuntimeError):
    """Raised when an unrolled iteration produces non-finite values."""

    def __init__(self, iteration: int, what: str):
        self.iteration = iteration
        super().__init__(
            f"non-finite intermediate ({what}) at unrolled iteration {iteration}"
        )


def _floor_for(dtype) -> float:
    return FLOOR32 if np.dtype(dtype) == np.float32 else FLOOR64


def _exponent(tau: float, epsilon: float, balanced: bool) -> tuple[float, float]:
    if balanced:
        return 1.0, 0.0
    f = tau / (tau + epsilon)
    return f, 1.0 - f


# ---------------------------------------------------------------------------
# float64 reference path (plain numpy)
# ---------------------------------------------------------------------------


def _iterate_once(S, lnD, lam, K, f, m1, floor, balanced):
    """One scaling iteration; returns the intermediates backward needs."""
    n, k, d = S.shape
    A = (S.reshape(n * k, d) @ K).reshape(n, k, d)
    lnA = np.log(np.maximum(A, floor))
    T = np.exp(f * (lnD[None, :, :] - lnA)) if not balanced else np.exp(lnD[None] - lnA)
    B = (T.reshape(n * k, d) @ K).reshape(n, k, d)
    x = np.log(np.maximum(B, floor))
    if balanced:
        lnp = np.einsum("nk,nkd->nd", lam, x)
        S_new = np.exp(lnp[:, None, :] - x)
        return A, T, B, x, None, lnp, S_new
    wm = np.expm1(m1 * x)
    qm = np.einsum("nk,nkd->nd", lam, wm)
    lnp = np.log1p(qm) / m1
    S_new = np.exp(f * (lnp[:, None, :] - x))
    return A, T, B, x, wm, lnp, S_new


def forward(D, Lambda, K, tau, epsilon, iters, balanced=False):
    """Run the unrolled reconstruction; returns (P, checkpoints).

    ``checkpoints[l]`` is the scaling state entering iteration ``l``;
    they are what `backward` consumes.
    """
    D = np.asarray(D)
    Lambda = np.asarray(Lambda)
    K = np.asarray(K)
    dtype = D.dtype
    floor = _floor_for(dtype)
    f, m1 = _exponent(tau, epsilon, balanced)
    n, k = Lambda.shape
    d = D.shape[1]
    with np.errstate(divide="ignore"):
        lnD = np.log(np.maximum(D, floor)).astype(dtype)
    S = np.ones((n, k, d), dtype=dtype)
    checkpoints = []
    lnp = None
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(iters):
            checkpoints.append(S)
            _, _, _, _, _, lnp, S = _iterate_once(
                S, lnD, Lambda, K, f, m1, floor, balanced
            )
            if not np.all(np.isfinite(S)):
                raise EngineError(it, "scaling state")
        P = np.exp(lnp)
    if not np.all(np.isfinite(P)):
        raise EngineError(iters - 1, "reconstruction")
    return P, checkpoints


def backward(D, Lambda, K, tau, epsilon, checkpoints, dP, balanced=False):
    """Exact gradients (dD, dLambda) given the loss gradient at P."""
    D = np.asarray(D)
    Lambda = np.asarray(Lambda)
    dtype = D.dtype
    floor = _floor_for(dtype)
    f, m1 = _exponent(tau, epsilon, balanced)
    n, k = Lambda.shape
    d = D.shape[1]
    with np.errstate(divide="ignore"):
        lnD = np.log(np.maximum(D, floor)).astype(dtype)

    dD = np.zeros_like(D)
    dLam = np.zeros_like(Lambda)
    dS = np.zeros((n, k, d), dtype=dtype)
    iters = len(checkpoints)
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(iters - 1, -1, -1):
            S_in = checkpoints[it]
            A, T, B, x, wm, lnp, S_out = _iterate_once(
                S_in, lnD, Lambda, K, f, m1, floor, balanced
            )
            if it == iters - 1:
                p = np.exp(lnp)
                dlnp = dP * p
            else:
                dlnp = np.zeros((n, d), dtype=dtype)
            if balanced:
                # S_out = exp(lnp - x); lnp = sum_k lam * x
                dlnp = dlnp + (dS * S_out).sum(axis=1)
                dx = -dS * S_out
                dLam += np.einsum("nd,nkd->nk", dlnp, x)
                dx += Lambda[:, :, None] * dlnp[:, None, :]
            else:
                # S_out = exp(f (lnp - x))
                dlnp = dlnp + f * (dS * S_out).sum(axis=1)
                dx = -f * dS * S_out
                # lnp = log1p(qm)/m1 ; qm = sum_k lam * wm ; wm = expm1(m1 x)
                qm = np.expm1(m1 * lnp)
                dqm = dlnp / (m1 * (1.0 + qm))
                dLam += np.einsum("nd,nkd->nk", dqm, wm)
                dwm = Lambda[:, :, None] * dqm[:, None, :]
                dx += dwm * (m1 * (1.0 + wm))
            dB = np.where(B > floor, dx / np.maximum(B, floor), 0.0)
            dT = (dB.reshape(n * k, d) @ K).reshape(n, k, d)
            scale = f if not balanced else 1.0
            dlnA = -scale * dT * T
            dD += scale * np.einsum("nkd,nkd->kd", dT, T) / np.maximum(D, floor)
            dA = np.where(A > floor, dlnA / np.maximum(A, floor), 0.0)
            dS = (dA.reshape(n * k, d) @ K).reshape(n, k, d)
    return dD, dLam


# ---------------------------------------------------------------------------
# float32 fast path: fused elementwise stages, BLAS matmuls
# ---------------------------------------------------------------------------


# flush thresholds: anything this small is far below one float32 ulp of
# the surrounding values, and letting it through creates subnormal
# multiply operands inside the sgemms, which cost orders of magnitude
FLUSH_FWD = 1e-14
FLUSH_BWD = 1e-17
FLUSH_KERNEL = 1e-20


@njit(cache=True, fastmath=True)
def _stage_T(A, lnD, f, floor, k, T):
    rows, d = A.shape
    for i in range(rows):
        a = i % k
        for j in range(d):
            v = A[i, j]
            if v < floor:
                v = floor
            t = np.exp(f * (lnD[a, j] - np.log(v)))
            T[i, j] = t if t >= FLUSH_FWD else 0.0


@njit(cache=True, fastmath=True)
def _stage_mean(B, lam_flat, m1, floor, k, x, wm, qm):
    rows, d = B.shape
    n = rows // k
    for i in range(n):
        for j in range(d):
            qm[i, j] = 0.0
    for i in range(rows):
        pix = i // k
        w = lam_flat[i]
        for j in range(d):
            v = B[i, j]
            if v < floor:
                v = floor
            xv = np.log(v)
            x[i, j] = xv
            wv = np.expm1(m1 * xv)
            wm[i, j] = wv
            qm[pix, j] += w * wv


@njit(cache=True, fastmath=True)
def _stage_S(x, qm, f, m1, k, lnp, S):
    rows, d = x.shape
    n = rows // k
    for i in range(n):
        for j in range(d):
            lnp[i, j] = np.log1p(qm[i, j]) / m1
    for i in range(rows):
        pix = i // k
        for j in range(d):
            s = np.exp(f * (lnp[pix, j] - x[i, j]))
            S[i, j] = s if s >= FLUSH_FWD else 0.0


@njit(cache=True, fastmath=True)
def _stage_back_mean(dS, S, dP_lnp, wm, qm, lam_flat, f, m1, k, dx, dqm, dLam_flat):
    """Backward through the mean/power stages; dP_lnp carries dlnp seed."""
    rows, d = dS.shape
    n = rows // k
    # dlnp = seed + f * sum_k dS * S ; accumulate into dP_lnp.
    # incoming dS can carry float32 subnormals from the sgemm: flush
    # before multiplying or the products crawl
    for i in range(rows):
        pix = i // k
        for j in range(d):
            ds = dS[i, j]
            if abs(ds) < FLUSH_BWD:
                ds = 0.0
                dS[i, j] = 0.0
            dP_lnp[pix, j] += f * ds * S[i, j]
    for i in range(n):
        for j in range(d):
            dqm[i, j] = dP_lnp[i, j] / (m1 * (1.0 + qm[i, j]))
    for i in range(rows):
        pix = i // k
        acc = 0.0
        w = lam_flat[i]
        for j in range(d):
            dq = dqm[pix, j]
            acc += dq * wm[i, j]
            dwm = w * dq
            v = -f * dS[i, j] * S[i, j] + dwm * (m1 * (1.0 + wm[i, j]))
            dx[i, j] = v if abs(v) >= FLUSH_BWD else 0.0
        dLam_flat[i] = acc


@njit(cache=True, fastmath=True)
def _stage_back_T(dx, B, dT_in_dB_out, floor):
    rows, d = dx.shape
    for i in range(rows):
        for j in range(d):
            v = B[i, j]
            g = dx[i, j] / v if v > floor else 0.0
            dT_in_dB_out[i, j] = g if abs(g) >= FLUSH_BWD else 0.0


@njit(cache=True, fastmath=True)
def _stage_back_A(dT, T, A, f, floor, k, dA, dD_acc):
    rows, d = dT.shape
    for i in range(rows):
        a = i % k
        for j in range(d):
            t = dT[i, j]
            if abs(t) < FLUSH_BWD:
                t = 0.0
            g = f * t * T[i, j]
            dD_acc[a, j] += g
            v = A[i, j]
            h = -g / v if v > floor else 0.0
            dA[i, j] = h if abs(h) >= FLUSH_BWD else 0.0


def forward_backward_f32(D, Lambda, K, tau, epsilon, iters, X, loss_kind="quadratic"):
    """Fused float32 loss/gradient evaluation for full-size training.

    Returns (loss, P, dD, dLambda) with the loss and gradients
    accumulated in float64.  Only the unbalanced power-mean recursion is
    implemented here; balanced training runs on the reference path.

    The forward intermediates are stored rather than recomputed, so the
    memory footprint is about ``4 * iters * n * atoms * bands`` float32
    values plus the scaling-state checkpoints; reduce ``inner_iters`` or
    the subsample size if that does not fit.
    """
    n, k = Lambda.shape
    d = D.shape[1]
    f, m1 = _exponent(tau, epsilon, balanced=False)
    floor = FLOOR32
    K32 = np.ascontiguousarray(K, dtype=np.float32)
    K32[K32 < FLUSH_KERNEL] = 0.0  # subnormal products stall the sgemms
    D32 = np.ascontiguousarray(D, dtype=np.float32)
    lnD = np.log(np.maximum(D32, floor))
    lam_flat = np.ascontiguousarray(Lambda, dtype=np.float32).reshape(n * k)
    rows = n * k
    f32, m132, floor32 = np.float32(f), np.float32(m1), np.float32(floor)

    S_ckpt = np.empty((iters + 1, rows, d), dtype=np.float32)
    T_st = np.empty((iters, rows, d), dtype=np.float32)
    B_st = np.empty((iters, rows, d), dtype=np.float32)
    wm_st = np.empty((iters, rows, d), dtype=np.float32)
    qm_st = np.empty((iters, n, d), dtype=np.float32)
    x = np.empty((rows, d), dtype=np.float32)
    lnp = np.empty((n, d), dtype=np.float32)

    S_ckpt[0] = 1.0
    A = np.empty((rows, d), dtype=np.float32)
    for it in range(iters):
        np.dot(S_ckpt[it], K32, out=A)
        _stage_T(A, lnD, f32, floor32, k, T_st[it])
        np.dot(T_st[it], K32, out=B_st[it])
        _stage_mean(B_st[it], lam_flat, m132, floor32, k, x, wm_st[it], qm_st[it])
        _stage_S(x, qm_st[it], f32, m132, k, lnp, S_ckpt[it + 1])
        if not np.all(np.isfinite(S_ckpt[it + 1])):
            raise EngineError(it, "scaling state")
    P = np.exp(lnp.astype(np.float64))

    loss, dP = _loss_and_seed(P, X, loss_kind)

    dD_acc = np.zeros((k, d), dtype=np.float64)
    dLam = np.zeros((n, k), dtype=np.float64)
    dS = np.zeros((rows, d), dtype=np.float32)
    dP_lnp = np.empty((n, d), dtype=np.float32)
    dqm = np.empty((n, d), dtype=np.float32)
    dx = np.empty((rows, d), dtype=np.float32)
    dB = np.empty((rows, d), dtype=np.float32)
    dA = np.empty((rows, d), dtype=np.float32)
    dLam_flat = np.empty(rows, dtype=np.float32)
    dD_it = np.empty((k, d), dtype=np.float32)
    seed32 = (dP * P).astype(np.float32)  # dlnp seed at the last iteration

    for it in range(iters - 1, -1, -1):
        dP_lnp[:] = seed32 if it == iters - 1 else 0.0
        _stage_back_mean(
            dS, S_ckpt[it + 1], dP_lnp, wm_st[it], qm_st[it], lam_flat,
            f32, m132, k, dx, dqm, dLam_flat,
        )
        dLam += dLam_flat.reshape(n, k).astype(np.float64)
        _stage_back_T(dx, B_st[it], dB, floor32)
        dT = np.dot(dB, K32, out=dx)  # dx buffer reused for dT
        np.dot(S_ckpt[it], K32, out=A)
        dD_it[:] = 0.0
        _stage_back_A(dT, T_st[it], A, f32, floor32, k, dA, dD_it)
        dD_acc += dD_it.astype(np.float64)
        np.dot(dA, K32, out=dS)
    dD = dD_acc / np.maximum(D, FLOOR64)
    return loss, P, dD, dLam


def _loss_and_seed(P, X, loss_kind):
    """Loss value and dLoss/dP for the three reconstruction losses."""
    diff = P - X
    if loss_kind == "quadratic":
        return float((diff * diff).sum()), 2.0 * diff
    if loss_kind == "tv":
        return float(np.abs(diff).sum()), np.sign(diff)
    if loss_kind == "kl":
        if np.any((X > 0) & (P <= 0)):
            return np.inf, np.zeros_like(P)
        pos = X > 0
        val = float(
            (X[pos] * np.log(X[pos] / P[pos])).sum() - X.sum() + P.sum()
        )
        grad = np.ones_like(P)
        grad[pos] -= X[pos] / P[pos]
        # entries with X == 0 contribute P, gradient 1
        return val, grad
    raise ValueError(f"unknown loss kind {loss_kind!r}")
