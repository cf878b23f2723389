"""Dictionary learning by gradient descent through unrolled barycenters.

Learns ``k`` atoms and per-pixel simplex weights such that each input
spectrum is approximated by the weighted unbalanced barycenter of the
atoms.  Weights are parameterized as row-softmax of unconstrained
logits; atoms are clamped to a small positive floor after every
optimizer step so the measures stay valid.

Gradients are exact reverse-mode derivatives through the fixed number
of scaling iterations (see `_engine`), not finite-difference or
autodiff approximations; `gradients` is validated against central
differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .barycenter import BarycenterConfig

CHECKPOINT_MAGIC = b"UWDL"
CHECKPOINT_VERSION = 1


@dataclass
class AdamParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    barycenter: BarycenterConfig
    atoms: int
    loss_kind: str = "quadratic"
    learning_rate: float = 0.01
    iterations: int = 500
    seed: int = 0
    optimizer: AdamParams = field(default_factory=AdamParams)
    floor: float = 1e-15
    mode: str = "unbalanced"  # "balanced" trains the mass-conserving variant
    engine: str = "f64"  # "f32" activates the fused fast path

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_kind not in ("quadratic", "tv", "kl"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.mode not in ("unbalanced", "balanced"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.engine not in ("f64", "f32"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.atoms < 1:
            raise ValueError("need at least one atom")


@dataclass
class AdamState:
    m_dict: np.ndarray
    v_dict: np.ndarray
    m_logits: np.ndarray
    v_logits: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, k, d, n):
        return cls(
            m_dict=np.zeros((k, d)),
            v_dict=np.zeros((k, d)),
            m_logits=np.zeros((n, k)),
            v_logits=np.zeros((n, k)),
        )


@dataclass
class TrainResult:
    dictionary: np.ndarray  # (k, d)
    weights: np.ndarray  # (n, k), rows on the simplex
    loss_trace: np.ndarray
    logits: np.ndarray  # (n, k), the underlying parameterization


def softmax_rows(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    shifted = Z - Z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def init_state(X, k: int, seed: int, floor: float = 1e-15):
    """Seeded initial atoms and logits.

    Atoms start as ``k`` distinct input measures with a small positive
    jitter (then floored); logits are i.i.d. standard normal.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise ValueError(f"cannot pick {k} distinct atoms from {n} inputs")
    rng = np.random.default_rng(seed)
    picks = rng.choice(n, size=k, replace=False)
    jitter = rng.uniform(0.0, 1e-6, size=(k, X.shape[1]))
    D = np.maximum(X[picks] + jitter, floor)
    Z = rng.standard_normal((n, k))
    return D, Z


def reconstruction_loss(P, X, kind: str = "quadratic") -> float:
    """Elementwise reconstruction loss between P and X (same shapes)."""
    P = np.asarray(P, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if P.shape != X.shape:
        raise ValueError("shapes disagree")
    value, _ = _engine._loss_and_seed(P, X, kind)
    return value


def _softmax_vjp(lam, dlam):
    inner = (dlam * lam).sum(axis=1, keepdims=True)
    return lam * (dlam - inner)


def gradients(D, logits, X, cfg: TrainConfig):
    """Exact loss gradients with respect to atoms and logits.

    Differentiates ``loss(reconstruct(D, softmax(logits)), X)`` through
    all unrolled scaling iterations.  Returns (loss, dD, dLogits).
    """
    bc = cfg.barycenter
    D = np.asarray(D, dtype=np.float64)
    Z = np.asarray(logits, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    lam = softmax_rows(Z)
    balanced = cfg.mode == "balanced"
    if cfg.engine == "f32" and not balanced:
        loss, _, dD, dLam = _engine.forward_backward_f32(
            D, lam, bc.kernel(), bc.tau, bc.epsilon, bc.inner_iters, X, cfg.loss_kind
        )
    else:
        P, checkpoints = _engine.forward(
            D, lam, bc.kernel(), bc.tau, bc.epsilon, bc.inner_iters, balanced
        )
        loss, dP = _engine._loss_and_seed(P, X, cfg.loss_kind)
        dD, dLam = _engine.backward(
            D, lam, bc.kernel(), bc.tau, bc.epsilon, checkpoints, dP, balanced
        )
    return loss, dD, _softmax_vjp(lam, dLam)


def reconstruct(D, logits_or_weights, cfg: TrainConfig, from_logits=True):
    """Barycentric reconstructions for the current state."""
    bc = cfg.barycenter
    lam = softmax_rows(logits_or_weights) if from_logits else np.asarray(logits_or_weights)
    P, _ = _engine.forward(
        np.asarray(D, dtype=np.float64),
        lam,
        bc.kernel(),
        bc.tau,
        bc.epsilon,
        bc.inner_iters,
        cfg.mode == "balanced",
    )
    return P


def adam_step(D, Z, dD, dZ, opt: AdamState, lr, params: AdamParams, floor=1e-15):
    """One Adam update with bias correction, then floor the atoms."""
    opt.step += 1
    b1, b2, eps = params.beta1, params.beta2, params.eps
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for grad, mom, vel, target in (
        (dD, opt.m_dict, opt.v_dict, D),
        (dZ, opt.m_logits, opt.v_logits, Z),
    ):
        mom *= b1
        mom += (1 - b1) * grad
        vel *= b2
        vel += (1 - b2) * grad * grad
        target -= lr * (mom / c1) / (np.sqrt(vel / c2) + eps)
    np.maximum(D, floor, out=D)
    return D, Z


def train(X, cfg: TrainConfig) -> TrainResult:
    """Full dictionary-learning loop (Adam on atoms and weight logits).

    Deterministic per (X, cfg): initialization, iteration order and
    arithmetic are all fixed.  Raises `_engine.EngineError` if an
    unrolled iteration produces non-finite values and RuntimeError if
    the loss itself leaves the finite range.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("X must be a nonempty (n, bands) array")
    D, Z = init_state(X, cfg.atoms, cfg.seed, cfg.floor)
    opt = AdamState.zeros(cfg.atoms, X.shape[1], X.shape[0])
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        loss, dD, dZ = gradients(D, Z, X, cfg)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at training iteration {it}; "
                f"trace so far: {trace[:it].tolist()}"
            )
        trace[it] = loss
        adam_step(D, Z, dD, dZ, opt, cfg.learning_rate, cfg.optimizer, cfg.floor)
    return TrainResult(
        dictionary=D,
        weights=softmax_rows(Z),
        loss_trace=trace,
        logits=Z,
    )


# ---------------------------------------------------------------------------
# checkpoint container: magic "UWDL", version, JSON header, float64 arrays
# ---------------------------------------------------------------------------


def save_checkpoint(path, D, Z, opt: AdamState, cfg: TrainConfig, seed=None) -> None:
    header = {
        "shapes": {"dict": list(D.shape), "logits": list(Z.shape)},
        "adam_step": opt.step,
        "seed": cfg.seed if seed is None else seed,
        "config": {
            "atoms": cfg.atoms,
            "loss_kind": cfg.loss_kind,
            "learning_rate": cfg.learning_rate,
            "iterations": cfg.iterations,
            "mode": cfg.mode,
            "engine": cfg.engine,
            "floor": cfg.floor,
            "epsilon": cfg.barycenter.epsilon,
            "tau": cfg.barycenter.tau,
            "inner_iters": cfg.barycenter.inner_iters,
            "optimizer": [cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps],
        },
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in (D, Z, opt.m_dict, opt.v_dict, opt.m_logits, opt.v_logits):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (D, Z, AdamState, header dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a UWDL checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        k, d = header["shapes"]["dict"]
        n, _ = header["shapes"]["logits"]

        def read(shape):
            count = int(np.prod(shape))
            return np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()

        D = read((k, d))
        Z = read((n, k))
        opt = AdamState(
            m_dict=read((k, d)),
            v_dict=read((k, d)),
            m_logits=read((n, k)),
            v_logits=read((n, k)),
            step=header["adam_step"],
        )
    return D, Z, opt, header
