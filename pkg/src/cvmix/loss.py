"""Symmetric InfoNCE over a batch of ground/satellite descriptor pairs.

The B x B similarity matrix (scaled by a temperature) is read twice: each row
is a ground query scored against all satellite references, each column the
reverse direction. The loss is the mean of the two directional label-smoothed
cross-entropies, which makes it exactly invariant to swapping the views.
Gradients w.r.t. both descriptor sets and the temperature are analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import finite_diff_check


@dataclass(frozen=True)
class LossConfig:
    """Temperature handling and label smoothing.

    Fixed mode uses tau directly. Learnable mode stores log(1/tau)
    (init_tau as starting point) and clamps tau into [tau_min, tau_max]
    after every optimizer step.
    """

    temperature_mode: str = "learnable"
    tau: float = 0.1
    init_tau: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.temperature_mode not in ("fixed", "learnable"):
            raise ValueError(f"unknown temperature_mode {self.temperature_mode!r}")
        if self.tau <= 0 or self.init_tau <= 0:
            raise ValueError("temperature must be positive")
        if not (0 < self.tau_min <= self.tau_max):
            raise ValueError("need 0 < tau_min <= tau_max")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError(
                f"label_smoothing must be in [0, 1), got {self.label_smoothing}"
            )

    def initial_tau(self) -> float:
        return self.tau if self.temperature_mode == "fixed" else self.init_tau

    def clamp(self, tau: float) -> float:
        return min(max(tau, self.tau_min), self.tau_max)


@dataclass
class InfoNCEResult:
    loss: float
    grad_q: np.ndarray
    grad_r: np.ndarray
    grad_tau: float


def validate_batch(Q: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Enforce the paired-batch contract: matching shapes, B >= 2, unit rows."""
    Q = np.asarray(Q, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != R.shape:
        raise ValueError(f"Q and R must be equal-shape 2-D, got {Q.shape} vs {R.shape}")
    if Q.shape[0] < 2:
        raise ValueError(f"contrastive batch needs B >= 2, got B={Q.shape[0]}")
    for name, mat in (("Q", Q), ("R", R)):
        norms = np.linalg.norm(mat, axis=1)
        bad = np.abs(norms - 1.0) > 1e-6
        if np.any(bad):
            raise ValueError(
                f"{name} row {int(np.argmax(bad))} is not unit norm "
                f"({norms[np.argmax(bad)]:.8f})"
            )
    return Q, R


def similarity_logits(Q: np.ndarray, R: np.ndarray, tau: float) -> np.ndarray:
    """logits[i, j] = (Q_i . R_j) / tau; the diagonal holds the positives."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    Q, R = validate_batch(Q, R)
    return (Q @ R.T) / tau


def _smoothed_targets(B: int, eps: float) -> np.ndarray:
    T = np.full((B, B), eps / (B - 1))
    np.fill_diagonal(T, 1.0 - eps)
    return T


def _directional_ce(M: np.ndarray, T: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean smoothed cross-entropy over rows of M; returns (value, softmax)."""
    B = M.shape[0]
    shifted = M - M.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    Z = expd.sum(axis=1, keepdims=True)
    P = expd / Z
    lse = np.log(Z[:, 0]) + M.max(axis=1)
    ce = float(np.mean(lse - np.sum(T * M, axis=1)))
    return ce, P


def _infonce_raw(Q, R, tau, eps) -> InfoNCEResult:
    """Loss and gradients without the unit-norm entry check (used by the
    finite-difference validator, whose perturbations leave the unit sphere)."""
    B = Q.shape[0]
    S = Q @ R.T
    M = S / tau
    T = _smoothed_targets(B, eps)
    ce_rows, P_row = _directional_ce(M, T)
    ce_cols, P_colT = _directional_ce(M.T, T)
    loss = 0.5 * (ce_rows + ce_cols)
    G_M = 0.5 * ((P_row - T) + (P_colT.T - T)) / B
    grad_q = (G_M @ R) / tau
    grad_r = (G_M.T @ Q) / tau
    grad_tau = -float(np.sum(G_M * M)) / tau
    return InfoNCEResult(loss=loss, grad_q=grad_q, grad_r=grad_r, grad_tau=grad_tau)


def symmetric_infonce(
    Q: np.ndarray, R: np.ndarray, cfg: LossConfig, tau: float | None = None
) -> InfoNCEResult:
    """Symmetric smoothed InfoNCE with exact gradients.

    tau overrides the config value (the trainer passes its current learnable
    temperature). grad_tau is the derivative w.r.t. tau itself; for the
    log-inverse parameterization chain with d tau/d log_inv_tau = -tau.
    """
    Q, R = validate_batch(Q, R)
    if tau is None:
        tau = cfg.initial_tau()
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return _infonce_raw(Q, R, tau, cfg.label_smoothing)


def loss_gradient_check(
    cfg: LossConfig, batch_size: int = 4, dim: int = 8, seed: int = 0
) -> float:
    """Finite-difference validation of grad_q, grad_r and (learnable mode)
    grad_tau on a random batch. Returns the max relative error."""
    if batch_size > 8 or dim > 16:
        raise ValueError("gradient check is meant for small instances (B<=8, dim<=16)")
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(batch_size, dim))
    Q /= np.linalg.norm(Q, axis=1, keepdims=True)
    R = rng.normal(size=(batch_size, dim))
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    tau = cfg.initial_tau()
    eps = cfg.label_smoothing
    res = _infonce_raw(Q, R, tau, eps)

    errs = [
        finite_diff_check(lambda q: _infonce_raw(q, R, tau, eps).loss, Q, res.grad_q),
        finite_diff_check(lambda r: _infonce_raw(Q, r, tau, eps).loss, R, res.grad_r),
    ]
    if cfg.temperature_mode == "learnable":
        errs.append(finite_diff_check(
            lambda t: _infonce_raw(Q, R, float(t[0]), eps).loss,
            np.array([tau]),
            np.array([res.grad_tau]),
        ))
        # chain through the stored parameterization log(1/tau)
        lam = math.log(1.0 / tau)
        errs.append(finite_diff_check(
            lambda p: _infonce_raw(Q, R, math.exp(-float(p[0])), eps).loss,
            np.array([lam]),
            np.array([res.grad_tau * (-tau)]),
        ))
    return max(errs)
