"""Dense linear-algebra primitives, SGD with cosine schedule, and the
finite-difference gradient checker used to validate every learnable module.

Matrices are plain 2-D C-contiguous float64 numpy arrays. Training-path math
stays in float64 so the gradient checker has headroom; only persisted
descriptors drop to float32 (see dataset module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array and validate finiteness."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation.

    Backed by numpy's BLAS path; the naive triple-loop version lives in the
    test suite as the independent oracle.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: ({a.shape[0]}x{a.shape[1]}) @ "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul produced non-finite entries")
    return out


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x), shape preserved."""
    return np.maximum(0.0, np.asarray(x, dtype=np.float64))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm.

    A zero vector is an error rather than an epsilon fix: descriptors should
    never be zero, and silence here would mask aggregation-head bugs.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("cannot normalize non-finite vector")
    n = float(np.sqrt(np.sum(v * v)))
    if n == 0.0:
        raise NumericError("degenerate descriptor: zero vector")
    return v / n


@dataclass(frozen=True)
class SgdConfig:
    """SGD recipe: base rate, step horizon, linear warmup, optional momentum."""

    base_lr: float = 0.001
    total_steps: int = 1
    warmup_steps: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}"
            )
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def cosine_lr(step: int, cfg: SgdConfig) -> float:
    """Linear ramp 0 -> base_lr over warmup, then cosine decay to 0."""
    if not (0 <= step <= cfg.total_steps):
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    phase = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * phase))


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
    cfg: SgdConfig,
    velocity: Sequence[np.ndarray] | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One SGD update, p <- p - lr * (momentum-adjusted gradient).

    Functional: returns fresh parameter and velocity arrays. With momentum mu,
    v' = mu*v + g and p' = p - lr*v'.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params = []
    new_velocity = []
    for p, g, vel in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
        v_new = cfg.momentum * vel + g if cfg.momentum != 0.0 else g.copy()
        new_velocity.append(v_new)
        new_params.append(p - lr * v_new)
    return new_params, new_velocity


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grads: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between central differences of f and analytic grads.

    Per coordinate: |fd - an| / max(1e-8, |fd| + |an|). f must be a
    deterministic scalar function of the (single) parameter array.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    params = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(analytic_grads, dtype=np.float64)
    if params.shape != analytic.shape:
        raise ValueError(
            f"params/grads shape mismatch: {params.shape} vs {analytic.shape}"
        )
    work = params.copy()
    flat = work.reshape(-1)
    an_flat = analytic.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        f_plus = float(f(work))
        flat[k] = orig - eps
        f_minus = float(f(work))
        flat[k] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError("objective returned non-finite value during check")
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = an_flat[k]
        err = abs(fd - an) / max(1e-8, abs(fd) + abs(an))
        if err > worst:
            worst = err
    return worst
