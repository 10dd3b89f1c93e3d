"""Loss, L2 weight decay, He-uniform initialization and SGD with momentum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor
from .errors import ConfigError, InputError, ShapeError

PROB_CLIP = 1e-7
RNG_ALGORITHM = "numpy.PCG64"


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; the only source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_record(seed) -> dict:
    return {"algorithm": RNG_ALGORITHM, "seed": seed}


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. the softmax logits.

    ``probs`` must come from :func:`floodcnn.layers.softmax`; the returned
    gradient is the fused softmax+loss derivative ``(p - y) / N``.
    """
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} must both be [N,K]")
    is_binary = np.all((labels == 0) | (labels == 1))
    if not is_binary or not np.all(labels.sum(axis=1) == 1):
        raise InputError("every label row must be one-hot")
    n = probs.shape[0]
    clipped = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = -float(np.sum(labels * np.log(clipped))) / n
    grad = ((probs - labels) / n).astype(probs.dtype, copy=False)
    return loss, grad


def l2_penalty(weights: Iterable[np.ndarray], lam: float) -> tuple[float, list[np.ndarray]]:
    """``lam * sum(w**2)`` over the given tensors, plus each tensor's ``2*lam*w``.

    Callers pass only kernel/weight matrices; biases and batch-norm
    parameters are not decayed.
    """
    if lam < 0:
        raise ConfigError(f"weight-decay lambda must be >= 0, got {lam}")
    weights = list(weights)
    if lam == 0:
        return 0.0, [np.zeros_like(w) for w in weights]
    penalty = lam * sum(float(np.sum(np.square(w, dtype=np.float64))) for w in weights)
    return penalty, [(2.0 * lam) * w for w in weights]


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=None) -> np.ndarray:
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    dtype = np.dtype(dtype or tensor.get_dtype())
    shape = tensor.check_shape(shape)
    bound = np.sqrt(6.0 / fan_in)
    # draw in the target dtype to avoid a float64 copy of large FC matrices
    out = rng.random(shape, dtype=dtype if dtype in (np.float32, np.float64) else np.float64)
    out *= 2 * bound
    out -= bound
    return out.astype(dtype, copy=False)


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float) -> None:
    """Classical momentum, in place: ``v = mu*v - lr*g; w = w + v``."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape} differ")
    velocity *= momentum
    velocity -= lr * grad
    param += velocity


@dataclass
class SGD:
    lr: float = 0.001
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            sgd_momentum_step(p, grads[name], v, self.lr, self.momentum)

    def reset(self):
        self.velocity.clear()
