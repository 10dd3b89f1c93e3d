"""Central finite-difference checks of every layer's backward pass (float64)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor
from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Mode, ReLU, softmax
from .model import Model
from .optim import cross_entropy, make_rng

STEP = 1e-4
TOLERANCE = 1e-4
FLOOR = 1e-6


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=[["readwrite"]])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        plus = f()
        x[i] = orig - step
        minus = f()
        x[i] = orig
        grad[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.shape != numeric.shape:
        raise ValueError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator, forward_kwargs=None) -> dict[str, float]:
    """Compare analytic and numeric gradients of ``sum(R * layer(x))`` for a random ``R``."""
    kwargs = forward_kwargs or {}
    out = layer.forward(x, Mode.TRAIN, **kwargs)
    proj = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x, Mode.TRAIN, **kwargs) * proj))

    layer.forward(x, Mode.TRAIN, **kwargs)
    grad_x = layer.backward(proj)
    analytic = {"input": grad_x, **{k: v.copy() for k, v in layer.grads.items()}}
    errors = {"input": relative_error(analytic["input"], numerical_gradient(loss, x))}
    for name, p in layer.params.items():
        errors[name] = relative_error(analytic[name], numerical_gradient(loss, p))
    return errors


def check_model(model: Model, x: np.ndarray, targets: np.ndarray) -> dict[str, float]:
    """Whole-model gradient through softmax + cross-entropy."""

    def loss():
        return cross_entropy(model.forward(x, Mode.TRAIN), targets)[0]

    probs = model.forward(x, Mode.TRAIN)
    _, grad_logits = cross_entropy(probs, targets)
    grads = {k: v.copy() for k, v in model.backward(grad_logits).items()}
    # input gradient: rerun the chain manually from the logits
    g = grad_logits
    model.forward(x, Mode.TRAIN)
    for layer in reversed(model.layers):
        g = layer.backward(g)
    errors = {"input": relative_error(g, numerical_gradient(loss, x))}
    for name, p in model.parameters().items():
        errors[name] = relative_error(grads[name], numerical_gradient(loss, p))
    return errors


def _spread(rng, shape, gap=0.05):
    """Random values with pairwise gaps >= ``gap`` and none near zero."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap
    return rng.permutation(vals).reshape(shape)


def _conv_case(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
    h, w = (int(v) for v in rng.integers(max(k, 3), 7, size=2))
    layer = Conv2D(cin, cout, k, stride, pad)
    layer.initialize(rng)
    layer.params["bias"] = rng.standard_normal(cout)
    return layer, rng.standard_normal((2, h, w, cin)), {}


def _pool_case(rng):
    win = int(rng.integers(2, 4))
    stride = int(rng.integers(1, win + 1))
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(win, 8, size=2))
    return MaxPool2D(win, stride), _spread(rng, (2, h, w, c)), {}


def _dense_case(rng):
    din, dout = (int(v) for v in rng.integers(1, 9, size=2))
    layer = Dense(din, dout)
    layer.initialize(rng)
    layer.params["bias"] = rng.standard_normal(dout)
    return layer, rng.standard_normal((int(rng.integers(1, 5)), din)), {}


def _relu_case(rng):
    return ReLU(), _spread(rng, (2, 3, 3, 2)), {}


def _batchnorm_case(rng):
    c = int(rng.integers(1, 4))
    shape = (4, 3, 3, c) if rng.random() < 0.5 else (6, c)
    layer = BatchNorm(c)
    layer.initialize(rng)
    layer.params["gamma"] = rng.uniform(0.5, 2.0, c)
    layer.params["beta"] = rng.standard_normal(c)
    x = rng.standard_normal(shape) * rng.uniform(0.5, 3.0) + rng.uniform(-2, 2)
    return layer, x, {}


def _dropout_case(rng):
    shape = (3, 4, 4, 2)
    rate = float(rng.uniform(0.1, 0.8))
    mask = rng.random(shape) >= rate
    return Dropout(rate, rng=0), rng.standard_normal(shape), {"mask": mask}


def _flatten_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
    return Flatten(), rng.standard_normal(shape), {}


def toy_model(rng) -> Model:
    """Two weight layers: conv 3x3 -> ReLU -> pool -> flatten -> dense(2)."""
    layers = [Conv2D(2, 3, 3, 1, 1), ReLU(), MaxPool2D(2), Flatten(), Dense(12, 2)]
    model = Model(layers, (4, 4, 2), 2, "toy")
    model.initialize(rng)
    return model


LAYER_CASES = {
    "conv2d": _conv_case,
    "maxpool2d": _pool_case,
    "dense": _dense_case,
    "relu": _relu_case,
    "batchnorm": _batchnorm_case,
    "dropout": _dropout_case,
    "flatten": _flatten_case,
}


def run(trials: int = 20, seed: int = 0, kinds=None) -> dict[str, float]:
    """Max relative error per layer kind (and ``model``) over ``trials`` random cases."""
    kinds = list(kinds or [*LAYER_CASES, "model"])
    worst = {}
    with tensor.verification_mode():
        for kind in kinds:
            rng = make_rng([seed, len(kind)] + [ord(ch) for ch in kind])
            errs = []
            for _ in range(trials):
                if kind == "model":
                    model = toy_model(rng)
                    x = rng.standard_normal((3, 4, 4, 2))
                    y = np.eye(2)[rng.integers(0, 2, size=3)]
                    errs.append(max(check_model(model, x, y).values()))
                else:
                    layer, x, kwargs = LAYER_CASES[kind](rng)
                    errs.append(max(check_layer(layer, x, rng, kwargs).values()))
            worst[kind] = max(errs)
    return worst


def softmax_ce_error(rng, n: int = 4, k: int = 3) -> float:
    """Fused ``(p - y)/N`` against finite differences of ``CE(softmax(z))``."""
    z = rng.standard_normal((n, k))
    y = np.eye(k)[rng.integers(0, k, size=n)]
    _, analytic = cross_entropy(softmax(z), y)
    numeric = numerical_gradient(lambda: cross_entropy(softmax(z), y)[0], z)
    return relative_error(analytic, numeric)
