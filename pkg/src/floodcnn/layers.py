"""Layers with hand-written forward and backward passes.

All image tensors are NHWC.  Each layer keeps its trainable tensors in
``params`` and the matching gradients in ``grads`` (filled by
``backward``); batch norm additionally keeps running statistics in
``buffers``.  Parameters are allocated by ``initialize`` so a network can
be described and counted without paying for its weights.
"""

from __future__ import annotations

import enum
import math
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor
from .errors import ConfigError, DegenerateBatchError, NumericError, ShapeError, StateError


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _padding4(p) -> tuple[int, int, int, int]:
    """Normalise padding to (top, bottom, left, right)."""
    if isinstance(p, (int, np.integer)):
        return (int(p),) * 4
    p = tuple(int(x) for x in p)
    if len(p) == 2:
        return p[0], p[0], p[1], p[1]
    if len(p) == 4:
        return p
    raise ConfigError(f"padding must be an int, a pair or four values, got {p}")


def conv_output_extent(size: int, pad_total: int, kernel: int, stride: int) -> int:
    return (size + pad_total - kernel) // stride + 1


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache: Any = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def num_buffers(self) -> int:
        return sum(math.prod(s) for s in self.buffer_shapes().values())

    def initialize(self, rng: np.random.Generator, dtype=None) -> None:
        pass

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, mode: Mode = Mode.INFER) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> dict:
        return {"type": self.kind}

    def _require_params(self):
        missing = set(self.param_shapes()) - set(self.params)
        if missing:
            raise StateError(f"{self.kind} layer used before initialize(): missing {sorted(missing)}")

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}.backward called without a preceding forward")
        return self._cache

    def zero_grads(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "type")
        return f"{type(self).__name__}({args})"


class Conv2D(Layer):
    """2-D convolution, weights ``[kh, kw, Cin, Cout]``, explicit zero padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, filters: int, kernel=3, stride=1, padding=0):
        super().__init__()
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _padding4(padding)
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigError(f"kernel and stride must be >= 1, got {self.kernel}, {self.stride}")
        if min(self.padding) < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")
        if self.in_channels < 1 or self.filters < 1:
            raise ConfigError("conv2d needs at least one input channel and one filter")

    @property
    def fan_in(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.in_channels

    def param_shapes(self):
        kh, kw = self.kernel
        return {"weight": (kh, kw, self.in_channels, self.filters), "bias": (self.filters,)}

    def initialize(self, rng, dtype=None):
        from .optim import he_uniform

        dtype = dtype or tensor.get_dtype()
        self.params["weight"] = he_uniform(self.param_shapes()["weight"], self.fan_in, rng, dtype)
        self.params["bias"] = np.zeros(self.filters, dtype=dtype)
        self.zero_grads()

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        pt, pb, pl, pr = self.padding
        ho = conv_output_extent(h, pt + pb, self.kernel[0], self.stride[0])
        wo = conv_output_extent(w, pl + pr, self.kernel[1], self.stride[1])
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output extent < 1 for input {tuple(input_shape)}")
        return ho, wo, self.filters

    def _columns(self, xp, ho, wo):
        kh, kw = self.kernel
        sh, sw = self.stride
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
        # [N, Ho, Wo, C, kh, kw] -> rows of (kh, kw, C) to match the weight layout
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * self.in_channels)

    def forward(self, x, mode=Mode.INFER):
        self._require_params()
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects [N,H,W,C], got {x.shape}")
        n = x.shape[0]
        ho, wo, cout = self.output_shape(x.shape[1:])
        pt, pb, pl, pr = self.padding
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(self.padding) else x
        cols = self._columns(xp, ho, wo)
        w = self.params["weight"].reshape(-1, cout)
        out = cols @ w + self.params["bias"]
        self._cache = (x.shape, xp, ho, wo)
        return out.reshape(n, ho, wo, cout)

    def backward(self, grad_out):
        x_shape, xp, ho, wo = self._require_cache()
        n, h, w_in, cin = x_shape
        kh, kw = self.kernel
        sh, sw = self.stride
        pt, _, pl, _ = self.padding
        cout = self.filters
        g = grad_out.reshape(-1, cout)
        cols = self._columns(xp, ho, wo)
        self.grads["weight"] = (cols.T @ g).reshape(kh, kw, cin, cout)
        self.grads["bias"] = g.sum(axis=0)
        dcols = (g @ self.params["weight"].reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros(xp.shape, dtype=grad_out.dtype)
        for dy in range(kh):
            for dx in range(kw):
                dxp[:, dy : dy + sh * (ho - 1) + 1 : sh, dx : dx + sw * (wo - 1) + 1 : sw, :] += dcols[:, :, :, dy, dx, :]
        return dxp[:, pt : pt + h, pl : pl + w_in, :]

    def spec(self):
        return {
            "type": self.kind,
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }


class MaxPool2D(Layer):
    """Max pooling without padding; partial windows are dropped."""

    kind = "maxpool2d"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = _pair(window)
        self.stride = _pair(stride if stride is not None else window)
        if min(self.window) < 1 or min(self.stride) < 1:
            raise ConfigError("pool window and stride must be >= 1")

    def output_shape(self, input_shape):
        h, w, c = input_shape
        ph, pw = self.window
        if ph > h or pw > w:
            raise ShapeError(f"pool window {self.window} larger than input {(h, w)}")
        return (h - ph) // self.stride[0] + 1, (w - pw) // self.stride[1] + 1, c

    def forward(self, x, mode=Mode.INFER):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d expects [N,H,W,C], got {x.shape}")
        ho, wo, c = self.output_shape(x.shape[1:])
        ph, pw = self.window
        sh, sw = self.stride
        win = sliding_window_view(x, (ph, pw), axis=(1, 2))
        win = win[:, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
        flat = win.reshape(*win.shape[:4], ph * pw)
        # argmax returns the first maximum in row-major window order
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return out

    def backward(self, grad_out):
        x_shape, arg = self._require_cache()
        n, h, w, c = x_shape
        ho, wo = arg.shape[1:3]
        dy, dx = np.divmod(arg, self.window[1])
        rows = np.arange(ho)[None, :, None, None] * self.stride[0] + dy
        cols = np.arange(wo)[None, None, :, None] * self.stride[1] + dx
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, None, None, :]
        flat = ((nn * h + rows) * w + cols) * c + cc
        grad_in = np.bincount(flat.ravel(), weights=grad_out.ravel(), minlength=n * h * w * c)
        return grad_in.reshape(x_shape).astype(grad_out.dtype, copy=False)

    def spec(self):
        return {"type": self.kind, "window": list(self.window), "stride": list(self.stride)}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if self.in_features < 1 or self.out_features < 1:
            raise ConfigError("dense layer widths must be >= 1")

    def param_shapes(self):
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def initialize(self, rng, dtype=None):
        from .optim import he_uniform

        dtype = dtype or tensor.get_dtype()
        self.params["weight"] = he_uniform(self.param_shapes()["weight"], self.in_features, rng, dtype)
        self.params["bias"] = np.zeros(self.out_features, dtype=dtype)
        self.zero_grads()

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def forward(self, x, mode=Mode.INFER):
        self._require_params()
        out = tensor.matmul(x, self.params["weight"]) + self.params["bias"]
        self._cache = x
        return out

    def backward(self, grad_out):
        x = self._require_cache()
        self.grads["weight"] = tensor.matmul(x.T, grad_out)
        self.grads["bias"] = grad_out.sum(axis=0)
        return tensor.matmul(grad_out, self.params["weight"].T)

    def spec(self):
        return {"type": self.kind, "in_features": self.in_features, "out_features": self.out_features}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode=Mode.INFER):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        mask = self._require_cache()
        return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects [N,K], got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last.

    Train mode normalizes with the (biased) batch statistics and folds them
    into the running estimates; infer mode uses the running estimates only.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.99):
        super().__init__()
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"batch-norm momentum must be in [0, 1), got {momentum}")
        if self.eps <= 0:
            raise ConfigError("batch-norm epsilon must be positive")

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def buffer_shapes(self):
        return {"running_mean": (self.channels,), "running_var": (self.channels,)}

    def initialize(self, rng=None, dtype=None):
        dtype = dtype or tensor.get_dtype()
        self.params["gamma"] = np.ones(self.channels, dtype=dtype)
        self.params["beta"] = np.zeros(self.channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(self.channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.channels, dtype=dtype)
        self.zero_grads()

    def output_shape(self, input_shape):
        if input_shape[-1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {input_shape[-1]}")
        return tuple(input_shape)

    def forward(self, x, mode=Mode.INFER):
        self._require_params()
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape}")
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if mode is Mode.TRAIN:
            count = x.size // self.channels
            if count <= 1:
                raise DegenerateBatchError("train-mode batch norm needs more than one element per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (mode, xhat, inv_std)
        return (gamma * xhat + beta).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        mode, xhat, inv_std = self._require_cache()
        axes = tuple(range(grad_out.ndim - 1))
        gamma = self.params["gamma"]
        self.grads["gamma"] = (grad_out * xhat).sum(axis=axes)
        self.grads["beta"] = grad_out.sum(axis=axes)
        dxhat = grad_out * gamma
        if mode is Mode.INFER:
            return dxhat * inv_std
        m = grad_out.size // self.channels
        return (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))

    def spec(self):
        return {"type": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5, rng: np.random.Generator | int | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = np.random.default_rng(rng)

    def initialize(self, rng, dtype=None):
        self.rng = np.random.default_rng(rng.integers(2**63))

    def forward(self, x, mode=Mode.INFER, mask=None):
        if mode is Mode.INFER or self.rate == 0.0:
            self._cache = None if mode is Mode.INFER else np.ones(x.shape, dtype=bool)
            self._scale = 1.0
            return x
        if mask is None:
            mask = self.rng.random(x.shape) >= self.rate
        elif mask.shape != x.shape:
            raise ShapeError(f"dropout mask {mask.shape} does not match input {x.shape}")
        self._cache = mask
        self._scale = 1.0 / (1.0 - self.rate)
        return (x * mask * self._scale).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        if self._cache is None:
            # infer-mode forward is the identity
            return grad_out
        return (grad_out * self._cache * self._scale).astype(grad_out.dtype, copy=False)

    def spec(self):
        return {"type": self.kind, "rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (math.prod(input_shape),)

    def forward(self, x, mode=Mode.INFER):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._require_cache())


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, MaxPool2D, Dense, ReLU, BatchNorm, Dropout, Flatten)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    try:
        cls = LAYER_TYPES[spec.pop("type")]
    except KeyError as exc:
        raise ConfigError(f"unknown layer type {exc.args[0]!r}") from None
    return cls(**spec)
