"""Dense float arrays and the few kernels the layers build on.

Tensors are plain ``numpy.ndarray`` objects in NHWC layout.  This module
pins the element type (float32 normally, float64 while verifying
gradients) and wraps the arithmetic the rest of the package relies on
with strict shape checks: nothing broadcasts except a scalar operand.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

_DTYPE = contextvars.ContextVar("floodcnn_dtype", default=np.float32)


def get_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def verification_mode():
    """Run the enclosed block with float64 tensors.

    Layers and initializers created inside the block allocate float64
    parameters, which keeps finite-difference checks tight.
    """
    token = _DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {list(dims)}")
    if math.prod(dims) > np.iinfo(np.intp).max:
        raise ShapeError(f"shape {list(dims)} exceeds the addressable range")
    return dims


def strides_for(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides (last axis fastest)."""
    strides = []
    step = 1
    for d in reversed(check_shape(shape)):
        strides.append(step)
        step *= d
    return tuple(reversed(strides))


def offset_of(index: Sequence[int], shape: Sequence[int]) -> int:
    dims = check_shape(shape)
    if len(index) != len(dims):
        raise ShapeError(f"index rank {len(index)} != shape rank {len(dims)}")
    for i, d in zip(index, dims):
        if not 0 <= i < d:
            raise ShapeError(f"index {list(index)} out of bounds for {list(dims)}")
    return sum(i * s for i, s in zip(index, strides_for(dims)))


def index_of(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    dims = check_shape(shape)
    if not 0 <= offset < math.prod(dims):
        raise ShapeError(f"offset {offset} out of bounds for {list(dims)}")
    out = []
    for s in strides_for(dims):
        q, offset = divmod(offset, s)
        out.append(q)
    return tuple(out)


def create(shape: Sequence[int], fill: float = 0.0, dtype=None) -> np.ndarray:
    return np.full(check_shape(shape), fill, dtype=dtype or get_dtype())


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


_ZIP_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def map_zip(op: str, a: np.ndarray, b) -> np.ndarray:
    """Elementwise ``add``, ``sub``, ``mul`` or ``scale``; only a scalar ``b`` broadcasts."""
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeError("scale takes a scalar operand")
        return a * b
    try:
        fn = _ZIP_OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if not np.isscalar(b) and np.shape(b) != a.shape:
        raise ShapeError(f"elementwise {op} on mismatched shapes {a.shape} and {np.shape(b)}")
    return fn(a, b)


_REDUCE_OPS = {"sum": np.sum, "mean": np.mean, "max": np.max}


def reduce(op: str, a: np.ndarray, axes: int | Iterable[int] | None = None) -> np.ndarray:
    try:
        fn = _REDUCE_OPS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    if axes is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    else:
        axes = tuple(int(x) for x in axes)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"axis {ax} invalid for rank {a.ndim}")
    return fn(a, axis=axes)
