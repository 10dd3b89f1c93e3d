"""Sequential models, the architecture catalog and checkpoint files."""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path

import numpy as np

from . import tensor
from .errors import BuildError, CheckpointError, ShapeError, StateError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    Mode,
    ReLU,
    layer_from_spec,
    softmax,
)
from .optim import make_rng, rng_record

ARCH_IDS = ("alexnet", "vgg16", "vgg3block")
CLASS_NAMES = ("damage", "no_damage")
DAMAGE = 0
NO_DAMAGE = 1
DEFAULT_INPUT_SHAPE = (128, 128, 3)


class Model:
    """An ordered stack of layers ending in a dense layer of ``num_classes`` units.

    Softmax is applied by :meth:`forward` and is not stored as a layer, so
    :meth:`backward` takes the gradient with respect to the logits.
    """

    def __init__(self, layers: list[Layer], input_shape, num_classes: int = 2, arch_id: str = "custom", metadata=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.arch_id = arch_id
        self.metadata = dict(metadata or {})
        self.shapes = self.shape_trace()
        last = self.layers[-1] if self.layers else None
        if not isinstance(last, Dense) or last.out_features != self.num_classes:
            raise BuildError(f"final layer must be Dense({self.num_classes}), got {last!r}")
        self._forwarded = False
        self.logits = None

    def shape_trace(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after every layer."""
        shape = tensor.check_shape(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
                tensor.check_shape(shape)
            except ShapeError as exc:
                raise BuildError(f"layer {i} ({layer.kind}): {exc}") from None
            out.append(tuple(shape))
        return out

    def initialize(self, rng: np.random.Generator, dtype=None):
        for layer in self.layers:
            layer.initialize(rng, dtype)
        return self

    # forward / backward

    def forward(self, batch: np.ndarray, mode: Mode = Mode.INFER) -> np.ndarray:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {batch.shape} does not match input {self.input_shape}")
        x = batch
        for layer in self.layers:
            x = layer.forward(x, mode)
        self.logits = x
        self._forwarded = mode is Mode.TRAIN
        return softmax(x)

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        if not self._forwarded:
            raise StateError("backward requires a preceding train-mode forward")
        if self.logits is not None and grad_logits.shape != self.logits.shape:
            raise ShapeError(f"grad {grad_logits.shape} does not match logits {self.logits.shape}")
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return self.gradients()

    def predict_proba(self, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
        parts = [self.forward(batch[i : i + batch_size], Mode.INFER) for i in range(0, len(batch), batch_size)]
        if not parts:
            return np.zeros((0, self.num_classes))
        return np.concatenate(parts)

    def predict(self, batch: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return predict_labels(self.predict_proba(batch), threshold)

    # parameter access

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def decayed_parameter_names(self) -> list[str]:
        """Names of conv/dense weight tensors (the ones L2 decay applies to)."""
        return [f"{i}.weight" for i, layer in enumerate(self.layers) if isinstance(layer, (Conv2D, Dense))]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                state[f"{i}.{k}"] = v.copy()
            for k, v in layer.buffers.items():
                state[f"{i}.{k}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        expected = {}
        for i, layer in enumerate(self.layers):
            for k, s in {**layer.param_shapes(), **layer.buffer_shapes()}.items():
                expected[f"{i}.{k}"] = tuple(s)
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {state[name].shape}")
        for name, value in state.items():
            idx, key = name.split(".", 1)
            layer = self.layers[int(idx)]
            target = layer.params if key in layer.param_shapes() else layer.buffers
            target[key] = value.copy()
        for layer in self.layers:
            if layer.params:
                layer.zero_grads()

    def layer_specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def __repr__(self):
        return f"Model(arch_id={self.arch_id!r}, input_shape={self.input_shape}, layers={len(self.layers)})"


def predict_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Damaged (0) iff its probability is strictly above ``threshold``; ties go to undamaged."""
    return np.where(probs[:, DAMAGE] > threshold, DAMAGE, NO_DAMAGE)


# architecture catalog
#
# Plans are lists of ("conv", filters, kernel, stride, padding), ("pool", window, stride),
# ("flatten",), ("fc", units) and ("dropout",) entries; the output layer is appended by _stack.

VGG3BLOCK_PLAN = [
    ("conv", 32, 3, 1, 1), ("conv", 32, 3, 1, 1), ("pool", 2, 2),
    ("conv", 64, 3, 1, 1), ("conv", 64, 3, 1, 1), ("pool", 2, 2),
    ("conv", 128, 3, 1, 1), ("conv", 128, 3, 1, 1), ("pool", 2, 2),
    ("flatten",), ("fc", 4096), ("fc", 4096),
]  # fmt: skip

VGG16_PLAN = (
    [("conv", 64, 3, 1, 1)] * 2 + [("pool", 2, 2)]
    + [("conv", 128, 3, 1, 1)] * 2 + [("pool", 2, 2)]
    + [("conv", 256, 3, 1, 1)] * 3 + [("pool", 2, 2)]
    + [("conv", 512, 3, 1, 1)] * 3 + [("pool", 2, 2)]
    + [("conv", 512, 3, 1, 1)] * 3 + [("pool", 2, 2)]
    + [("flatten",), ("fc", 4096), ("fc", 4096)]
)  # fmt: skip

ALEXNET_PLAN = [
    ("conv", 96, 11, 4, 0), ("pool", 3, 2),
    ("conv", 256, 5, 1, 2), ("pool", 3, 2),
    ("conv", 384, 3, 1, 1), ("conv", 384, 3, 1, 1), ("conv", 256, 3, 1, 1), ("pool", 3, 2),
    ("flatten",), ("fc", 4096), ("dropout",), ("fc", 4096), ("dropout",),
]  # fmt: skip

PLANS = {"alexnet": ALEXNET_PLAN, "vgg16": VGG16_PLAN, "vgg3block": VGG3BLOCK_PLAN}


def vgg_plan(block_widths, fc_units) -> list[tuple]:
    """Plan for a small VGG-style net: each block is 3x3 'same' convs then a 2x2 pool."""
    plan = []
    for widths in block_widths:
        widths = [widths] if isinstance(widths, int) else list(widths)
        plan += [("conv", w, 3, 1, 1) for w in widths] + [("pool", 2, 2)]
    return plan + [("flatten",)] + [("fc", u) for u in fc_units]


def _stack(plan, input_shape, num_classes, batchnorm, dropout, dropout_rate) -> list[Layer]:
    layers: list[Layer] = []
    shape = tuple(input_shape)

    def push(layer):
        nonlocal shape
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise BuildError(f"{layer.kind} layer #{len(layers)}: {exc}") from None
        layers.append(layer)

    has_dropout = any(step[0] == "dropout" for step in plan)
    for step in plan:
        kind = step[0]
        if kind == "conv":
            _, filters, k, s, p = step
            push(Conv2D(shape[-1], filters, k, s, p))
            if batchnorm:
                push(BatchNorm(filters))
            push(ReLU())
        elif kind == "pool":
            push(MaxPool2D(step[1], step[2]))
        elif kind == "flatten":
            push(Flatten())
        elif kind == "fc":
            push(Dense(shape[0], step[1]))
            push(ReLU())
            if dropout and not has_dropout:
                push(Dropout(dropout_rate))
        elif kind == "dropout":
            push(Dropout(dropout_rate))
        else:
            raise BuildError(f"unknown plan step {step!r}")
    push(Dense(shape[0], num_classes))
    return layers


def build(
    arch_id,
    input_shape=DEFAULT_INPUT_SHAPE,
    num_classes: int = 2,
    rng=None,
    *,
    seed: int | None = None,
    batchnorm: bool = False,
    dropout: bool = False,
    dropout_rate: float = 0.5,
    initialize: bool = True,
    dtype=None,
) -> Model:
    """Build a catalog architecture (or a custom plan) and He-initialize it.

    ``arch_id`` is one of ``alexnet``, ``vgg16``, ``vgg3block`` or a plan
    list as produced by :func:`vgg_plan`.  ``batchnorm`` inserts a batch
    norm between every convolution and its ReLU; ``dropout`` inserts a
    dropout after every hidden fully-connected layer (AlexNet has those
    already).  With ``initialize=False`` the layers are described but no
    weights are allocated, which is enough for shape and parameter
    accounting.
    """
    if isinstance(arch_id, str):
        if arch_id not in PLANS:
            raise BuildError(f"unknown architecture {arch_id!r}; expected one of {ARCH_IDS}")
        plan, name = PLANS[arch_id], arch_id
    else:
        plan, name = list(arch_id), "custom"
    layers = _stack(plan, input_shape, num_classes, batchnorm, dropout, dropout_rate)
    metadata = {
        "seed": seed,
        "config": {"batchnorm": batchnorm, "dropout": dropout, "dropout_rate": dropout_rate},
        "class_names": list(CLASS_NAMES),
    }
    model = Model(layers, input_shape, num_classes, name, metadata)
    if initialize:
        if rng is None:
            rng = make_rng(seed)
        model.initialize(rng, dtype)
    return model


def count_parameters(model: Model) -> dict:
    """Per-layer trainable counts (plus non-trainable batch-norm statistics) and totals."""
    rows = []
    for layer, shape in zip(model.layers, model.shapes):
        rows.append(
            {
                "layer": describe_layer(layer),
                "output_shape": shape,
                "trainable": layer.num_params(),
                "non_trainable": layer.num_buffers(),
            }
        )
    return {
        "input_shape": model.input_shape,
        "rows": rows,
        "total": sum(r["trainable"] for r in rows),
        "non_trainable_total": sum(r["non_trainable"] for r in rows),
    }


def describe_layer(layer: Layer) -> str:
    if isinstance(layer, Conv2D):
        kh, kw = layer.kernel
        text = f"2-D Convolutional {layer.filters}@({kh}x{kw})"
        if layer.stride != (1, 1):
            text += f" /{layer.stride[0]}"
        return text
    if isinstance(layer, MaxPool2D):
        return f"2-D Max pooling ({layer.window[0]}x{layer.window[1]})"
    if isinstance(layer, Dense):
        return "Fully Connected"
    if isinstance(layer, Flatten):
        return "Flattening"
    if isinstance(layer, BatchNorm):
        return "Batch normalization"
    if isinstance(layer, Dropout):
        return f"Dropout ({layer.rate:g})"
    if isinstance(layer, ReLU):
        return "ReLU"
    return layer.kind


def format_shape(shape) -> str:
    return "(" + ", ".join(str(d) for d in shape) + (",)" if len(shape) == 1 else ")")


def parameter_table(model: Model, include_activations: bool = False) -> str:
    """Text table with the layer / output shape / trainable-count columns."""
    counts = count_parameters(model)
    lines = [("Layer Type", "Output Shape", "Number of Trainable Parameters")]
    lines.append(("Input", format_shape(model.input_shape), "0"))
    for row, layer in zip(counts["rows"], model.layers):
        if isinstance(layer, ReLU) and not include_activations:
            continue
        lines.append((row["layer"], format_shape(row["output_shape"]), f"{row['trainable']:,}"))
    widths = [max(len(line[i]) for line in lines) for i in range(3)]
    out = [f"{a:<{widths[0]}}  {b:<{widths[1]}}  {c:>{widths[2]}}" for a, b, c in lines]
    out.append(f"Total: {counts['total']:,}")
    if counts["non_trainable_total"]:
        out.append(f"Non-trainable: {counts['non_trainable_total']:,}")
    return "\n".join(out)


# checkpoints
#
# layout (little-endian):
#   8-byte magic | u32 format version | u32 metadata length | metadata (UTF-8 JSON)
#   u32 tensor count | per tensor: u16 name length, name, u8 dtype code (f4/f8),
#   u8 rank, u32 extents..., raw element bytes

MAGIC = b"FLDCNN\x00\x1a"
FORMAT_VERSION = 1
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(model: Model, path, rng_seed=None, history: dict | None = None) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "arch_id": model.arch_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "class_names": model.metadata.get("class_names", list(CLASS_NAMES)),
        "layers": model.layer_specs(),
        "build": model.metadata.get("config", {}),
        "rng": rng_record(rng_seed if rng_seed is not None else model.metadata.get("seed")),
        "history": history or model.metadata.get("history", {}),
    }
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        code = arr.dtype.itemsize
        if arr.dtype.kind != "f" or code not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a floodcnn checkpoint (bad magic bytes)")
    version, meta_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata block: {exc}") from exc
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _DTYPE_CODES[code]
        raw = r.take(math.prod(shape) * dtype.itemsize)
        state[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after last tensor")
    return meta, state


def load_checkpoint(path, expected_arch: str | None = None) -> Model:
    """Rebuild the model recorded in ``path``; nothing is returned on any error."""
    meta, state = read_checkpoint(path)
    arch = meta.get("arch_id")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: checkpoint holds a {arch!r} model, expected {expected_arch!r}")
    try:
        layers = [layer_from_spec(s) for s in meta["layers"]]
        model = Model(layers, meta["input_shape"], meta["num_classes"], arch)
        if arch in PLANS:
            reference = build(arch, meta["input_shape"], meta["num_classes"], initialize=False, **_build_flags(meta))
            if reference.layer_specs() != model.layer_specs():
                raise CheckpointError(f"{path}: layer stack does not match architecture {arch!r}")
        model.load_state_dict(state)
    except (KeyError, TypeError, ShapeError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not describe a valid model: {exc}") from exc
    model.metadata.update(
        {
            "seed": meta.get("rng", {}).get("seed"),
            "rng": meta.get("rng"),
            "config": meta.get("build", {}),
            "class_names": meta.get("class_names", list(CLASS_NAMES)),
            "history": meta.get("history", {}),
        }
    )
    return model


def _build_flags(meta) -> dict:
    b = meta.get("build", {})
    return {
        "batchnorm": bool(b.get("batchnorm", False)),
        "dropout": bool(b.get("dropout", False)),
        "dropout_rate": float(b.get("dropout_rate", 0.5)),
    }
