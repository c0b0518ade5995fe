"""Five small convolutional classifiers: definition, training, serialization.

All architectures share the 3x32x32 input and a 10-logit head so any subset
can be attacked jointly. Weights are float64 and training is bit-reproducible
per seed.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import ArchitectureError, DataError, FormatError, NumericsError, ShapeError

MODEL_MAGIC = b"APZM"
MODEL_VERSION = 1
_META_MAGIC = b"META"


# ---------------------------------------------------------------------------
# layer specs and architectures


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Pool:
    window: int
    stride: int


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Relu:
    pass


LayerSpec = Conv | Pool | Dense | Relu


@dataclass(frozen=True)
class Architecture:
    name: str
    layers: tuple
    input_shape: tuple = (3, 32, 32)
    n_classes: int = 10

    def validate(self) -> tuple:
        """Chain layer shapes from the input; return the per-layer output shapes."""
        c, h, w = self.input_shape
        flat = None  # set once a Dense flattens spatial structure
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if flat is not None:
                    raise ArchitectureError(f"{self.name}: conv layer {i} after dense head")
                if layer.filters < 1 or layer.kernel < 1 or layer.stride < 1 or layer.pad < 0:
                    raise ArchitectureError(f"{self.name}: invalid conv spec at layer {i}: {layer}")
                h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                c = layer.filters
                if h < 1 or w < 1:
                    raise ArchitectureError(f"{self.name}: conv layer {i} collapses the feature map")
            elif isinstance(layer, Pool):
                if flat is not None:
                    raise ArchitectureError(f"{self.name}: pool layer {i} after dense head")
                if layer.window < 1 or layer.stride < 1:
                    raise ArchitectureError(f"{self.name}: invalid pool spec at layer {i}: {layer}")
                if h < layer.window or w < layer.window:
                    raise ArchitectureError(f"{self.name}: pool layer {i} window does not fit")
                h = (h - layer.window) // layer.stride + 1
                w = (w - layer.window) // layer.stride + 1
            elif isinstance(layer, Dense):
                if layer.width < 1:
                    raise ArchitectureError(f"{self.name}: invalid dense width at layer {i}")
                flat = c * h * w if flat is None else flat
                flat = layer.width if False else flat  # fan-in tracked below
                shapes.append(("dense", flat, layer.width))
                flat = layer.width
                continue
            elif isinstance(layer, Relu):
                pass
            else:
                raise ArchitectureError(f"{self.name}: unknown layer kind {layer!r}")
            shapes.append(("map", c, h, w) if flat is None else ("vec", flat))
        last = self.layers[-1] if self.layers else None
        if not isinstance(last, Dense) or last.width != self.n_classes:
            raise ArchitectureError(f"{self.name}: final layer must be dense with width {self.n_classes}")
        return tuple(shapes)


def zoo_architectures() -> list[Architecture]:
    """The five stock architectures (2-4 conv blocks, widths 8-64)."""
    return [
        Architecture("cnn-a", (
            Conv(16, 3, 1, 1), Relu(), Pool(2, 2),
            Conv(32, 3, 1, 1), Relu(), Pool(2, 2),
            Dense(64), Relu(), Dense(10),
        )),
        Architecture("cnn-b", (
            Conv(8, 3, 1, 1), Relu(), Pool(2, 2),
            Conv(16, 3, 1, 1), Relu(), Pool(2, 2),
            Conv(32, 3, 1, 1), Relu(), Pool(2, 2),
            Dense(64), Relu(), Dense(10),
        )),
        Architecture("cnn-c", (
            Conv(12, 5, 1, 2), Relu(), Pool(2, 2),
            Conv(24, 5, 1, 2), Relu(), Pool(2, 2),
            Dense(48), Relu(), Dense(10),
        )),
        Architecture("cnn-d", (
            Conv(16, 3, 2, 1), Relu(),
            Conv(32, 3, 2, 1), Relu(),
            Conv(64, 3, 2, 1), Relu(),
            Dense(64), Relu(), Dense(10),
        )),
        Architecture("cnn-e", (
            Conv(8, 3, 1, 1), Relu(),
            Conv(16, 3, 1, 1), Relu(), Pool(2, 2),
            Conv(32, 3, 1, 1), Relu(), Pool(2, 2),
            Conv(32, 3, 1, 1), Relu(), Pool(2, 2),
            Dense(32), Relu(), Dense(10),
        )),
    ]


# ---------------------------------------------------------------------------
# classifier


@dataclass
class TrainMeta:
    seed: int = 0
    epochs: int = 0
    final_test_accuracy: float = 0.0
    config_hash: str = ""
    master_seed: int = 0


@dataclass
class Classifier:
    arch: Architecture
    weights: list  # one dict per layer: conv {"w"}, dense {"w","b"}, else {}
    meta: TrainMeta = field(default_factory=TrainMeta)

    @property
    def name(self) -> str:
        return self.arch.name

    def predict_log_prob(self, images) -> ad.Tensor:
        return predict_log_prob(self, images)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Argmax class per image; ties resolve to the lowest class index."""
        logp = predict_log_prob(self, images).data
        return np.argmax(logp, axis=1)

    def copy(self) -> "Classifier":
        return Classifier(
            arch=self.arch,
            weights=[{k: v.copy() for k, v in layer.items()} for layer in self.weights],
            meta=replace(self.meta),
        )


def init_classifier(arch: Architecture, seed: int) -> Classifier:
    """He-style fan-in initialization, deterministic per (arch, seed)."""
    arch.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    c, h, w = arch.input_shape
    flat = None
    weights = []
    for layer in arch.layers:
        if isinstance(layer, Conv):
            fan_in = c * layer.kernel * layer.kernel
            wts = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.filters, c, layer.kernel, layer.kernel))
            weights.append({"w": wts})
            h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            c = layer.filters
        elif isinstance(layer, Pool):
            weights.append({})
            h = (h - layer.window) // layer.stride + 1
            w = (w - layer.window) // layer.stride + 1
        elif isinstance(layer, Dense):
            fan_in = c * h * w if flat is None else flat
            flat = layer.width
            wts = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, layer.width))
            weights.append({"w": wts, "b": np.zeros(layer.width)})
        else:
            weights.append({})
    return Classifier(arch=arch, weights=weights, meta=TrainMeta(seed=seed))


def _forward(model: Classifier, x: ad.Tensor, weight_tensors=None) -> ad.Tensor:
    """Logits for x[B,C,H,W]; weight_tensors substitutes tape leaves in training."""
    flat = False
    t = x
    for i, layer in enumerate(model.arch.layers):
        params = weight_tensors[i] if weight_tensors is not None else model.weights[i]
        if isinstance(layer, Conv):
            t = ad.conv2d(t, params["w"], stride=layer.stride, pad=layer.pad)
        elif isinstance(layer, Pool):
            t = ad.maxpool2d(t, layer.window, layer.stride)
        elif isinstance(layer, Relu):
            t = ad.relu(t)
        elif isinstance(layer, Dense):
            if not flat:
                b = t.shape[0]
                t = ad.reshape(t, (b, -1))
                flat = True
            t = ad.add(ad.matmul(t, params["w"]), params["b"])
    return t


def predict_log_prob(model: Classifier, images) -> ad.Tensor:
    """Row-wise log-probabilities for images[B,C,H,W]; differentiable in images."""
    x = images if isinstance(images, ad.Tensor) else ad.Tensor.const(images)
    expected = model.arch.input_shape
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"predict_log_prob: expected [B,{expected[0]},{expected[1]},{expected[2]}], got {tuple(x.shape)}")
    return ad.log_softmax(_forward(model, x))


def accuracy(model: Classifier, data: Dataset, split: str = "test", batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions on a split."""
    images, labels = data.split(split)
    if len(labels) == 0:
        raise DataError(f"accuracy: empty {split} split")
    correct = 0
    for start in range(0, len(labels), batch_size):
        pred = model.predict(images[start : start + batch_size])
        correct += int((pred == labels[start : start + batch_size]).sum())
    return correct / len(labels)


def train(
    model: Classifier,
    data: Dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float = 0.9,
    seed: int = 0,
) -> tuple[Classifier, dict]:
    """SGD with momentum on cross-entropy. Returns a trained copy plus
    per-epoch history {"train_loss": [...], "test_accuracy": [...]}.

    lr = 0 is allowed and leaves the weights untouched (useful as a no-op
    baseline); negative values are rejected.
    """
    if epochs < 1 or batch_size < 1:
        raise DataError(f"train: epochs={epochs}, batch_size={batch_size} must be >= 1")
    if lr < 0:
        raise DataError(f"train: lr={lr} must be >= 0")
    train_images, train_labels = data.split("train")
    n = len(train_labels)
    if n == 0:
        raise DataError("train: empty train split")

    out = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    velocity = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in out.weights]
    history = {"train_loss": [], "test_accuracy": []}

    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            xb = train_images[idx]
            yb = train_labels[idx]
            with ad.Tape() as tape:
                leaves = [
                    {k: tape.leaf(v) for k, v in layer.items()} for layer in out.weights
                ]
                logits = _forward(out, ad.Tensor.const(xb), weight_tensors=leaves)
                logp = ad.log_softmax(logits)
                loss = ad.scale(ad.mean_all(ad.pick_class(logp, yb)), -1.0)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericsError(f"train: non-finite loss at epoch {epoch}, batch {bi}")
            loss_sum += loss_val * len(idx)
            grads = ad.backward(loss, tape)
            for layer_w, layer_v, layer_l in zip(out.weights, velocity, leaves):
                for k in layer_w:
                    g = grads.wrt(layer_l[k]).data
                    layer_v[k] = momentum * layer_v[k] + g
                    layer_w[k] = layer_w[k] - lr * layer_v[k]
        history["train_loss"].append(loss_sum / n)
        history["test_accuracy"].append(accuracy(out, data, "test"))

    out.meta = replace(
        out.meta, seed=seed, epochs=epochs, final_test_accuracy=history["test_accuracy"][-1]
    )
    return out, history


# ---------------------------------------------------------------------------
# binary serialization
#
# Layout (little-endian): magic "APZM", u32 version, u32 name length + UTF-8
# name, architecture block (u32 C,H,W,K, u32 layer count, tagged per-layer
# records), weight tensors in declaration order (u32 rank, u32 extents, f64
# values), then a trailing "META" block with the training seed/epochs/test
# accuracy and the run's config hash + master seed.

_TAG_CONV, _TAG_POOL, _TAG_DENSE, _TAG_RELU = 1, 2, 3, 4


class _Reader:
    def __init__(self, blob: bytes, name: str):
        self.blob = blob
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.name}: truncated (needed {n} more bytes)", offset=self.pos)
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, count: int) -> np.ndarray:
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _serialize_model(model: Classifier) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    name = model.arch.name.encode("utf-8")
    buf.write(struct.pack("<I", len(name)))
    buf.write(name)
    c, h, w = model.arch.input_shape
    buf.write(struct.pack("<IIII", c, h, w, model.arch.n_classes))
    buf.write(struct.pack("<I", len(model.arch.layers)))
    for layer in model.arch.layers:
        if isinstance(layer, Conv):
            buf.write(struct.pack("<BIIII", _TAG_CONV, layer.filters, layer.kernel, layer.stride, layer.pad))
        elif isinstance(layer, Pool):
            buf.write(struct.pack("<BII", _TAG_POOL, layer.window, layer.stride))
        elif isinstance(layer, Dense):
            buf.write(struct.pack("<BI", _TAG_DENSE, layer.width))
        else:
            buf.write(struct.pack("<B", _TAG_RELU))
    for layer in model.weights:
        for key in sorted(layer):
            arr = layer[key]
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.astype("<f8").tobytes())
    meta = model.meta
    buf.write(_META_MAGIC)
    buf.write(struct.pack("<QId", meta.seed, meta.epochs, meta.final_test_accuracy))
    hash_bytes = meta.config_hash.encode("utf-8")
    buf.write(struct.pack("<I", len(hash_bytes)))
    buf.write(hash_bytes)
    buf.write(struct.pack("<Q", meta.master_seed))
    return buf.getvalue()


def save_model(model: Classifier, path: str):
    """Write atomically: temp file in the same directory, then rename."""
    blob = _serialize_model(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_model(path: str) -> Classifier:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, os.path.basename(path))
    if r.take(4) != MODEL_MAGIC:
        raise FormatError(f"{r.name}: bad magic, expected {MODEL_MAGIC!r}", offset=0)
    version = r.u32()
    if version != MODEL_VERSION:
        raise FormatError(f"{r.name}: unsupported version {version}", offset=4)
    name_len = r.u32()
    name = r.take(name_len).decode("utf-8")
    c, h, w, k = (r.u32() for _ in range(4))
    n_layers = r.u32()
    layers = []
    for _ in range(n_layers):
        tag = r.take(1)[0]
        if tag == _TAG_CONV:
            layers.append(Conv(r.u32(), r.u32(), r.u32(), r.u32()))
        elif tag == _TAG_POOL:
            layers.append(Pool(r.u32(), r.u32()))
        elif tag == _TAG_DENSE:
            layers.append(Dense(r.u32()))
        elif tag == _TAG_RELU:
            layers.append(Relu())
        else:
            raise FormatError(f"{r.name}: unknown layer tag {tag}", offset=r.pos - 1)
    arch = Architecture(name, tuple(layers), input_shape=(c, h, w), n_classes=k)
    try:
        arch.validate()
    except ArchitectureError as e:
        raise FormatError(f"{r.name}: stored architecture invalid: {e}", offset=r.pos) from e
    ref = init_classifier(arch, seed=0)
    weights = []
    for layer in ref.weights:
        loaded = {}
        for key in sorted(layer):
            rank = r.u32()
            shape = tuple(r.u32() for _ in range(rank))
            if shape != layer[key].shape:
                raise FormatError(
                    f"{r.name}: weight {key} shape {shape} does not match spec {layer[key].shape}",
                    offset=r.pos,
                )
            loaded[key] = r.f64_array(int(np.prod(shape))).reshape(shape)
        weights.append(loaded)
    if r.take(4) != _META_MAGIC:
        raise FormatError(f"{r.name}: missing metadata block", offset=r.pos - 4)
    seed, epochs, acc = struct.unpack("<QId", r.take(20))
    hash_len = r.u32()
    config_hash = r.take(hash_len).decode("utf-8")
    master_seed = r.u64()
    if r.pos != len(blob):
        raise FormatError(f"{r.name}: {len(blob) - r.pos} trailing bytes", offset=r.pos)
    meta = TrainMeta(seed=seed, epochs=epochs, final_test_accuracy=acc,
                     config_hash=config_hash, master_seed=master_seed)
    return Classifier(arch=arch, weights=weights, meta=meta)


def model_digest(model: Classifier) -> str:
    """Stable hex digest of a serialized model (identity for provenance)."""
    return hashlib.sha256(_serialize_model(model)).hexdigest()[:16]
