"""The classifier network: three conv blocks, two dense blocks, softmax head.

Layer sequence for the default configuration::

    [conv3x3 -> relu -> conv3x3 -> relu -> maxpool2 -> dropout(0.25)] x 3
    flatten
    [dense -> relu -> dropout(0.5)] x 2
    dense(num_classes) -> softmax

Filter counts 32/64/128 and dense widths 512/256 are defaults, not
requirements; tests and the desk-scale experiments shrink them.
"""
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numba
import numpy as np

from . import layers as L
from .errors import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    ConfigError,
    ShapeError,
    TruncatedCheckpointError,
    VersionError,
)
from .tensor import argmax_rows

MAGIC = b"SGLY"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    num_classes: int = 26
    input_side: int = 200
    input_channels: int = 3
    conv_filters: tuple = (32, 64, 128)
    kernel_side: int = 3
    pool_side: int = 2
    conv_dropout: float = 0.25
    dense_dropout: float = 0.5
    dense_widths: tuple = (512, 256)
    seed: int = 0
    # class names in label order; carried so a checkpoint can print labels
    labels: tuple = field(default=None)

    def __post_init__(self):
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.dense_widths = tuple(int(d) for d in self.dense_widths)
        if self.labels is not None:
            self.labels = tuple(str(s) for s in self.labels)

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.conv_filters) != 3 or min(self.conv_filters) < 1:
            raise ConfigError(f"conv_filters must be three positive ints, got {self.conv_filters}")
        if len(self.dense_widths) != 2 or min(self.dense_widths) < 1:
            raise ConfigError(f"dense_widths must be two positive ints, got {self.dense_widths}")
        if self.kernel_side < 1 or self.kernel_side % 2 == 0:
            raise ConfigError(f"kernel_side must be odd and positive, got {self.kernel_side}")
        if self.input_side < 1 or self.input_channels < 1 or self.pool_side < 1:
            raise ConfigError("input_side, input_channels and pool_side must be positive")
        for rate in (self.conv_dropout, self.dense_dropout):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rates must be in [0, 1), got {rate}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit int, got {self.seed}")
        if self.labels is not None and len(self.labels) != self.num_classes:
            raise ConfigError(
                f"{len(self.labels)} labels given for {self.num_classes} classes"
            )

    def to_text(self):
        """Canonical JSON: sorted keys, no whitespace, lists for tuples."""
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Model:
    def __init__(self, config, layers, names):
        self.config = config
        self.layers = layers
        self.names = names
        self.training = False

    # parameters -----------------------------------------------------------

    def named_params(self):
        out = []
        for name, layer in zip(self.names, self.layers):
            for key, arr in layer.params.items():
                out.append((f"{name}.{key}", arr))
        return out

    def named_grads(self):
        out = []
        for name, layer in zip(self.names, self.layers):
            for key in layer.params:
                out.append((f"{name}.{key}", layer.grads[key]))
        return out

    def param_count(self):
        return sum(a.size for _, a in self.named_params())

    def astype(self, dtype):
        """Copy of the model with every parameter cast to ``dtype``."""
        clone = build_model(self.config, init=False)
        for (_, dst_layer), (_, src_layer) in zip(clone._param_layers(), self._param_layers()):
            for key, arr in src_layer.params.items():
                dst_layer.params[key] = arr.astype(dtype)
        return clone

    def _param_layers(self):
        return [(n, l) for n, l in zip(self.names, self.layers) if l.params]

    @property
    def dtype(self):
        return self.named_params()[0][1].dtype

    def dropout_layers(self):
        return [l for l in self.layers if isinstance(l, L.Dropout)]

    # running --------------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def check_input(self, x):
        cfg = self.config
        want = (cfg.input_channels, cfg.input_side, cfg.input_side)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"model expects batches of shape (n, {', '.join(map(str, want))}), got {x.shape}")

    def logits(self, x, train=None):
        train = self.training if train is None else train
        self.check_input(x)
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers[:-1]:
            x = layer.forward(x, train)
        return x

    def forward(self, x, train=None):
        """Class probabilities for a batch ``(n, c, s, s)``."""
        return L.softmax(self.logits(x, train))

    __call__ = forward

    def backward(self, grad_logits):
        """Backpropagate d(loss)/d(logits); fills each layer's ``grads``."""
        g = grad_logits
        for layer in reversed(self.layers[:-1]):
            g = layer.backward(g)
        return g


def trace_shapes(config):
    """Propagate per-sample shapes through the layer plan without allocating weights.

    Returns ``[(layer_name, output_shape), ...]``; geometry problems raise
    :class:`ConfigError` naming the offending layer.
    """
    model = build_model(config, init=False)
    shape = (config.input_channels, config.input_side, config.input_side)
    trace = []
    for name, layer in zip(model.names, model.layers):
        try:
            shape = layer.output_shape(shape)
        except ConfigError as exc:
            raise ConfigError(f"layer {name}: {exc}") from None
        trace.append((name, shape))
    return trace


def build_model(config, init=True):
    """Assemble the network for ``config``.

    With ``init=True`` weights are He-normal (std sqrt(2 / fan_in)) drawn from
    a generator seeded by ``config.seed`` in layer order; biases are zero.
    ``init=False`` allocates zeros, for checkpoint loading.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    # a separate stream so dropout draws never perturb initialization
    dropout_rng = np.random.default_rng([config.seed, 1])
    k = config.kernel_side
    pad = k // 2

    def weights(shape, fan_in):
        if not init:
            return np.zeros(shape, dtype=np.float32)
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    layers, names = [], []

    def add(name, layer):
        names.append(name)
        layers.append(layer)

    in_c = config.input_channels
    side = config.input_side
    conv_id = 0
    for block, out_c in enumerate(config.conv_filters, start=1):
        for _ in range(2):
            conv_id += 1
            add(f"conv{conv_id}", L.Conv2D(
                weights((out_c, in_c, k, k), in_c * k * k),
                np.zeros(out_c, dtype=np.float32), stride=1, pad=pad))
            add(f"relu{conv_id}", L.ReLU())
            in_c = out_c
        if side < config.pool_side or side % config.pool_side:
            raise ConfigError(
                f"layer pool{block}: side {side} is not divisible by pool size {config.pool_side}"
            )
        side //= config.pool_side
        add(f"pool{block}", L.MaxPool2D(config.pool_side))
        add(f"drop{block}", L.Dropout(config.conv_dropout, dropout_rng))
    add("flatten", L.Flatten())
    width = in_c * side * side
    for i, out_w in enumerate(config.dense_widths, start=1):
        add(f"dense{i}", L.Dense(weights((width, out_w), width), np.zeros(out_w, dtype=np.float32)))
        add(f"relu_d{i}", L.ReLU())
        add(f"drop_d{i}", L.Dropout(config.dense_dropout, dropout_rng))
        width = out_w
    add("dense3", L.Dense(
        weights((width, config.num_classes), width),
        np.zeros(config.num_classes, dtype=np.float32)))
    add("softmax", L.Softmax())
    layers[0].input_grad = False
    return Model(config, layers, names)


def flatten_dim(config):
    return config.conv_filters[2] * (config.input_side // config.pool_side ** 3) ** 2


def param_count(config):
    """Closed-form parameter count, independent of any built model."""
    k2 = config.kernel_side ** 2
    total = 0
    in_c = config.input_channels
    for out_c in config.conv_filters:
        total += out_c * in_c * k2 + out_c
        total += out_c * out_c * k2 + out_c
        in_c = out_c
    width = flatten_dim(config)
    for out_w in (*config.dense_widths, config.num_classes):
        total += width * out_w + out_w
        width = out_w
    return total


def predict(model, image):
    """Classify one ``(c, s, s)`` image in eval mode; returns ``(index, probs)``."""
    if image.ndim != 3:
        raise ShapeError(f"predict expects a single (c, h, w) image, got {image.shape}")
    probs = model.forward(image[None], train=False)[0]
    return argmax_rows(probs[None])[0], probs


# checkpoints ----------------------------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a_kernel(data, h):
    prime = np.uint64(FNV_PRIME)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data, h=FNV_OFFSET):
    """64-bit FNV-1a; pass the previous return value as ``h`` to continue a stream."""
    return int(_fnv1a_kernel(np.frombuffer(data, dtype=np.uint8), np.uint64(h)))


def save_checkpoint(model, path):
    """Write ``model`` in the SGLY v1 binary layout.

    ``magic | u16 version | u32 len | config json | records... | u64 fnv1a``
    where each record is ``u8 rank | u32 dims[rank] | f32le payload`` and the
    checksum covers the concatenated payloads only.
    """
    cfg = model.config.to_text().encode("utf-8")
    h = FNV_OFFSET
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(cfg)))
        fh.write(cfg)
        for _, arr in model.named_params():
            fh.write(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            h = fnv1a64(payload, h)
            fh.write(payload)
        fh.write(struct.pack("<Q", h))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedCheckpointError(f"{path}: truncated while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"{path}: not a signglyph checkpoint (bad magic)")
    pos = 4
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = ModelConfig.from_text(bytes(take(cfg_len, "config")).decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config block: {exc}") from None
    model = build_model(config, init=False)
    h = FNV_OFFSET
    for name, layer in model._param_layers():
        for key, arr in layer.params.items():
            (rank,) = struct.unpack("<B", take(1, f"{name}.{key} rank"))
            dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name}.{key} dims"))
            if dims != arr.shape:
                raise CheckpointError(
                    f"{path}: {name}.{key} has shape {dims}, config implies {arr.shape}"
                )
            payload = take(4 * arr.size, f"{name}.{key} payload")
            h = fnv1a64(payload, h)
            layer.params[key] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (stored,) = struct.unpack("<Q", take(8, "checksum"))
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} unexpected trailing bytes")
    if stored != h:
        raise ChecksumError(f"{path}: payload checksum mismatch (stored {stored:#x}, computed {h:#x})")
    return model
