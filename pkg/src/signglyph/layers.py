"""Layer primitives with hand-written backward passes.

Every layer follows the same small protocol:

* ``forward(x, train)`` returns the output and, when ``train`` is true,
  caches whatever ``backward`` needs;
* ``backward(grad_out)`` returns the gradient w.r.t. the input and stores
  parameter gradients in ``self.grads`` (same keys as ``self.params``).

Parameter gradients are overwritten, not accumulated, on each backward call.
"""
import numpy as np

from . import tensor
from .errors import ConfigError, ShapeError


class Layer:
    name = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, shape):
        """Shape propagation without touching data; ``shape`` excludes the batch axis."""
        return shape

    def _need_cache(self, attr):
        if getattr(self, attr, None) is None:
            raise RuntimeError(f"{self.name}: backward called without a training-mode forward")


class Conv2D(Layer):
    """Cross-correlation (no kernel flip) plus per-channel bias, via im2col.

    The batch is processed in chunks whose column matrix stays around
    ``chunk_floats`` elements; columns are rebuilt during backward rather
    than cached, which is both faster (cache-resident) and lighter on memory.
    """

    name = "conv"
    chunk_floats = 1 << 20

    def __init__(self, weights, bias, stride=1, pad=0):
        super().__init__()
        if weights.ndim != 4 or bias.shape != (weights.shape[0],):
            raise ShapeError(f"conv weights {weights.shape} / bias {bias.shape} do not pair up")
        if stride < 1 or pad < 0:
            raise ConfigError(f"conv stride must be >= 1 and pad >= 0, got {stride}, {pad}")
        self.params = {"weight": weights, "bias": bias}
        self.stride = stride
        self.pad = pad
        # the first layer of a network has no use for d(loss)/d(input)
        self.input_grad = True
        self._x = None

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params["bias"]

    def output_shape(self, shape):
        c, h, w = shape
        out_c, in_c, kh, kw = self.weight.shape
        if c != in_c:
            raise ShapeError(f"conv expects {in_c} input channels, got {c}")
        return (
            out_c,
            tensor.conv_output_size(h, kh, self.stride, self.pad),
            tensor.conv_output_size(w, kw, self.stride, self.pad),
        )

    def _chunks(self, n, oh, ow):
        k = self.weight[0].size
        step = max(1, self.chunk_floats // (k * oh * ow))
        return [(i, min(n, i + step)) for i in range(0, n, step)]

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"conv expects (n, c, h, w), got {x.shape}")
        n = x.shape[0]
        out_c, _, kh, kw = self.weight.shape
        _, oh, ow = self.output_shape(x.shape[1:])
        w2 = self.weight.reshape(out_c, -1)
        out = np.empty((n, out_c, oh, ow), dtype=np.result_type(x, w2))
        for a, b in self._chunks(n, oh, ow):
            cols = tensor.im2col(x[a:b], kh, kw, self.stride, self.pad)
            y = tensor.matmul(w2, cols)
            y += self.bias[:, None]
            out[a:b] = y.reshape(out_c, b - a, oh, ow).transpose(1, 0, 2, 3)
        self._x = x if train else None
        return out

    def backward(self, grad_out):
        self._need_cache("_x")
        x = self._x
        n = x.shape[0]
        out_c, _, kh, kw = self.weight.shape
        oh, ow = grad_out.shape[2:]
        w2 = self.weight.reshape(out_c, -1)
        dw = np.zeros_like(w2)
        dx = np.empty(x.shape, dtype=grad_out.dtype) if self.input_grad else None
        for a, b in self._chunks(n, oh, ow):
            cols = tensor.im2col(x[a:b], kh, kw, self.stride, self.pad)
            g = grad_out[a:b].transpose(1, 0, 2, 3).reshape(out_c, -1)
            dw += tensor.matmul(g, cols.T)
            if dx is None:
                continue
            dcols = tensor.matmul(w2.T, g)
            dx[a:b] = tensor.col2im(dcols, (b - a, *x.shape[1:]), kh, kw, self.stride, self.pad)
        self.grads["weight"] = dw.reshape(self.weight.shape)
        self.grads["bias"] = grad_out.sum(axis=(0, 2, 3))
        return dx


class MaxPool2D(Layer):
    """Window maximum; ties resolve to the first element in row-major window order."""

    name = "maxpool"

    def __init__(self, size=2, stride=None):
        super().__init__()
        self.size = size
        self.stride = size if stride is None else stride
        if self.size < 1 or self.stride < 1:
            raise ConfigError("pool size and stride must be >= 1")
        self._argmax = None
        self._in_shape = None

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.size or w < self.size:
            raise ShapeError(f"pool window {self.size} larger than input {h}x{w}")
        return (
            c,
            tensor.conv_output_size(h, self.size, self.stride, 0),
            tensor.conv_output_size(w, self.size, self.stride, 0),
        )

    def forward(self, x, train=False):
        _, oh, ow = self.output_shape(x.shape[1:])
        k, s = self.size, self.stride
        views = [x[:, :, i:i + s * oh:s, j:j + s * ow:s] for i in range(k) for j in range(k)]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        if train:
            # walk backwards so the earliest matching window position wins ties
            idx = np.full(out.shape, len(views) - 1, dtype=np.int16)
            for pos in range(len(views) - 2, -1, -1):
                idx[views[pos] == out] = pos
            self._argmax = idx
            self._in_shape = x.shape
        return out

    def backward(self, grad_out):
        self._need_cache("_argmax")
        k, s = self.size, self.stride
        oh, ow = grad_out.shape[2:]
        dx = np.zeros(self._in_shape, dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                hit = self._argmax == i * k + j
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(hit, grad_out, 0)
        return dx


class ReLU(Layer):
    name = "relu"

    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        self._need_cache("_mask")
        return grad_out * self._mask


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time."""

    name = "dropout"

    def __init__(self, rate, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self.mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self.mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        return x * self.mask

    def backward(self, grad_out):
        if self.mask is None:
            return grad_out
        return grad_out * self.mask


class Flatten(Layer):
    name = "flatten"

    def __init__(self):
        super().__init__()
        self._in_shape = None

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._in_shape)


class Dense(Layer):
    name = "dense"

    def __init__(self, weights, bias):
        super().__init__()
        if weights.ndim != 2 or bias.shape != (weights.shape[1],):
            raise ShapeError(f"dense weights {weights.shape} / bias {bias.shape} do not pair up")
        self.params = {"weight": weights, "bias": bias}
        self._x = None

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params["bias"]

    def output_shape(self, shape):
        if shape != (self.weight.shape[0],):
            raise ShapeError(f"dense expects {self.weight.shape[0]} features, got {shape}")
        return (self.weight.shape[1],)

    def forward(self, x, train=False):
        if train:
            self._x = x
        return tensor.matmul(x, self.weight) + self.bias

    def backward(self, grad_out):
        self._need_cache("_x")
        self.grads["weight"] = tensor.matmul(self._x.T, grad_out)
        self.grads["bias"] = grad_out.sum(axis=0)
        return tensor.matmul(grad_out, self.weight.T)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Softmax(Layer):
    """Row softmax.

    Training normally skips :meth:`backward` and feeds the fused
    softmax/cross-entropy gradient to the layer below; the general
    Jacobian-vector product is kept for completeness.
    """

    name = "softmax"

    def __init__(self):
        super().__init__()
        self._q = None

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] < 2:
            raise ShapeError(f"softmax expects (n, c) with c >= 2, got {x.shape}")
        q = softmax(x)
        if train:
            self._q = q
        return q

    def backward(self, grad_out):
        self._need_cache("_q")
        q = self._q
        return q * (grad_out - (grad_out * q).sum(axis=1, keepdims=True))
