"""Dense float kernels.

Tensors are plain ``numpy.ndarray`` objects in (n, c, h, w) row-major order,
float32 unless a caller deliberately upcasts (the gradient checker does).
None of these functions modify their inputs.
"""
import numpy as np

from .errors import ShapeError


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if k < 1 or stride < 1 or pad < 0 or span < 0 or span % stride:
        raise ShapeError(
            f"kernel {k} with stride {stride} and pad {pad} does not tile an axis of {size}"
        )
    return span // stride + 1


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold receptive fields into columns.

    Returns a ``(c*kh*kw, n*oh*ow)`` matrix. Row index runs over (c, i, j)
    of the kernel and column index over (n, y, x) of the output, so a
    convolution is ``weights.reshape(outC, -1) @ im2col(x, ...)``.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    # channel-major padded copy so every slice below reads contiguous rows
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i_end:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols, out_shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: overlapping patch entries are summed."""
    n, c, h, w = out_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if cols.shape != (c * kh * kw, n * oh * ow):
        raise ShapeError(
            f"col2im: columns {cols.shape} inconsistent with image {tuple(out_shape)} "
            f"and kernel {kh}x{kw}"
        )
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    img = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            img[:, :, i:i_end:stride, j:j + stride * ow:stride] += cols[:, i, j]
    img = img.transpose(1, 0, 2, 3)
    if pad:
        img = img[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(img)


def argmax_rows(x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"argmax_rows expects (n, c) with c >= 1, got {x.shape}")
    # np.argmax returns the first occurrence, i.e. the lowest index on ties
    return [int(k) for k in np.argmax(x, axis=1)]
