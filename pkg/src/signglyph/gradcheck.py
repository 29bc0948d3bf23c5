"""Central finite-difference gradient checking.

Independent of the backward passes it audits: it only ever calls forward
functions and perturbs parameters one element at a time.
"""
import numpy as np

from .layers import MaxPool2D, ReLU
from .training import cross_entropy


def numerical_grad(f, arr, step=1e-3):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (float(up) - float(down)) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def check_model(model, x, labels, step=1e-3):
    """Relative error of every parameter's loss gradient in ``model``.

    The loss is mean cross-entropy in eval mode, so dropout must be disabled
    (rate 0) for training- and eval-mode graphs to coincide. Returns
    ``{param_name: relative_error}``.
    """
    if any(l.rate for l in model.dropout_layers()):
        raise ValueError("gradient check needs dropout disabled")
    x = x.astype(model.dtype)
    probs = model.forward(x, train=True)
    model.backward(cross_entropy(probs, labels).grad_logits)
    analytic = {name: g.copy() for name, g in model.named_grads()}

    def loss():
        return cross_entropy(model.forward(x, train=False), labels).value

    return {name: relative_error(analytic[name], numerical_grad(loss, w, step))
            for name, w in model.named_params()}


def activation_pattern(model, x):
    """Which ReLUs are open and which element wins each pool window, as bytes.

    Two parameter settings with the same pattern lie on the same linear
    piece of the network, where central differences are exact up to
    rounding and curvature of the softmax.
    """
    model.forward(x.astype(model.dtype), train=True)
    parts = []
    for layer in model.layers:
        if isinstance(layer, ReLU):
            parts.append(np.packbits(layer._mask).tobytes())
        elif isinstance(layer, MaxPool2D):
            parts.append(layer._argmax.tobytes())
    return b"".join(parts)


def kink_crossings(model, x, step=1e-3):
    """Count single-element perturbations of size ``step`` that change the activation pattern.

    A nonzero count means some finite difference straddles a ReLU or
    max-pool switch and will not match the one-sided analytic gradient.
    """
    base = activation_pattern(model, x)
    count = 0
    for _, w in model.named_params():
        flat = w.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            for delta in (step, -step):
                flat[i] = orig + delta
                count += activation_pattern(model, x) != base
            flat[i] = orig
    return count
