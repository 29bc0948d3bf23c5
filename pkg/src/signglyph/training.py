"""Loss, optimizer, and the epoch loop."""
import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, IOFailure, ShapeError
from .tensor import argmax_rows

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


@dataclass
class LossOutput:
    value: float
    grad_logits: np.ndarray


def cross_entropy(probs, labels):
    """Mean categorical cross-entropy of predicted rows against integer labels.

    The gradient returned is w.r.t. the *logits* that produced ``probs``
    through a softmax: ``(probs - onehot) / n``.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
    n, c = probs.shape
    if n == 0:
        raise ConfigError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    picked = np.clip(probs[rows, labels].astype(np.float64), PROB_FLOOR, 1.0)
    value = float(-np.log(picked).sum() / n)
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return LossOutput(value, grad)


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    lr_decay: float = 1.0

    def validate(self):
        # lr == 0 is allowed: it freezes the parameters, which is a useful check
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr_decay > 0:
            raise ConfigError(f"lr decay must be positive, got {self.lr_decay}")

    def lr_at(self, epoch):
        """Learning rate used during 1-based ``epoch``."""
        return self.learning_rate * self.lr_decay ** (epoch - 1)


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """In-place SGD update over parallel lists of arrays.

    Plain: ``w -= lr * g``. With momentum ``mu``: ``v = mu * v + g; w -= lr * v``.
    ``velocity`` is a list of buffers the same shapes as ``params``, created by
    the caller (see :class:`SGD`).
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape:
            raise ShapeError(f"parameter {i}: shape {w.shape} vs gradient {g.shape}")
        if momentum:
            v = velocity[i]
            if v.shape != w.shape:
                raise ShapeError(f"parameter {i}: shape {w.shape} vs velocity {v.shape}")
            v *= momentum
            v += g
            g = v
        w -= w.dtype.type(lr) * g


class SGD:
    """Mini-batch SGD over a model's parameters, holding momentum buffers."""

    def __init__(self, model, config):
        config.validate()
        self.model = model
        self.config = config
        self.lr = config.learning_rate
        self.velocity = [np.zeros_like(w) for _, w in model.named_params()]

    def step(self):
        params = [w for _, w in self.model.named_params()]
        grads = [g for _, g in self.model.named_grads()]
        sgd_step(params, grads, self.lr, self.config.momentum, self.velocity)


class ConfusionMatrix:
    """Counts indexed ``[true, predicted]``."""

    def __init__(self, num_classes):
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, true, pred):
        np.add.at(self.counts, (np.asarray(true), np.asarray(pred)), 1)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def write_csv(self, path, labels=None):
        c = self.counts.shape[0]
        labels = list(labels) if labels is not None else [str(i) for i in range(c)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *labels])
            for name, row in zip(labels, self.counts):
                w.writerow([name, *(int(v) for v in row)])


def train_epoch(model, batches, optimizer):
    """One pass over ``batches`` of ``(x, labels)``; returns (mean loss, accuracy).

    Loss and accuracy are sample-weighted over the running training-mode
    forward passes.
    """
    model.train()
    loss_sum, correct, seen = 0.0, 0, 0
    for batch in batches:
        x, y = batch[0], np.asarray(batch[1])
        probs = model.forward(x, train=True)
        out = cross_entropy(probs, y)
        model.backward(out.grad_logits)
        optimizer.step()
        loss_sum += out.value * len(y)
        correct += int((np.asarray(argmax_rows(probs)) == y).sum())
        seen += len(y)
    if seen == 0:
        raise ConfigError("training split is empty")
    return loss_sum / seen, correct / seen


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: ConfusionMatrix


def evaluate(model, batches, num_classes=None):
    """Eval-mode loss, accuracy, and confusion matrix. Parameters are untouched."""
    model.eval()
    num_classes = num_classes or model.config.num_classes
    cm = ConfusionMatrix(num_classes)
    loss_sum, seen = 0.0, 0
    for batch in batches:
        x, y = batch[0], np.asarray(batch[1])
        probs = model.forward(x, train=False)
        loss_sum += cross_entropy(probs, y).value * len(y)
        cm.add(y, argmax_rows(probs))
        seen += len(y)
    if seen == 0:
        raise ConfigError("evaluation split is empty")
    return EvalResult(loss_sum / seen, cm.accuracy, cm)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0

    def row(self, timing=True):
        return [
            str(self.epoch),
            f"{self.train_loss:.6f}",
            f"{self.train_acc:.6f}",
            f"{self.val_loss:.6f}",
            f"{self.val_acc:.6f}",
            f"{self.seconds:.3f}" if timing else "0.000",
        ]


class MetricsWriter:
    """Append-only CSV sink, flushed after every row.

    With ``timing=False`` the seconds column is written as ``0.000`` so that
    repeated runs produce byte-identical files.
    """

    def __init__(self, path, timing=False):
        self.path = path
        self.timing = timing
        try:
            self._fh = open(path, "w", newline="")
        except OSError as exc:
            raise IOFailure(f"cannot open metrics file {path}: {exc}") from None
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._fh.flush()

    def write(self, m):
        try:
            self._writer.writerow(m.row(self.timing))
            self._fh.flush()
        except OSError as exc:
            raise IOFailure(f"writing {self.path}: {exc}") from None

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    """Parse a metrics CSV; malformed lines raise :class:`DataError` naming the line."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(METRICS_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                if len(rec) != len(METRICS_HEADER):
                    raise ValueError(f"expected {len(METRICS_HEADER)} fields, got {len(rec)}")
                vals = [float(v) for v in rec[1:]]
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite value")
                rows.append(EpochMetrics(int(rec[0]), *vals))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed metrics row: {exc}") from None
    return rows


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_val_acc: float = -1.0
    best_epoch: int = 0


def fit(model, train_batches, val_batches, config, sink=None, train_eval_batches=None,
        on_best=None, stop_after=None):
    """Train for ``config.epochs`` epochs and return a :class:`FitResult`.

    ``train_batches(epoch)`` returns the shuffled (and possibly augmented)
    batches for 1-based ``epoch``; ``val_batches()`` and
    ``train_eval_batches()`` return fixed, unaugmented batches. When
    ``train_eval_batches`` is given the reported training loss/accuracy come
    from an eval-mode pass over it, otherwise from the running training-mode
    figures. ``on_best(model, metrics)`` fires whenever validation accuracy
    improves; ``stop_after`` ends the run after that many epochs without
    improvement.
    """
    config.validate()
    opt = SGD(model, config)
    result = FitResult()
    stale = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = config.lr_at(epoch)
        train_loss, train_acc = train_epoch(model, train_batches(epoch), opt)
        if train_eval_batches is not None:
            tr = evaluate(model, train_eval_batches())
            train_loss, train_acc = tr.loss, tr.accuracy
        va = evaluate(model, val_batches())
        m = EpochMetrics(epoch, train_loss, train_acc, va.loss, va.accuracy,
                         time.perf_counter() - t0)
        result.history.append(m)
        log.info("epoch %d  train %.4f/%.4f  val %.4f/%.4f  (%.1fs)",
                 epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc, m.seconds)
        if sink is not None:
            sink.write(m)
        if m.val_acc > result.best_val_acc:
            result.best_val_acc, result.best_epoch = m.val_acc, epoch
            stale = 0
            if on_best is not None:
                on_best(model, m)
        else:
            stale += 1
            if stop_after is not None and stale >= stop_after:
                break
    return result
