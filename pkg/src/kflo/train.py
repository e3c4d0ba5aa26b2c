"""Momentum-SGD training loop with per-class weight decay and EMA tracking.

Weight decay is applied by parameter class: ordinary weights get
``wd_plain`` added to their gradient, cascade pointwise kernels get the
weak ``wd_cascade`` (1e-9 by default), base kernels and biases get none.
The deployed-kernel decay ``wd_collapsed`` is a loss term
``wd * 0.5 * ||W'||^2`` on each collapsed kernel, so its gradient reaches
the base kernel and the cascade through the tape; the collapsed kernel is
a derived tensor, not a parameter.

The loop is single-threaded over steps and bit-deterministic for a fixed
seed and backend.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tape
from .data import Dataset
from .errors import ConfigError, DivergenceError, UsageError
from .model import (MODE_TRAINING, ModelGraph, forward, forward_on_tape,
                    iter_params, training_macs_per_step)


@dataclass
class TrainConfig:
    lr: float = 0.05
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    wd_plain: float = 5e-4
    wd_cascade: float = 1e-9
    wd_collapsed: float = 5e-4
    ema_decay: float | None = None
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    data_fraction: float = 1.0
    augment: bool = False


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    wall_seconds: float
    macs_per_step: int
    ema_test_acc: float | None = None


def lr_at(config: TrainConfig, epoch: int) -> float:
    lr = config.lr
    for milestone in config.lr_milestones:
        if epoch >= milestone:
            lr *= config.lr_decay
    return lr


_DECAY_BY_KIND = {"plain": "wd_plain", "cascade": "wd_cascade"}


def sgd_step(params, config: TrainConfig, epoch: int, velocity: dict):
    """One momentum-SGD update: v = momentum*v + (g + wd*w); w -= lr*v.

    Decay factor selected by parameter class (base kernels and biases get
    none). Raises DivergenceError naming the parameter if the update
    produces non-finite values.
    """
    lr = lr_at(config, epoch)
    for p in params:
        wd = getattr(config, _DECAY_BY_KIND.get(p.kind, ""), 0.0)
        dt = p.value.dtype.type
        g = p.grad if wd == 0.0 else p.grad + dt(wd) * p.value
        v = velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.value)
            velocity[p.name] = v
        if config.momentum:
            v *= dt(config.momentum)
            v += g
        else:
            v[...] = g
        p.value -= dt(lr) * v
        if not np.isfinite(p.value).all():
            raise DivergenceError(f"non-finite values in {p.name!r} after update")
        p.bump()


def ema_update(shadow: dict, params, decay: float):
    """shadow <- decay * shadow + (1 - decay) * param, elementwise."""
    if not 0 <= decay < 1:
        raise ConfigError(f"EMA decay must be in [0, 1), got {decay}")
    for p in params:
        s = shadow.get(p.name)
        if s is None:
            shadow[p.name] = p.value.copy()
        else:
            dt = p.value.dtype.type
            s *= dt(decay)
            s += dt(1.0 - decay) * p.value


def evaluate(graph: ModelGraph, dataset: Dataset, batch_size: int = 256) -> float:
    """Argmax-of-logits accuracy; ties go to the lowest class index."""
    n = len(dataset)
    correct = 0
    for start in range(0, n, batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        logits = forward(graph, xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / n


def evaluate_with(graph: ModelGraph, values: dict, dataset: Dataset) -> float:
    """Evaluate with substituted parameter values (e.g. the EMA shadow)
    without mutating the training parameters."""
    params = list(iter_params(graph))
    saved = {p.name: p.value for p in params}
    for p in params:
        p.value = np.ascontiguousarray(values[p.name])
        p.bump()
    try:
        return evaluate(graph, dataset)
    finally:
        for p in params:
            p.value = saved[p.name]
            p.bump()


def train(graph: ModelGraph, train_ds: Dataset, config: TrainConfig,
          test_ds: Dataset | None = None, on_step=None) -> list[MetricsRecord]:
    """Run the training loop; one MetricsRecord per epoch.

    Per step: collapse every block on a fresh tape, forward, cross-entropy
    plus the collapsed-kernel decay term, backward, SGD update, optional
    EMA update. ``on_step(step, loss)`` is called after each update.
    ``test_acc`` is NaN when no test set is given.
    """
    if graph.mode != MODE_TRAINING:
        raise UsageError("train needs a training-mode graph")
    params = list(iter_params(graph))
    velocity: dict[str, np.ndarray] = {}
    shadow = None
    if config.ema_decay is not None:
        if not 0 <= config.ema_decay < 1:
            raise ConfigError(f"EMA decay must be in [0, 1), got {config.ema_decay}")
        shadow = {p.name: p.value.copy() for p in params}
    rng = np.random.default_rng(config.seed)
    macs = training_macs_per_step(graph, config.batch_size)
    n = len(train_ds)
    records = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = train_ds.images[idx]
            yb = train_ds.labels[idx]
            if config.augment:
                xb = augment_batch(xb, rng)
            tape = Tape()
            logits, collapsed = forward_on_tape(tape, graph, tape.input(xb))
            loss = ad.softmax_cross_entropy(logits, yb, "mean")
            if config.wd_collapsed:
                for wp in collapsed:
                    loss = ad.add(loss, ad.scale(ad.half_sum_squares(wp),
                                                 config.wd_collapsed))
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            sgd_step(params, config, epoch, velocity)
            if shadow is not None:
                ema_update(shadow, params, config.ema_decay)
            lval = float(loss.data)
            losses.append(lval)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            if on_step is not None:
                on_step(step, lval)
            step += 1
        test_acc = evaluate(graph, test_ds) if test_ds is not None else float("nan")
        ema_acc = None
        if shadow is not None and test_ds is not None:
            ema_acc = evaluate_with(graph, shadow, test_ds)
        records.append(MetricsRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_acc=correct / n,
            test_acc=test_acc,
            wall_seconds=time.perf_counter() - t0,
            macs_per_step=macs,
            ema_test_acc=ema_acc,
        ))
    return records


def augment_batch(xb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5) plus pad-4 random crop."""
    n, c, h, w = xb.shape
    out = xb.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (4, 4), (4, 4)))
    offs = rng.integers(0, 9, size=(n, 2))
    for i in range(n):
        oy, ox = offs[i]
        out[i] = padded[i, :, oy:oy + h, ox:ox + w]
    return out


def format_metrics_line(rec: MetricsRecord) -> str:
    """One line-delimited record, stable key order."""
    parts = [
        f"epoch={rec.epoch}",
        f"train_loss={rec.train_loss:.6f}",
        f"train_acc={rec.train_acc:.6f}",
        f"test_acc={rec.test_acc:.6f}",
        f"wall_seconds={rec.wall_seconds:.3f}",
        f"macs_per_step={rec.macs_per_step}",
    ]
    if rec.ema_test_acc is not None:
        parts.append(f"ema_test_acc={rec.ema_test_acc:.6f}")
    return " ".join(parts)
