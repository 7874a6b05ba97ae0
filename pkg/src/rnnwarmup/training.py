"""Supervised training loop: Adam updates, evaluation, attractor probes."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datasets import accuracy as _accuracy
from .datasets import task_loss
from .vaa import VaaConfig, estimate_vaa_mean


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    validation_fraction: float = 0.1
    probe_period: int = 1  # epochs between attractor probes; 0 disables
    probe_stabilization: int = 2000
    probe_batch: int = 50
    probe_tolerance: float = 1e-4
    clip_norm: float | None = None  # off unless asked for

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    split: str  # "train" | "val"
    loss: float
    accuracy: float | None
    vaa: float | None
    wall_time_s: float


@dataclass
class TrainResult:
    trace: list
    aborted: bool = False


def adam_step(params, grads, moments, t, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
    """One bias-corrected Adam update, in place; moments is ([m], [v])."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    m, v = moments
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite gradient for parameter {i}")
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        m_hat = m[i] / (1.0 - beta1**t)
        v_hat = v[i] / (1.0 - beta2**t)
        p.data -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)
    return params, moments


class Adam:
    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.moments = (
            [np.zeros_like(p.data) for p in self.params],
            [np.zeros_like(p.data) for p in self.params],
        )

    def step(self):
        self.t += 1
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adam_step(
            self.params,
            grads,
            self.moments,
            self.t,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )


def _clip_gradients(params, max_norm):
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def batch_loss(network, dataset, idx):
    """Forward one minibatch and return its task loss tensor."""
    inputs = np.ascontiguousarray(dataset.inputs[idx].transpose(1, 0, 2))
    _, outputs = network.unroll(ad.Tensor(inputs))
    T = inputs.shape[0]
    k = dataset.loss_steps
    preds = [network.head(outputs[t]) for t in range(T - k, T)]
    stacked = preds[0] if k == 1 else ad.concat(preds, axis=1)
    return task_loss(stacked, dataset.targets[idx], dataset.task)


def evaluate(dataset, network, batch_size=500):
    """Mean loss (and accuracy for classification); mutates nothing."""
    total = 0.0
    hits = 0.0
    with ad.no_grad():
        for start in range(0, dataset.count, batch_size):
            idx = np.arange(start, min(start + batch_size, dataset.count))
            loss = batch_loss(network, dataset, idx)
            total += float(loss.data) * len(idx)
            if dataset.task == "classify":
                inputs = np.ascontiguousarray(dataset.inputs[idx].transpose(1, 0, 2))
                _, outputs = network.unroll(ad.Tensor(inputs))
                logits = network.head(outputs[-1])
                hits += _accuracy(logits, dataset.targets[idx]) * len(idx)
    mean_loss = total / dataset.count
    return (mean_loss, hits / dataset.count) if dataset.task == "classify" else (mean_loss, None)


def train_supervised(dataset, network, config, rng):
    """Epoch loop over shuffled minibatches with periodic attractor probes.

    A non-finite loss or gradient aborts early; the trace up to that point
    is preserved and the result is flagged.
    """
    count = dataset.count
    n_val = int(round(count * config.validation_fraction))
    order = rng.permutation(count)
    val = dataset.subset(order[:n_val]) if n_val else None
    train = dataset.subset(order[n_val:])

    params = network.parameters()
    opt = Adam(
        params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.adam_epsilon,
    )
    trace = []
    for epoch in range(1, config.epochs + 1):
        start_time = time.perf_counter()
        epoch_order = rng.permutation(train.count)
        losses = []
        aborted = False
        for s in range(0, train.count, config.batch_size):
            idx = epoch_order[s : s + config.batch_size]
            loss = batch_loss(network, train, idx)
            if not np.isfinite(loss.data):
                aborted = True
                break
            ad.zero_grads(params)
            ad.backward(loss, params=params)
            if config.clip_norm is not None:
                _clip_gradients(params, config.clip_norm)
            try:
                opt.step()
            except ad.NonFiniteError:
                aborted = True
                break
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses)) if losses else float("nan")
        elapsed = time.perf_counter() - start_time
        trace.append(EpochRecord(epoch, "train", train_loss, None, None, elapsed))
        if aborted:
            return TrainResult(trace=trace, aborted=True)

        val_loss, val_acc = evaluate(val, network) if val is not None else (float("nan"), None)
        probe_value = None
        if config.probe_period and epoch % config.probe_period == 0:
            probe_value = estimate_vaa_mean(
                train.inputs,
                network,
                VaaConfig(config.probe_stabilization, tolerance=config.probe_tolerance),
                config.probe_batch,
                rng,
            )
        trace.append(
            EpochRecord(
                epoch, "val", val_loss, val_acc, probe_value,
                time.perf_counter() - start_time,
            )
        )
    return TrainResult(trace=trace, aborted=False)
