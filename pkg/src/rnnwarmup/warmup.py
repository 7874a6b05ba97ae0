"""Pre-training that drives each layer's smooth attractor score to a target.

Before task training, stochastic gradient steps push the per-layer
differentiable attractor score toward a target k (default 0.95): each
step samples a batch of input sequences without replacement, draws one
hidden state per sequence at a random timestep, draws a stabilization
length M uniformly from {1..M_max(s)} with M_max(s) = min(cap, 1 +
increment * s), scores every layer under its own fresh constant input,
and descends the mean squared gap to the target. Gradients run through
both the stabilization window and the sampled input prefixes. See
WarmupConfig.update_rule for the step rule.

In split-layer networks only the warmed halves are updated; the frozen
halves (and the task head) are left bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .training import Adam
from .vaa import (
    DivergentDynamics,
    LayerDynamics,
    VaaConfig,
    _as_sequence_list,
    random_hidden_states,
    vaa_star,
)


@dataclass(frozen=True)
class WarmupConfig:
    steps: int = 100
    batch_size: int = 200
    learning_rate: float = 1e-2
    target: float = 0.95
    max_stabilization: int = 200
    stabilization_increment: int = 10
    tolerance: float = 1e-4
    # "adam" takes per-parameter normalised steps; "sgd" is the literal
    # theta <- theta - lr * grad rule. The hinge in the smooth score scales
    # its gradients by the tolerance (1e-4), so raw SGD at the stock rate
    # moves weights ~1e-6 per step and cannot reach multistability within
    # the stock budget; normalised steps at the same rate can.
    update_rule: str = "adam"
    # literal reading of the procedure grows the cap by `increment` every
    # step, which makes it moot after step one; default keeps a fixed cap
    increment_cap: bool = False
    history_window: int | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 <= self.target <= 1.0:
            raise ValueError("target must lie in [0, 1]")
        if self.max_stabilization < 1 or self.stabilization_increment < 1:
            raise ValueError("stabilization cap and increment must be >= 1")
        if self.update_rule not in ("adam", "sgd"):
            raise ValueError("update_rule must be 'adam' or 'sgd'")


@dataclass(frozen=True)
class WarmupStepRecord:
    step: int
    sampled_m: int
    layer_values: tuple
    loss: float


def max_stabilization_period(step, cap, increment):
    """min(cap, 1 + increment * step) for step >= 1."""
    if step < 1:
        raise ValueError("step index starts at 1")
    return min(cap, 1 + increment * step)


def warmup_loss(values, target):
    """Mean squared gap between per-layer scores and the target."""
    if len(values) == 0:
        raise ValueError("need at least one layer value")
    total = ad.square(ad.sub(ad.constant(values[0]), target))
    for v in values[1:]:
        total = total + ad.square(ad.sub(ad.constant(v), target))
    return ad.mul(total, 1.0 / len(values))


def _warmed_half_index(layer):
    if len(layer.cells) == 1:
        return 0
    return layer.warmed.index(True)


def warmup(sequences, network, config, rng):
    """Run the pre-training loop in place; returns the per-step trace."""
    seqs = _as_sequence_list(sequences)
    if len(seqs) == 0:
        raise ValueError("dataset must be non-empty")
    if config.batch_size > len(seqs):
        raise ValueError(
            f"batch size {config.batch_size} exceeds dataset size {len(seqs)}"
        )
    warmed, _frozen = network.warmed_partition()
    all_params = network.parameters()
    optimizer = None
    if config.update_rule == "adam" and warmed:
        optimizer = Adam(warmed, learning_rate=config.learning_rate)
    cap = config.max_stabilization
    trace = []
    for s in range(1, config.steps + 1):
        idx = rng.choice(len(seqs), size=config.batch_size, replace=False)
        states = random_hidden_states(
            network, [seqs[i] for i in idx], rng, window=config.history_window
        )
        m_max = max_stabilization_period(s, cap, config.stabilization_increment)
        sampled_m = int(rng.integers(1, m_max + 1))
        score_cfg = VaaConfig(sampled_m, tolerance=config.tolerance)
        values = []
        for li, layer in enumerate(network.layers):
            u = rng.standard_normal(layer.input_dim)
            half = _warmed_half_index(layer)
            system = LayerDynamics(network, li, half=half)
            try:
                values.append(
                    vaa_star(system, states.half_states[li][half], u, score_cfg)
                )
            except DivergentDynamics as err:
                raise DivergentDynamics(f"warmup step {s}, layer {li}: {err}") from err
        loss = warmup_loss(values, config.target)
        ad.zero_grads(all_params)
        ad.backward(loss, params=warmed)
        if optimizer is not None:
            optimizer.step()
        else:
            for p in warmed:
                p.data -= config.learning_rate * p.grad
        trace.append(
            WarmupStepRecord(
                step=s,
                sampled_m=sampled_m,
                layer_values=tuple(float(v.data) for v in values),
                loss=float(loss.data),
            )
        )
        if config.increment_cap:
            cap += config.stabilization_increment
    ad.zero_grads(all_params)
    return trace
