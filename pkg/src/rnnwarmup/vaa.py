"""Counting reachable attractors of recurrent dynamics.

A batch of hidden states is iterated for M steps under one constant input
(the stabilization period); two trajectories are credited to the same
attractor when their final states lie within a tolerance of each other.
The resulting score is

    (1/|X|) * sum_i 1 / #{j : ||final_i - final_j|| <= tol}

which equals (number of distinct reached attractors) / |X| whenever the
tolerance relation is transitive on the finals. The score is implemented
exactly as this pairwise formula, not as a clustering, so near-threshold
chains behave the way the formula says they do. Range: 1/|X| (all states
in one basin) up to 1 (all finals distinct).

The smooth variant replaces the indicator with

    C*_ij = 1 - max(0, d_ij - tol) / d_ij,   d_ij = ||tanh f^M(x_i) - tanh f^M(x_j)||

(tanh squashes the states so pushing them apart saturates). C* equals 1
exactly when d <= tol — including d = 0, where the ratio is defined as 0
without evaluating 1/d — and decays like tol/d for larger distances, so
it never quite reaches 0. Gradients flow through the stabilization steps
and, when the states came from input sequences, through those unrolls as
well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class DivergentDynamics(RuntimeError):
    """A state stopped being finite during stabilization."""


@dataclass(frozen=True)
class VaaConfig:
    """Stabilization period M, state-similarity tolerance, iteration count."""

    stabilization: int
    tolerance: float = 1e-4
    iterations: int = 1

    def __post_init__(self):
        if self.stabilization < 1:
            raise ValueError("stabilization period must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.iterations < 1:
            raise ValueError("iteration count must be >= 1")


@dataclass
class StateSet:
    """Hidden states sampled from input sequences, one per sequence.

    ``half_states[layer][half]`` is a (batch, state_width) tensor;
    ``provenance[i]`` records (sequence index, sampled timestep).
    """

    half_states: list
    provenance: list

    @property
    def size(self):
        return self.half_states[0][0].data.shape[0]


def _as_sequence_list(sequences):
    if isinstance(sequences, np.ndarray):
        if sequences.ndim != 3:
            raise ValueError("sequence array must be (count, length, dim)")
        return [sequences[i] for i in range(sequences.shape[0])]
    return list(sequences)


def random_hidden_states(network, sequences, rng, window=None):
    """Run each sequence to a uniformly sampled timestep and keep the states.

    Each sequence i gets t_i ~ uniform{1..T_i}; the network starts from its
    zero state and the state of every layer (and half) after t_i inputs goes
    into the returned :class:`StateSet`. Lower layers always see the
    original inputs. Gradients flow through the unroll unless recording is
    off; ``window`` optionally cuts gradient flow to the last ``window``
    input steps (the prefix runs without recording).
    """
    seqs = _as_sequence_list(sequences)
    if len(seqs) == 0:
        raise ValueError("need at least one input sequence")
    lengths = [s.shape[0] for s in seqs]
    if min(lengths) < 1:
        raise ValueError("every input sequence must have length >= 1")
    n = seqs[0].shape[1]
    batch = len(seqs)
    ts = np.array([int(rng.integers(1, L + 1)) for L in lengths])

    if window is None:
        keep = ts
        initial = network.initial_states(batch)
    else:
        keep = np.minimum(ts, window)
        cuts = ts - keep
        padded = np.zeros((int(ts.max()), batch, n))
        for i, s in enumerate(seqs):
            padded[: ts[i], i] = s[: ts[i]]
        with ad.no_grad():
            states, _ = network.unroll(ad.Tensor(padded))
            initial = [
                [ad.Tensor(seq.data[cuts, np.arange(batch)]) for seq in layer]
                for layer, _spec in zip(states, network.layers)
            ]
        seqs = [s[c:t] for s, c, t in zip(seqs, cuts, ts)]

    t_max = int(keep.max())
    padded = np.zeros((t_max, batch, n))
    for i, s in enumerate(seqs):
        padded[: keep[i], i] = s[: keep[i]]
    states, _ = network.unroll(ad.Tensor(padded), initial=initial)
    rows = np.arange(batch)
    half_states = [[seq[(keep, rows)] for seq in layer] for layer in states]
    provenance = [(i, int(t)) for i, t in enumerate(ts)]
    return StateSet(half_states=half_states, provenance=provenance)


# ---------------------------------------------------------------------------
# stabilizable systems


def _tile_input(u, batch):
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    return np.broadcast_to(u, (batch, u.size)).copy()


def _check_finite(arr):
    if not np.isfinite(arr).all():
        raise DivergentDynamics("non-finite state during stabilization")


class NetworkDynamics:
    """Whole-stack update: constant input at the bottom, all layers iterated.

    The state is the concatenation of every layer's (and half's) state
    vector, so attractors are counted in the full phase space.
    """

    def __init__(self, network, chunk=512):
        self.network = network
        self.chunk = chunk

    @property
    def input_dim(self):
        return self.network.input_dim

    def stabilize(self, half_states, u, steps):
        batch = half_states[0][0].data.shape[0]
        u2 = ad.Tensor(_tile_input(u, batch))
        if ad.is_grad_enabled():
            states, _ = self.network.unroll(u2, initial=half_states, steps=steps)
            finals = ad.concat([seq[-1] for layer in states for seq in layer], axis=1)
            _check_finite(finals.data)
            return finals
        current = half_states
        done = 0
        while done < steps:
            step = min(self.chunk, steps - done)
            states, _ = self.network.unroll(u2, initial=current, steps=step)
            current = [[seq[-1] for seq in layer] for layer in states]
            for layer in current:
                for seq in layer:
                    _check_finite(seq.data)
            done += step
        return ad.concat([seq for layer in current for seq in layer], axis=1)


class LayerDynamics:
    """One layer iterated alone under a constant input of its own width.

    ``half`` selects a single parallel half (the warmed one during
    warmup); with ``half=None`` all halves are iterated side by side and
    their final states concatenated.
    """

    def __init__(self, network, layer_index, half=None):
        self.layer = network.layers[layer_index]
        self.half = half

    @property
    def input_dim(self):
        return self.layer.input_dim

    def _cells(self):
        if self.half is None:
            return list(enumerate(self.layer.cells))
        return [(self.half, self.layer.cells[self.half])]

    def stabilize(self, states, u, steps):
        singular = isinstance(states, ad.Tensor)
        state_list = [states] if singular else list(states)
        batch = state_list[0].data.shape[0]
        u2 = ad.Tensor(_tile_input(u, batch))
        finals = []
        for (idx, cell), state in zip(self._cells(), state_list):
            if ad.is_grad_enabled():
                final = cell.sequence(state, u2, steps=steps)[-1]
            else:
                final = ad.Tensor(cell.final_state(state.data, u2.data, steps=steps))
            _check_finite(final.data)
            finals.append(final)
        return finals[0] if len(finals) == 1 else ad.concat(finals, axis=1)


class IteratedMap:
    """Plain ndarray map f(states, u) -> states as a stabilizable system."""

    def __init__(self, fn, input_dim=0):
        self.fn = fn
        self.input_dim = input_dim

    def stabilize(self, states, u, steps):
        x = np.asarray(states, dtype=np.float64)
        for _ in range(steps):
            x = self.fn(x, u)
            _check_finite(x)
        return ad.Tensor(x)


# ---------------------------------------------------------------------------
# scores


def vaa_from_finals(finals, tolerance):
    """Pairwise attractor score of already-stabilized states (B, S)."""
    finals = finals.data if isinstance(finals, ad.Tensor) else np.asarray(finals)
    if finals.ndim != 2 or finals.shape[0] < 1:
        raise ValueError("finals must be a non-empty (batch, state) array")
    diff = finals[:, None, :] - finals[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    counts = (dist <= tolerance).sum(axis=1)
    # exact summation keeps the monostable floor at exactly 1/batch
    return math.fsum(1.0 / counts) / len(counts)


def vaa_star_from_finals(finals, tolerance):
    """Smooth attractor score of stabilized states; differentiable."""
    finals = ad.constant(finals)
    batch, width = finals.data.shape
    squashed = ad.tanh(finals)
    diff = ad.sub(
        ad.reshape(squashed, (batch, 1, width)), ad.reshape(squashed, (1, batch, width))
    )
    dist = ad.norm(diff)
    # exact-zero distances take the d -> 0 limit (C* = 1) with no gradient;
    # the +1 shift is inert because the numerator is exactly 0 there
    zero = dist.data == 0.0
    safe = ad.add(dist, ad.constant(zero.astype(np.float64)))
    ratio = ad.mul(ad.maximum(ad.sub(dist, tolerance), 0.0), ad.reciprocal(safe))
    closeness = ad.sub(1.0, ratio)
    denom = ad.tsum(closeness, axis=1)
    return ad.mul(ad.tsum(ad.reciprocal(denom)), 1.0 / batch)


def truncated_vaa(system, states, u, config):
    """Attractor score after M stabilization steps; never records a graph."""
    with ad.no_grad():
        finals = system.stabilize(_system_states(system, states), u, config.stabilization)
    return vaa_from_finals(finals, config.tolerance)


def vaa_star(system, states, u, config):
    """Differentiable attractor score after M stabilization steps."""
    finals = system.stabilize(_system_states(system, states), u, config.stabilization)
    return vaa_star_from_finals(finals, config.tolerance)


def _system_states(system, states):
    if isinstance(states, StateSet):
        if isinstance(system, NetworkDynamics):
            return states.half_states
        raise TypeError("pass the relevant state tensor(s), not a StateSet, to layer systems")
    return states


def estimate_vaa_mean(sequences, network, config, batch_size, rng):
    """Mean attractor score over fresh batches, states, and perturbations.

    Each iteration samples a batch of sequences without replacement, draws
    one hidden state per sequence, draws one standard-normal constant
    input, and scores the whole network after M stabilization steps.
    """
    seqs = _as_sequence_list(sequences)
    if len(seqs) == 0:
        raise ValueError("dataset must be non-empty")
    system = NetworkDynamics(network)
    scores = []
    for _ in range(config.iterations):
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        with ad.no_grad():
            states = random_hidden_states(network, [seqs[i] for i in idx], rng)
        u = rng.standard_normal(network.input_dim)
        scores.append(truncated_vaa(system, states, u, config))
    return math.fsum(scores) / config.iterations


@dataclass
class ProbeRow:
    layer: str
    vaa: float
    vaa_star: float
    size: int
    stabilization: int
    tolerance: float


def probe(network, sequences, config, batch_size, rng):
    """Per-layer and whole-network scores for one sampled batch."""
    seqs = _as_sequence_list(sequences)
    idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
    with ad.no_grad():
        states = random_hidden_states(network, [seqs[i] for i in idx], rng)
        rows = []
        for li, layer in enumerate(network.layers):
            u = rng.standard_normal(layer.input_dim)
            system = LayerDynamics(network, li)
            layer_states = states.half_states[li]
            finals = system.stabilize(layer_states, u, config.stabilization)
            rows.append(
                ProbeRow(
                    layer=str(li),
                    vaa=vaa_from_finals(finals, config.tolerance),
                    vaa_star=float(vaa_star_from_finals(finals, config.tolerance).data),
                    size=states.size,
                    stabilization=config.stabilization,
                    tolerance=config.tolerance,
                )
            )
        u = rng.standard_normal(network.input_dim)
        finals = NetworkDynamics(network).stabilize(states.half_states, u, config.stabilization)
        rows.append(
            ProbeRow(
                layer="network",
                vaa=vaa_from_finals(finals, config.tolerance),
                vaa_star=float(vaa_star_from_finals(finals, config.tolerance).data),
                size=states.size,
                stabilization=config.stabilization,
                tolerance=config.tolerance,
            )
        )
    return rows
