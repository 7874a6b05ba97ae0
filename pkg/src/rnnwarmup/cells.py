"""Recurrent cells, stacked networks, and the split-layer architecture.

Adopted update equations (stated here so the tests are unambiguous; u is
the layer input, x the state, [a, b] concatenation, * elementwise):

gru (reset gate inside the candidate)::

    z = sigmoid([x, u] Wz + bz)          update gate
    r = sigmoid([x, u] Wr + br)          reset gate
    c = tanh([r * x, u] Wc + bc)         candidate
    x' = z * x + (1 - z) * c

lstm (state carries [hidden | cell])::

    i = sigmoid([h, u] Wi + bi)          input gate
    f = sigmoid([h, u] Wf + bf)          forget gate
    g = tanh([h, u] Wg + bg)             candidate
    o = sigmoid([h, u] Wo + bo)          output gate
    c' = f * c + i * g
    h' = o * tanh(c')

mgu (single forget gate)::

    f = sigmoid([x, u] Wf + bf)
    c = tanh([f * x, u] Wc + bc)
    x' = (1 - f) * x + f * c

Weights are per-gate matrices over the concatenated [state, input] with
entries uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), fan_in = width +
input_dim; gate biases start at zero. The chrono variant (LSTM only)
draws the forget bias as log(uniform[1, T_max - 1]) and sets the input
bias to its negation.

A layer with warmed_fraction strictly between 0 and 1 is split into two
parallel half-cells that read the same input and whose outputs are
concatenated; the halves never see each other's state within the layer.
The layer output is the hidden vector (identity head for gru/mgu, the h
part for lstm); a stacked network feeds each layer's output sequence to
the next layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels

GATES = {
    "gru": ("update", "reset", "candidate"),
    "lstm": ("input", "forget", "candidate", "output"),
    "mgu": ("forget", "candidate"),
}


@dataclass(frozen=True)
class CellKind:
    """Cell family plus the optional chrono bias initialisation (LSTM)."""

    name: str
    chrono_t_max: int | None = None

    def __post_init__(self):
        if self.name not in GATES:
            raise ValueError(f"unknown cell kind {self.name!r}; one of {sorted(GATES)}")
        if self.chrono_t_max is not None:
            if self.name != "lstm":
                raise ValueError("chrono initialisation applies to LSTM only")
            if self.chrono_t_max < 2:
                raise ValueError("chrono T_max must be >= 2")


@dataclass(frozen=True)
class LayerSpec:
    kind: CellKind
    width: int
    warmed_fraction: float = 1.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("layer width must be positive")
        if not 0.0 <= self.warmed_fraction <= 1.0:
            raise ValueError("warmed_fraction must lie in [0, 1]")
        if 0.0 < self.warmed_fraction < 1.0:
            w1 = int(round(self.width * self.warmed_fraction))
            if w1 == 0 or w1 == self.width:
                raise ValueError("split layer needs both halves non-empty")


class Cell:
    """One recurrent sub-layer: per-gate weight and bias tensors."""

    def __init__(self, kind, input_dim, width, rng):
        self.kind = kind
        self.input_dim = input_dim
        self.width = width
        fan_in = width + input_dim
        bound = 1.0 / np.sqrt(fan_in)
        self.weights = {}
        self.biases = {}
        for gate in GATES[kind.name]:
            self.weights[gate] = ad.Tensor(
                rng.uniform(-bound, bound, size=(fan_in, width)), requires_grad=True
            )
            self.biases[gate] = ad.Tensor(np.zeros(width), requires_grad=True)
        if kind.chrono_t_max is not None:
            bf = np.log(rng.uniform(1.0, kind.chrono_t_max - 1.0, size=width))
            self.biases["forget"] = ad.Tensor(bf, requires_grad=True)
            self.biases["input"] = ad.Tensor(-bf, requires_grad=True)

    @property
    def state_width(self):
        return 2 * self.width if self.kind.name == "lstm" else self.width

    def parameters(self):
        order = GATES[self.kind.name]
        return [self.weights[g] for g in order] + [self.biases[g] for g in order]

    def zero_state(self, batch):
        return ad.Tensor(np.zeros((batch, self.state_width)))

    def output_of(self, state):
        """Hidden vector of a state tensor (h part for lstm)."""
        if self.kind.name == "lstm":
            return state[:, : self.width]
        return state

    # -- single step through the primitive graph (oracle path) --------------

    def step(self, state, inp):
        if inp.shape[-1] != self.input_dim:
            raise ad.ShapeMismatch(
                f"cell expects input width {self.input_dim}, got {inp.shape[-1]}"
            )
        w, b = self.weights, self.biases
        name = self.kind.name
        if name == "lstm":
            h = state[:, : self.width]
            c = state[:, self.width :]
            hu = ad.concat([h, inp], axis=1)
            i = ad.sigmoid(ad.matmul(hu, w["input"]) + b["input"])
            f = ad.sigmoid(ad.matmul(hu, w["forget"]) + b["forget"])
            g = ad.tanh(ad.matmul(hu, w["candidate"]) + b["candidate"])
            o = ad.sigmoid(ad.matmul(hu, w["output"]) + b["output"])
            c2 = f * c + i * g
            h2 = o * ad.tanh(c2)
            return ad.concat([h2, c2], axis=1)
        xu = ad.concat([state, inp], axis=1)
        if name == "gru":
            z = ad.sigmoid(ad.matmul(xu, w["update"]) + b["update"])
            r = ad.sigmoid(ad.matmul(xu, w["reset"]) + b["reset"])
            rxu = ad.concat([r * state, inp], axis=1)
            c = ad.tanh(ad.matmul(rxu, w["candidate"]) + b["candidate"])
            return z * state + (1.0 - z) * c
        f = ad.sigmoid(ad.matmul(xu, w["forget"]) + b["forget"])
        fxu = ad.concat([f * state, inp], axis=1)
        c = ad.tanh(ad.matmul(fxu, w["candidate"]) + b["candidate"])
        return (1.0 - f) * state + f * c

    # -- fused whole-sequence step (kernel path) -----------------------------

    def _packed(self):
        order = GATES[self.kind.name]
        W = np.concatenate([self.weights[g].data for g in order], axis=1)
        b = np.concatenate([self.biases[g].data for g in order])
        return W, b

    def sequence(self, state0, inputs, steps=None):
        """All states (T+1, B, S) of an unroll, recorded as one graph node.

        ``inputs`` is a (T, B, n) tensor, or (B, n) with ``steps`` for a
        constant input held fixed.
        """
        state0 = ad.constant(state0)
        inputs = ad.constant(inputs)
        if inputs.data.shape[-1] != self.input_dim:
            raise ad.ShapeMismatch(
                f"cell expects input width {self.input_dim}, got {inputs.data.shape[-1]}"
            )
        W, b = self._packed()
        backend = kernels.get()
        parents = (state0, inputs, *self.parameters())
        record = ad.is_grad_enabled() and any(p.requires_grad for p in parents)
        states, cache = backend.sequence_forward(
            self.kind.name,
            W,
            b,
            np.ascontiguousarray(state0.data),
            np.ascontiguousarray(inputs.data),
            steps=steps,
            keep_states=True,
            want_cache=record,
        )
        if not record:
            return ad.Tensor(states)

        order = GATES[self.kind.name]
        width = self.width
        inp_data = np.ascontiguousarray(inputs.data)

        def backward_fn(g):
            dW, db, dx0, dinp = backend.sequence_backward(
                self.kind.name, W, b, inp_data, states, cache, g, steps=steps
            )
            ad.accumulate(state0, dx0)
            ad.accumulate(inputs, dinp)
            for gi, gate in enumerate(order):
                ad.accumulate(self.weights[gate], dW[:, gi * width : (gi + 1) * width])
                ad.accumulate(self.biases[gate], db[gi * width : (gi + 1) * width])

        return ad.custom(states, parents, backward_fn)

    def final_state(self, state0, inputs, steps=None):
        """Final state only, never recorded (cheap stabilization probes)."""
        W, b = self._packed()
        final, _ = kernels.get().sequence_forward(
            self.kind.name,
            b=b,
            W=W,
            state0=np.ascontiguousarray(np.asarray(state0, dtype=np.float64)),
            inputs=np.ascontiguousarray(np.asarray(inputs, dtype=np.float64)),
            steps=steps,
            keep_states=False,
            want_cache=False,
        )
        return final


class Layer:
    """A stack layer: one cell, or two parallel half-cells (split mode)."""

    def __init__(self, spec, input_dim, rng):
        self.spec = spec
        self.input_dim = input_dim
        frac = spec.warmed_fraction
        if 0.0 < frac < 1.0:
            w1 = int(round(spec.width * frac))
            widths, warmed = [w1, spec.width - w1], [True, False]
        else:
            widths, warmed = [spec.width], [frac == 1.0]
        self.cells = [Cell(spec.kind, input_dim, w, rng) for w in widths]
        self.warmed = warmed

    @property
    def width(self):
        return self.spec.width

    @property
    def state_widths(self):
        return [c.state_width for c in self.cells]

    def zero_states(self, batch):
        return [c.zero_state(batch) for c in self.cells]

    def parameters(self):
        return [p for c in self.cells for p in c.parameters()]

    def step(self, states, inp):
        nxt = [c.step(s, inp) for c, s in zip(self.cells, states)]
        outs = [c.output_of(s) for c, s in zip(self.cells, nxt)]
        return nxt, (outs[0] if len(outs) == 1 else ad.concat(outs, axis=1))

    def sequence(self, state0s, inputs, steps=None):
        """Unroll both halves; returns (per-half states, output sequence)."""
        seqs = [c.sequence(s0, inputs, steps=steps) for c, s0 in zip(self.cells, state0s)]
        outs = []
        for c, seq in zip(self.cells, seqs):
            if c.kind.name == "lstm":
                outs.append(seq[1:, :, : c.width])
            else:
                outs.append(seq[1:])
        return seqs, (outs[0] if len(outs) == 1 else ad.concat(outs, axis=2))


class Network:
    """Stacked recurrent network with a linear output head.

    The initial-state function returns zeros. The head maps the last
    layer's output (both halves concatenated in split mode) to
    ``output_dim`` values; tasks apply it only at loss-bearing steps.
    """

    def __init__(self, specs, input_dim, output_dim, seed=None, rng=None):
        if rng is None:
            rng = np.random.default_rng(seed)
        self.specs = list(specs)
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.layers = []
        feed = input_dim
        for spec in self.specs:
            layer = Layer(spec, feed, rng)
            self.layers.append(layer)
            feed = layer.width
        bound = 1.0 / np.sqrt(feed)
        self.head_w = ad.Tensor(rng.uniform(-bound, bound, size=(feed, output_dim)), requires_grad=True)
        self.head_b = ad.Tensor(np.zeros(output_dim), requires_grad=True)

    # -- parameters ----------------------------------------------------------

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()] + [
            self.head_w,
            self.head_b,
        ]

    def layer_parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self):
        named = {}
        for li, layer in enumerate(self.layers):
            for hi, cell in enumerate(layer.cells):
                for gate in GATES[cell.kind.name]:
                    named[f"layer{li}.half{hi}.{gate}.weight"] = cell.weights[gate]
                    named[f"layer{li}.half{hi}.{gate}.bias"] = cell.biases[gate]
        named["head.weight"] = self.head_w
        named["head.bias"] = self.head_b
        return named

    def warmed_partition(self):
        """(warmed, frozen) recurrent-layer parameters; exact and disjoint.

        The output head is task-side and not part of the partition.
        """
        warmed, frozen = [], []
        for layer in self.layers:
            for cell, is_warm in zip(layer.cells, layer.warmed):
                (warmed if is_warm else frozen).extend(cell.parameters())
        return warmed, frozen

    @property
    def state_dim(self):
        return sum(sum(layer.state_widths) for layer in self.layers)

    # -- forward -------------------------------------------------------------

    def initial_states(self, batch):
        return [layer.zero_states(batch) for layer in self.layers]

    def step(self, states, inp):
        """One timestep through every layer; returns (states, last output)."""
        inp = ad.constant(inp)
        nxt_states = []
        feed = inp
        for layer, layer_states in zip(self.layers, states):
            nxt, out = layer.step(layer_states, feed)
            nxt_states.append(nxt)
            feed = out
        return nxt_states, feed

    def unroll(self, inputs, initial=None, steps=None):
        """Whole-sequence forward; graph recorded end-to-end.

        Returns (per-layer per-half state tensors of shape (T+1, B, S),
        last layer's output sequence (T, B, width)).
        """
        inputs = ad.constant(inputs)
        batch = inputs.data.shape[-2]
        if initial is None:
            initial = self.initial_states(batch)
        all_states = []
        feed = inputs
        for layer, layer_init in zip(self.layers, initial):
            seqs, out = layer.sequence(layer_init, feed, steps=steps)
            all_states.append(seqs)
            feed = out
            steps = None  # upper layers consume the full materialised sequence
        return all_states, feed

    def head(self, x):
        return ad.matmul(x, self.head_w) + self.head_b

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        ad.save_checkpoint(path, self.named_parameters())

    def load(self, path):
        stored = ad.load_checkpoint(path)
        named = self.named_parameters()
        missing = sorted(set(named) - set(stored))
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing}")
        for name, tensor in named.items():
            arr = stored[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}"
                )
            tensor.data = arr
        return self


def init_network(specs, input_dim, output_dim, seed):
    """Freshly initialised network; same seed gives bit-identical weights."""
    return Network(specs, input_dim, output_dim, seed=seed)


def parameter_count(network):
    return sum(p.data.size for p in network.parameters())


def unroll_compose(cell, state0, inputs_seq):
    """Step-by-step unroll through the primitive graph (kernel oracle).

    ``inputs_seq`` is a list of (B, n) tensors; returns the list of state
    tensors including the initial one.
    """
    states = [ad.constant(state0)]
    for inp in inputs_seq:
        states.append(cell.step(states[-1], ad.constant(inp)))
    return states
