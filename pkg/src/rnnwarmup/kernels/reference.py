"""Pure numpy backend for the fused recurrent sequence kernels.

Both backends implement the same contract:

``sequence_forward(kind, W, b, state0, inputs, steps=None, keep_states=True,
want_cache=False)`` runs a whole unroll of one cell. ``W`` is the combined
per-cell weight matrix of shape (H + n, G*H) whose first H rows multiply
the recurrent state (the hidden vector for LSTM) and whose remaining n
rows multiply the input; ``b`` has shape (G*H,). Gate column blocks are

    gru:  [update | reset | candidate]     (G = 3)
    lstm: [input | forget | candidate | output]  (G = 4)
    mgu:  [forget | candidate]             (G = 2)

``inputs`` is (T, B, n), or (B, n) with ``steps=T`` for a constant input
held for T steps. The state row is (B, H) for gru/mgu and (B, 2H) for
lstm ([hidden | cell]). Returns ``(states, cache)`` where states is
(T+1, B, S) including the initial state (or just the final (B, S) row
when ``keep_states`` is false) and cache holds the post-activation gate
values needed by the backward pass.

``sequence_backward(kind, W, b, inputs, states, cache, grad_states,
steps=None)`` consumes a gradient w.r.t. every state row (T+1, B, S) and
returns ``(dW, db, dstate0, dinputs)``; for a constant input, dinputs is
summed over the steps to shape (B, n).
"""

import numpy as np

NAME = "numpy"

GATE_COUNT = {"gru": 3, "lstm": 4, "mgu": 2}


def _sigmoid(x):
    # tanh form: overflow-free, single vectorised transcendental
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _layout(kind, W, b):
    gates = GATE_COUNT[kind]
    hidden = b.size // gates
    n_in = W.shape[0] - hidden
    return gates, hidden, n_in


def _projections(W, b, inputs, steps, hidden):
    """Input-to-gate projections, hoisted out of the time loop."""
    n_in = W.shape[0] - hidden
    win = W[hidden:]
    if inputs.ndim == 2:
        return steps, inputs @ win + b, True
    T = inputs.shape[0]
    proj = (inputs.reshape(T * inputs.shape[1], n_in) @ win + b).reshape(
        T, inputs.shape[1], b.size
    )
    return T, proj, False


def sequence_forward(kind, W, b, state0, inputs, steps=None, keep_states=True, want_cache=False):
    gates_n, H, _ = _layout(kind, W, b)
    T, proj, const = _projections(W, b, inputs, steps, H)
    B = state0.shape[0]
    S = state0.shape[1]
    wr = W[:H]
    states = np.empty((T + 1, B, S)) if keep_states else None
    cache = np.empty((T, B, gates_n * H)) if want_cache else None
    if keep_states:
        states[0] = state0

    if kind == "gru":
        x = state0.copy()
        for t in range(T):
            p = proj if const else proj[t]
            zr = _sigmoid(x @ wr[:, : 2 * H] + p[:, : 2 * H])
            z, r = zr[:, :H], zr[:, H:]
            c = np.tanh((r * x) @ wr[:, 2 * H :] + p[:, 2 * H :])
            x = z * x + (1.0 - z) * c
            if keep_states:
                states[t + 1] = x
            if want_cache:
                cache[t, :, : 2 * H] = zr
                cache[t, :, 2 * H :] = c
        final = x
    elif kind == "lstm":
        h = state0[:, :H].copy()
        c = state0[:, H:].copy()
        for t in range(T):
            p = proj if const else proj[t]
            pre = h @ wr + p
            i = _sigmoid(pre[:, :H])
            f = _sigmoid(pre[:, H : 2 * H])
            g = np.tanh(pre[:, 2 * H : 3 * H])
            o = _sigmoid(pre[:, 3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
            if keep_states:
                states[t + 1, :, :H] = h
                states[t + 1, :, H:] = c
            if want_cache:
                cache[t, :, :H] = i
                cache[t, :, H : 2 * H] = f
                cache[t, :, 2 * H : 3 * H] = g
                cache[t, :, 3 * H :] = o
        final = np.concatenate([h, c], axis=1)
    elif kind == "mgu":
        x = state0.copy()
        for t in range(T):
            p = proj if const else proj[t]
            f = _sigmoid(x @ wr[:, :H] + p[:, :H])
            c = np.tanh((f * x) @ wr[:, H:] + p[:, H:])
            x = (1.0 - f) * x + f * c
            if keep_states:
                states[t + 1] = x
            if want_cache:
                cache[t, :, :H] = f
                cache[t, :, H:] = c
        final = x
    else:
        raise ValueError(f"unknown cell kind {kind!r}")

    return (states if keep_states else final), cache


def sequence_backward(kind, W, b, inputs, states, cache, grad_states, steps=None):
    gates_n, H, n_in = _layout(kind, W, b)
    T = cache.shape[0]
    B = states.shape[1]
    const = inputs.ndim == 2
    wr, win = W[:H], W[H:]
    dgates = np.empty((T, B, gates_n * H))

    if kind == "gru":
        carry = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            gx = grad_states[t + 1] + carry
            z = cache[t, :, :H]
            r = cache[t, :, H : 2 * H]
            c = cache[t, :, 2 * H :]
            xprev = states[t]
            dc = gx * (1.0 - z)
            carry = gx * z
            da_c = dc * (1.0 - c * c)
            drx = da_c @ wr[:, 2 * H :].T
            carry += drx * r
            dgates[t, :, :H] = gx * (xprev - c) * z * (1.0 - z)
            dgates[t, :, H : 2 * H] = (drx * xprev) * r * (1.0 - r)
            dgates[t, :, 2 * H :] = da_c
            carry += dgates[t, :, : 2 * H] @ wr[:, : 2 * H].T
        dstate0 = carry + grad_states[0]
        flat = dgates.reshape(T * B, 3 * H)
        xflat = states[:-1].reshape(T * B, H)
        rxflat = (cache[:, :, H : 2 * H] * states[:-1]).reshape(T * B, H)
        dW = np.empty_like(W)
        dW[:H, : 2 * H] = xflat.T @ flat[:, : 2 * H]
        dW[:H, 2 * H :] = rxflat.T @ flat[:, 2 * H :]
    elif kind == "lstm":
        carry_h = np.zeros((B, H))
        carry_c = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            gh = grad_states[t + 1, :, :H] + carry_h
            gc = grad_states[t + 1, :, H:] + carry_c
            i = cache[t, :, :H]
            f = cache[t, :, H : 2 * H]
            g = cache[t, :, 2 * H : 3 * H]
            o = cache[t, :, 3 * H :]
            c_prev = states[t, :, H:]
            tc = np.tanh(states[t + 1, :, H:])
            gctot = gc + gh * o * (1.0 - tc * tc)
            carry_c = gctot * f
            dgates[t, :, :H] = (gctot * g) * i * (1.0 - i)
            dgates[t, :, H : 2 * H] = (gctot * c_prev) * f * (1.0 - f)
            dgates[t, :, 2 * H : 3 * H] = (gctot * i) * (1.0 - g * g)
            dgates[t, :, 3 * H :] = (gh * tc) * o * (1.0 - o)
            carry_h = dgates[t] @ wr.T
        dstate0 = np.concatenate(
            [carry_h + grad_states[0, :, :H], carry_c + grad_states[0, :, H:]], axis=1
        )
        flat = dgates.reshape(T * B, 4 * H)
        dW = np.empty_like(W)
        dW[:H] = states[:-1, :, :H].reshape(T * B, H).T @ flat
    elif kind == "mgu":
        carry = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            gx = grad_states[t + 1] + carry
            f = cache[t, :, :H]
            c = cache[t, :, H:]
            xprev = states[t]
            df = gx * (c - xprev)
            carry = gx * (1.0 - f)
            da_c = (gx * f) * (1.0 - c * c)
            dfx = da_c @ wr[:, H:].T
            df += dfx * xprev
            carry += dfx * f
            dgates[t, :, :H] = df * f * (1.0 - f)
            dgates[t, :, H:] = da_c
            carry += dgates[t, :, :H] @ wr[:, :H].T
        dstate0 = carry + grad_states[0]
        flat = dgates.reshape(T * B, 2 * H)
        xflat = states[:-1].reshape(T * B, H)
        fxflat = (cache[:, :, :H] * states[:-1]).reshape(T * B, H)
        dW = np.empty_like(W)
        dW[:H, :H] = xflat.T @ flat[:, :H]
        dW[:H, H:] = fxflat.T @ flat[:, H:]
    else:
        raise ValueError(f"unknown cell kind {kind!r}")

    db = flat.sum(axis=0)
    if const:
        dW[H:] = inputs.T @ dgates.sum(axis=0)
        dinputs = dgates.sum(axis=0) @ win.T
    else:
        dW[H:] = inputs.reshape(T * B, n_in).T @ flat
        dinputs = (flat @ win.T).reshape(T, B, n_in)
    return dW, db, dstate0, dinputs
