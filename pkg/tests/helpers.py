"""Shared test oracles and small builders."""

import numpy as np

from rnnwarmup.cells import CellKind, LayerSpec, init_network


def attractor_count_union(finals, tolerance):
    """Brute-force attractor count: union states by pairwise distance <= tol.

    Independent of the pairwise score formula; agrees with it whenever the
    tolerance relation is transitive on the finals.
    """
    finals = np.asarray(finals, dtype=np.float64)
    n = finals.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(finals[i] - finals[j]) <= tolerance:
                parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def pairwise_distances(finals):
    diff = finals[:, None, :] - finals[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def zero_weight_network(kind="gru", widths=(6,), input_dim=2, output_dim=1):
    """Network whose recurrent and input weights are all zero (biases too):
    every state contracts to the same fixed point in one step."""
    specs = [LayerSpec(CellKind(kind), w) for w in widths]
    net = init_network(specs, input_dim, output_dim, seed=0)
    for layer in net.layers:
        for cell in layer.cells:
            for w in cell.weights.values():
                w.data[:] = 0.0
            for b in cell.biases.values():
                b.data[:] = 0.0
    return net


def small_network(kind="gru", widths=(4,), input_dim=2, output_dim=1, seed=0, fractions=None):
    if fractions is None:
        fractions = [1.0] * len(widths)
    specs = [LayerSpec(CellKind(kind), w, warmed_fraction=f) for w, f in zip(widths, fractions)]
    return init_network(specs, input_dim, output_dim, seed=seed)


def random_sequences(rng, count, length, dim):
    return rng.normal(0.0, 1.0, size=(count, length, dim))


def maze_oracle_step(L, layout, pos, action_vectors, action):
    """Independent re-derivation of the maze transition/reward/observation."""
    cells = {(x, 0) for x in range(L + 1)} | {(L, 1), (L, -1)}
    terminal_cells = {(L, 1), (L, -1)}

    def obs_of(p):
        if p == (0, 0):
            return "up" if layout == "up" else "down"
        if p[1] == 0 and 1 <= p[0] <= L - 1:
            return "corridor"
        return "junction"

    if pos in terminal_cells:
        return pos, 0.0, obs_of(pos), True
    dx, dy = action_vectors[action]
    cand = (pos[0] + dx, pos[1] + dy)
    nxt = cand if cand in cells else pos
    if nxt in terminal_cells:
        good = (L, 1) if layout == "up" else (L, -1)
        reward = 4.0 if nxt == good else -0.1
    elif nxt == pos:
        reward = -0.1
    else:
        reward = 0.0
    return nxt, reward, obs_of(nxt), nxt in terminal_cells


def parameter_fingerprint(params):
    return [p.data.copy() for p in params]


def params_equal(before, params):
    return all(np.array_equal(b, p.data) for b, p in zip(before, params))
