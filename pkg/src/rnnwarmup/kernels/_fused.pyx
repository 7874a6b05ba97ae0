# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled backend for the recurrent sequence kernels.

Same contract as ``rnnwarmup.kernels.reference``. Matmuls go through BLAS
dgemm, gate combines run as fused C loops, and the transcendentals are
delegated to numpy's vectorised tanh (sigmoid uses the tanh identity, as
in the reference backend) so both backends share bit-identical math.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

NAME = "cython"

GATE_COUNT = {"gru": 3, "lstm": 4, "mgu": 2}


cdef inline void gemm_rm(bint ta, bint tb, int m, int n, int k, double alpha,
                         double* a, int lda, double* bmat, int ldb,
                         double beta, double* c, int ldc) noexcept nogil:
    """C (m,n) = alpha * op(A) @ op(B) + beta * C on row-major buffers.

    ld* are the row strides (column counts) of the full backing arrays, so
    column-block submatrices can be addressed with an offset pointer.
    """
    cdef char fa = b'T' if tb else b'N'
    cdef char fb = b'T' if ta else b'N'
    dgemm(&fa, &fb, &n, &m, &k, &alpha, bmat, &ldb, a, &lda, &beta, c, &ldc)


def _proj(W, b, inputs, steps, int hidden):
    """Hoisted input-to-gate projections; mirrors reference._projections."""
    n_in = W.shape[0] - hidden
    win = W[hidden:]
    if inputs.ndim == 2:
        return int(steps), np.ascontiguousarray(inputs @ win + b), True
    T = inputs.shape[0]
    B = inputs.shape[1]
    proj = (inputs.reshape(T * B, n_in) @ win + b).reshape(T, B, b.shape[0])
    return T, np.ascontiguousarray(proj), False


def sequence_forward(kind, W, b, state0, inputs, steps=None, keep_states=True, want_cache=False):
    W = np.ascontiguousarray(W)
    b = np.ascontiguousarray(b)
    state0 = np.ascontiguousarray(state0)
    inputs = np.ascontiguousarray(inputs)
    if kind == "gru":
        return _gru_forward(W, b, state0, inputs, steps, keep_states, want_cache)
    if kind == "lstm":
        return _lstm_forward(W, b, state0, inputs, steps, keep_states, want_cache)
    if kind == "mgu":
        return _mgu_forward(W, b, state0, inputs, steps, keep_states, want_cache)
    raise ValueError(f"unknown cell kind {kind!r}")


def sequence_backward(kind, W, b, inputs, states, cache, grad_states, steps=None):
    W = np.ascontiguousarray(W)
    b = np.ascontiguousarray(b)
    inputs = np.ascontiguousarray(inputs)
    states = np.ascontiguousarray(states)
    cache = np.ascontiguousarray(cache)
    grad_states = np.ascontiguousarray(grad_states)
    if kind == "gru":
        return _gru_backward(W, b, inputs, states, cache, grad_states)
    if kind == "lstm":
        return _lstm_backward(W, b, inputs, states, cache, grad_states)
    if kind == "mgu":
        return _mgu_backward(W, b, inputs, states, cache, grad_states)
    raise ValueError(f"unknown cell kind {kind!r}")


def _input_grads(W, inputs, dgates_np, flat, int hidden, int n_in):
    """dW rows for the input block plus the gradient w.r.t. the inputs."""
    win = W[hidden:]
    if inputs.ndim == 2:
        acc = dgates_np.sum(axis=0)
        return inputs.T @ acc, acc @ win.T
    T = dgates_np.shape[0]
    B = dgates_np.shape[1]
    return inputs.reshape(T * B, n_in).T @ flat, (flat @ win.T).reshape(T, B, n_in)


# ---------------------------------------------------------------------------
# GRU


def _gru_forward(cnp.ndarray W, cnp.ndarray b, cnp.ndarray state0, cnp.ndarray inputs,
                 steps, bint keep_states, bint want_cache):
    cdef int H = b.shape[0] // 3
    cdef int B = state0.shape[0]
    cdef int T
    T, proj_np, const = _proj(W, b, inputs, steps, H)

    states_np = np.empty((T + 1 if keep_states else 2, B, H))
    states_np[0] = state0
    cache_np = np.empty((T, B, 3 * H)) if want_cache else None
    cdef double[:, :, ::1] states = states_np
    cdef double[:, :, ::1] cache
    if want_cache:
        cache = cache_np
    cdef double[:, :, ::1] proj3
    cdef double[:, ::1] proj2
    cdef bint is_const = const
    if is_const:
        proj2 = proj_np
    else:
        proj3 = proj_np

    cdef double[:, ::1] wv = W
    cdef int ldw = 3 * H
    pre_zr_np = np.empty((B, 2 * H))
    pre_c_np = np.empty((B, H))
    cdef double[:, ::1] pre_zr = pre_zr_np
    cdef double[:, ::1] pre_c = pre_c_np
    cdef double[:, ::1] rx = np.empty((B, H))
    cdef double[:, ::1] cur, nxt
    cdef double* pv
    cdef int t, bi, j
    cdef double z, r, c

    cur = states[0]
    for t in range(T):
        pv = &proj2[0, 0] if is_const else &proj3[t, 0, 0]
        with nogil:
            for bi in range(B):
                for j in range(2 * H):
                    pre_zr[bi, j] = pv[bi * 3 * H + j]
            gemm_rm(0, 0, B, 2 * H, H, 1.0, &cur[0, 0], H, &wv[0, 0], ldw,
                    1.0, &pre_zr[0, 0], 2 * H)
            for bi in range(B):
                for j in range(2 * H):
                    pre_zr[bi, j] *= 0.5
        np.tanh(pre_zr_np, out=pre_zr_np)
        with nogil:
            for bi in range(B):
                for j in range(H):
                    z = 0.5 + 0.5 * pre_zr[bi, j]
                    r = 0.5 + 0.5 * pre_zr[bi, H + j]
                    pre_zr[bi, j] = z
                    pre_zr[bi, H + j] = r
                    rx[bi, j] = r * cur[bi, j]
            for bi in range(B):
                for j in range(H):
                    pre_c[bi, j] = pv[bi * 3 * H + 2 * H + j]
            gemm_rm(0, 0, B, H, H, 1.0, &rx[0, 0], H, &wv[0, 2 * H], ldw,
                    1.0, &pre_c[0, 0], H)
        np.tanh(pre_c_np, out=pre_c_np)
        nxt = states[t + 1] if keep_states else states[(t + 1) % 2]
        with nogil:
            for bi in range(B):
                for j in range(H):
                    z = pre_zr[bi, j]
                    c = pre_c[bi, j]
                    nxt[bi, j] = z * cur[bi, j] + (1.0 - z) * c
                    if want_cache:
                        cache[t, bi, j] = z
                        cache[t, bi, H + j] = pre_zr[bi, H + j]
                        cache[t, bi, 2 * H + j] = c
        cur = nxt

    if keep_states:
        return states_np, cache_np
    return states_np[T % 2].copy(), cache_np


def _gru_backward(cnp.ndarray W, cnp.ndarray b, cnp.ndarray inputs,
                  cnp.ndarray states_np, cnp.ndarray cache_np, cnp.ndarray grads_np):
    cdef int H = b.shape[0] // 3
    cdef int T = cache_np.shape[0]
    cdef int B = states_np.shape[1]
    cdef int n_in = W.shape[0] - H

    dgates_np = np.empty((T, B, 3 * H))
    cdef double[:, :, ::1] dgates = dgates_np
    cdef double[:, :, ::1] states = states_np
    cdef double[:, :, ::1] cache = cache_np
    cdef double[:, :, ::1] grads = grads_np
    cdef double[:, ::1] wv = W
    cdef int ldw = 3 * H
    cdef double[:, ::1] carry = np.zeros((B, H))
    cdef double[:, ::1] gx = np.empty((B, H))
    cdef double[:, ::1] drx = np.empty((B, H))
    cdef int t, bi, j
    cdef double z, r, c, xp, dc, da_c

    with nogil:
        for t in range(T - 1, -1, -1):
            for bi in range(B):
                for j in range(H):
                    gx[bi, j] = grads[t + 1, bi, j] + carry[bi, j]
                    z = cache[t, bi, j]
                    c = cache[t, bi, 2 * H + j]
                    dc = gx[bi, j] * (1.0 - z)
                    dgates[t, bi, 2 * H + j] = dc * (1.0 - c * c)
                    carry[bi, j] = gx[bi, j] * z
            gemm_rm(0, 1, B, H, H, 1.0, &dgates[t, 0, 2 * H], 3 * H,
                    &wv[0, 2 * H], ldw, 0.0, &drx[0, 0], H)
            for bi in range(B):
                for j in range(H):
                    z = cache[t, bi, j]
                    r = cache[t, bi, H + j]
                    c = cache[t, bi, 2 * H + j]
                    xp = states[t, bi, j]
                    carry[bi, j] += drx[bi, j] * r
                    dgates[t, bi, j] = gx[bi, j] * (xp - c) * z * (1.0 - z)
                    dgates[t, bi, H + j] = (drx[bi, j] * xp) * r * (1.0 - r)
            gemm_rm(0, 1, B, H, 2 * H, 1.0, &dgates[t, 0, 0], 3 * H,
                    &wv[0, 0], ldw, 1.0, &carry[0, 0], H)

    dstate0 = np.asarray(carry) + grads_np[0]
    flat = dgates_np.reshape(T * B, 3 * H)
    xflat = states_np[:-1].reshape(T * B, H)
    rxflat = (cache_np[:, :, H:2 * H] * states_np[:-1]).reshape(T * B, H)
    dW = np.empty_like(W)
    dW[:H, :2 * H] = xflat.T @ flat[:, :2 * H]
    dW[:H, 2 * H:] = rxflat.T @ flat[:, 2 * H:]
    db = flat.sum(axis=0)
    dW[H:], dinputs = _input_grads(W, inputs, dgates_np, flat, H, n_in)
    return dW, db, dstate0, dinputs


# ---------------------------------------------------------------------------
# LSTM


def _lstm_forward(cnp.ndarray W, cnp.ndarray b, cnp.ndarray state0, cnp.ndarray inputs,
                  steps, bint keep_states, bint want_cache):
    cdef int H = b.shape[0] // 4
    cdef int B = state0.shape[0]
    cdef int T
    T, proj_np, const = _proj(W, b, inputs, steps, H)

    states_np = np.empty((T + 1 if keep_states else 2, B, 2 * H))
    states_np[0] = state0
    cache_np = np.empty((T, B, 4 * H)) if want_cache else None
    cdef double[:, :, ::1] states = states_np
    cdef double[:, :, ::1] cache
    if want_cache:
        cache = cache_np
    cdef double[:, :, ::1] proj3
    cdef double[:, ::1] proj2
    cdef bint is_const = const
    if is_const:
        proj2 = proj_np
    else:
        proj3 = proj_np

    cdef double[:, ::1] wv = W
    cdef int ldw = 4 * H
    pre_np = np.empty((B, 4 * H))
    cc_np = np.empty((B, H))
    cdef double[:, ::1] pre = pre_np
    cdef double[:, ::1] cc = cc_np
    cdef double[:, ::1] tc
    cdef double[:, ::1] cur, nxt
    cdef double* pv
    cdef int t, bi, j
    cdef double i, f, g, o

    cur = states[0]
    for t in range(T):
        pv = &proj2[0, 0] if is_const else &proj3[t, 0, 0]
        with nogil:
            for bi in range(B):
                for j in range(4 * H):
                    pre[bi, j] = pv[bi * 4 * H + j]
            gemm_rm(0, 0, B, 4 * H, H, 1.0, &cur[0, 0], 2 * H, &wv[0, 0], ldw,
                    1.0, &pre[0, 0], 4 * H)
            # gate blocks use the tanh form of sigmoid: halve pre-activations
            for bi in range(B):
                for j in range(2 * H):
                    pre[bi, j] *= 0.5
                for j in range(3 * H, 4 * H):
                    pre[bi, j] *= 0.5
        np.tanh(pre_np, out=pre_np)
        nxt = states[t + 1] if keep_states else states[(t + 1) % 2]
        with nogil:
            for bi in range(B):
                for j in range(H):
                    i = 0.5 + 0.5 * pre[bi, j]
                    f = 0.5 + 0.5 * pre[bi, H + j]
                    g = pre[bi, 2 * H + j]
                    cc[bi, j] = f * cur[bi, H + j] + i * g
                    nxt[bi, H + j] = cc[bi, j]
                    if want_cache:
                        cache[t, bi, j] = i
                        cache[t, bi, H + j] = f
                        cache[t, bi, 2 * H + j] = g
                        cache[t, bi, 3 * H + j] = 0.5 + 0.5 * pre[bi, 3 * H + j]
        np.tanh(cc_np, out=cc_np)
        with nogil:
            for bi in range(B):
                for j in range(H):
                    o = 0.5 + 0.5 * pre[bi, 3 * H + j]
                    nxt[bi, j] = o * cc[bi, j]
        cur = nxt

    if keep_states:
        return states_np, cache_np
    return states_np[T % 2].copy(), cache_np


def _lstm_backward(cnp.ndarray W, cnp.ndarray b, cnp.ndarray inputs,
                   cnp.ndarray states_np, cnp.ndarray cache_np, cnp.ndarray grads_np):
    cdef int H = b.shape[0] // 4
    cdef int T = cache_np.shape[0]
    cdef int B = states_np.shape[1]
    cdef int n_in = W.shape[0] - H

    dgates_np = np.empty((T, B, 4 * H))
    cdef double[:, :, ::1] dgates = dgates_np
    cdef double[:, :, ::1] states = states_np
    cdef double[:, :, ::1] cache = cache_np
    cdef double[:, :, ::1] grads = grads_np
    cdef double[:, ::1] wv = W
    cdef int ldw = 4 * H
    cdef double[:, ::1] carry_h = np.zeros((B, H))
    cdef double[:, ::1] carry_c = np.zeros((B, H))
    # all tanh(c_t) values precomputed in one vectorised pass
    tc_np = np.tanh(states_np[1:, :, H:])
    cdef double[:, :, ::1] tc_all = tc_np
    cdef int t, bi, j
    cdef double i, f, g, o, tc, gh, gctot

    with nogil:
        for t in range(T - 1, -1, -1):
            for bi in range(B):
                for j in range(H):
                    i = cache[t, bi, j]
                    f = cache[t, bi, H + j]
                    g = cache[t, bi, 2 * H + j]
                    o = cache[t, bi, 3 * H + j]
                    tc = tc_all[t, bi, j]
                    gh = grads[t + 1, bi, j] + carry_h[bi, j]
                    gctot = grads[t + 1, bi, H + j] + carry_c[bi, j] \
                        + gh * o * (1.0 - tc * tc)
                    carry_c[bi, j] = gctot * f
                    dgates[t, bi, j] = (gctot * g) * i * (1.0 - i)
                    dgates[t, bi, H + j] = (gctot * states[t, bi, H + j]) * f * (1.0 - f)
                    dgates[t, bi, 2 * H + j] = (gctot * i) * (1.0 - g * g)
                    dgates[t, bi, 3 * H + j] = (gh * tc) * o * (1.0 - o)
            gemm_rm(0, 1, B, H, 4 * H, 1.0, &dgates[t, 0, 0], 4 * H,
                    &wv[0, 0], ldw, 0.0, &carry_h[0, 0], H)

    dstate0 = np.concatenate(
        [np.asarray(carry_h) + grads_np[0, :, :H],
         np.asarray(carry_c) + grads_np[0, :, H:]], axis=1)
    flat = dgates_np.reshape(T * B, 4 * H)
    dW = np.empty_like(W)
    dW[:H] = np.ascontiguousarray(states_np[:-1, :, :H]).reshape(T * B, H).T @ flat
    db = flat.sum(axis=0)
    dW[H:], dinputs = _input_grads(W, inputs, dgates_np, flat, H, n_in)
    return dW, db, dstate0, dinputs


# ---------------------------------------------------------------------------
# MGU


def _mgu_forward(cnp.ndarray W, cnp.ndarray b, cnp.ndarray state0, cnp.ndarray inputs,
                 steps, bint keep_states, bint want_cache):
    cdef int H = b.shape[0] // 2
    cdef int B = state0.shape[0]
    cdef int T
    T, proj_np, const = _proj(W, b, inputs, steps, H)

    states_np = np.empty((T + 1 if keep_states else 2, B, H))
    states_np[0] = state0
    cache_np = np.empty((T, B, 2 * H)) if want_cache else None
    cdef double[:, :, ::1] states = states_np
    cdef double[:, :, ::1] cache
    if want_cache:
        cache = cache_np
    cdef double[:, :, ::1] proj3
    cdef double[:, ::1] proj2
    cdef bint is_const = const
    if is_const:
        proj2 = proj_np
    else:
        proj3 = proj_np

    cdef double[:, ::1] wv = W
    cdef int ldw = 2 * H
    pre_f_np = np.empty((B, H))
    pre_c_np = np.empty((B, H))
    cdef double[:, ::1] pre_f = pre_f_np
    cdef double[:, ::1] pre_c = pre_c_np
    cdef double[:, ::1] fx = np.empty((B, H))
    cdef double[:, ::1] cur, nxt
    cdef double* pv
    cdef int t, bi, j
    cdef double f, c

    cur = states[0]
    for t in range(T):
        pv = &proj2[0, 0] if is_const else &proj3[t, 0, 0]
        with nogil:
            for bi in range(B):
                for j in range(H):
                    pre_f[bi, j] = pv[bi * 2 * H + j]
            gemm_rm(0, 0, B, H, H, 1.0, &cur[0, 0], H, &wv[0, 0], ldw,
                    1.0, &pre_f[0, 0], H)
            for bi in range(B):
                for j in range(H):
                    pre_f[bi, j] *= 0.5
        np.tanh(pre_f_np, out=pre_f_np)
        with nogil:
            for bi in range(B):
                for j in range(H):
                    f = 0.5 + 0.5 * pre_f[bi, j]
                    pre_f[bi, j] = f
                    fx[bi, j] = f * cur[bi, j]
                    pre_c[bi, j] = pv[bi * 2 * H + H + j]
            gemm_rm(0, 0, B, H, H, 1.0, &fx[0, 0], H, &wv[0, H], ldw,
                    1.0, &pre_c[0, 0], H)
        np.tanh(pre_c_np, out=pre_c_np)
        nxt = states[t + 1] if keep_states else states[(t + 1) % 2]
        with nogil:
            for bi in range(B):
                for j in range(H):
                    f = pre_f[bi, j]
                    c = pre_c[bi, j]
                    nxt[bi, j] = (1.0 - f) * cur[bi, j] + f * c
                    if want_cache:
                        cache[t, bi, j] = f
                        cache[t, bi, H + j] = c
        cur = nxt

    if keep_states:
        return states_np, cache_np
    return states_np[T % 2].copy(), cache_np


def _mgu_backward(cnp.ndarray W, cnp.ndarray b, cnp.ndarray inputs,
                  cnp.ndarray states_np, cnp.ndarray cache_np, cnp.ndarray grads_np):
    cdef int H = b.shape[0] // 2
    cdef int T = cache_np.shape[0]
    cdef int B = states_np.shape[1]
    cdef int n_in = W.shape[0] - H

    dgates_np = np.empty((T, B, 2 * H))
    cdef double[:, :, ::1] dgates = dgates_np
    cdef double[:, :, ::1] states = states_np
    cdef double[:, :, ::1] cache = cache_np
    cdef double[:, :, ::1] grads = grads_np
    cdef double[:, ::1] wv = W
    cdef int ldw = 2 * H
    cdef double[:, ::1] carry = np.zeros((B, H))
    cdef double[:, ::1] gx = np.empty((B, H))
    cdef double[:, ::1] dfx = np.empty((B, H))
    cdef int t, bi, j
    cdef double f, c, xp, df

    with nogil:
        for t in range(T - 1, -1, -1):
            for bi in range(B):
                for j in range(H):
                    gx[bi, j] = grads[t + 1, bi, j] + carry[bi, j]
                    f = cache[t, bi, j]
                    c = cache[t, bi, H + j]
                    dgates[t, bi, H + j] = (gx[bi, j] * f) * (1.0 - c * c)
                    carry[bi, j] = gx[bi, j] * (1.0 - f)
            gemm_rm(0, 1, B, H, H, 1.0, &dgates[t, 0, H], 2 * H,
                    &wv[0, H], ldw, 0.0, &dfx[0, 0], H)
            for bi in range(B):
                for j in range(H):
                    f = cache[t, bi, j]
                    c = cache[t, bi, H + j]
                    xp = states[t, bi, j]
                    df = gx[bi, j] * (c - xp) + dfx[bi, j] * xp
                    carry[bi, j] += dfx[bi, j] * f
                    dgates[t, bi, j] = df * f * (1.0 - f)
            gemm_rm(0, 1, B, H, H, 1.0, &dgates[t, 0, 0], 2 * H,
                    &wv[0, 0], ldw, 1.0, &carry[0, 0], H)

    dstate0 = np.asarray(carry) + grads_np[0]
    flat = dgates_np.reshape(T * B, 2 * H)
    xflat = states_np[:-1].reshape(T * B, H)
    fxflat = (cache_np[:, :, :H] * states_np[:-1]).reshape(T * B, H)
    dW = np.empty_like(W)
    dW[:H, :H] = xflat.T @ flat[:, :H]
    dW[:H, H:] = fxflat.T @ flat[:, H:]
    db = flat.sum(axis=0)
    dW[H:], dinputs = _input_grads(W, inputs, dgates_np, flat, H, n_in)
    return dW, db, dstate0, dinputs
