"""Compiled inner loops for the LSTM passes and Adam.

For large layers the LSTM forward stays in numpy: its cost is dominated by
tanh, which numpy vectorizes and numba evaluates one element at a time.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def lstm_backward(g, gates, cs, tcs, w_rec_t, dz_all):
    """Back-propagate through time; writes pre-activation gate grads into ``dz_all``.

    ``gates`` holds the activations (input, forget, candidate, output blocks),
    ``cs[:, t + 1]`` the cell state after step t and ``tcs`` its tanh.
    """
    B, T, H = g.shape
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dz_t = np.empty((B, 4 * H))
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                ig = gates[b, t, j]
                fg = gates[b, t, H + j]
                gg = gates[b, t, 2 * H + j]
                og = gates[b, t, 3 * H + j]
                tc = tcs[b, t, j]
                dh = g[b, t, j] + dh_next[b, j]
                dc = dh * og * (1.0 - tc * tc) + dc_next[b, j]
                di = dc * gg * ig * (1.0 - ig)
                df = dc * cs[b, t, j] * fg * (1.0 - fg)
                dg = dc * ig * (1.0 - gg * gg)
                do = dh * tc * og * (1.0 - og)
                dz_all[b, t, j] = di
                dz_all[b, t, H + j] = df
                dz_all[b, t, 2 * H + j] = dg
                dz_all[b, t, 3 * H + j] = do
                dz_t[b, j] = di
                dz_t[b, H + j] = df
                dz_t[b, 2 * H + j] = dg
                dz_t[b, 3 * H + j] = do
                dc_next[b, j] = dc * fg
        if t > 0:
            dh_next = dz_t @ w_rec_t


@numba.njit(cache=True)
def adam_update(param, grad, m, v, delta, lr_corr, beta1, beta2, v_corr, eps):
    """In-place Adam step; ``delta`` receives new - old for every element.

    ``lr_corr`` is lr / (1 - beta1**t) and ``v_corr`` is 1 / sqrt(1 - beta2**t).
    """
    for k in range(param.size):
        gk = grad[k]
        mk = beta1 * m[k] + (1.0 - beta1) * gk
        vk = beta2 * v[k] + (1.0 - beta2) * gk * gk
        m[k] = mk
        v[k] = vk
        old = param[k]
        new = old - lr_corr * mk / (math.sqrt(vk) * v_corr + eps)
        param[k] = new
        delta[k] = new - old


@numba.njit(cache=True)
def lstm_forward(xw, w_rec, gates, cs, tcs, hs):
    """Scalar-loop LSTM forward over precomputed ``x @ w_in + bias``.

    Writes the same buffers as the numpy forward. Faster only for small
    layers, where per-call numpy overhead dominates.
    """
    B, T, H4 = xw.shape
    H = H4 // 4
    h = np.zeros((B, H))
    for t in range(T):
        z = h @ w_rec
        for b in range(B):
            for j in range(H4):
                v = z[b, j] + xw[b, t, j]
                if 2 * H <= j < 3 * H:
                    gates[b, t, j] = math.tanh(v)
                else:
                    gates[b, t, j] = 0.5 * math.tanh(0.5 * v) + 0.5
            for j in range(H):
                c = gates[b, t, H + j] * cs[b, t, j] + gates[b, t, j] * gates[b, t, 2 * H + j]
                cs[b, t + 1, j] = c
                tc = math.tanh(c)
                tcs[b, t, j] = tc
                hv = gates[b, t, 3 * H + j] * tc
                hs[b, t, j] = hv
                h[b, j] = hv
