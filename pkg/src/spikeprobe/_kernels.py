"""Fused time-loop kernels for the hard-threshold LIF hot path.

Scalars must be passed in the array dtype so the arithmetic (and therefore
every rounding step) matches the numpy reference loops exactly; the tests
compare both paths bit for bit.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def lif_scan(currents, decay, threshold):
    T, B, n = currents.shape
    U = np.empty_like(currents)
    S = np.empty_like(currents)
    u = np.zeros((B, n), dtype=currents.dtype)
    keep = np.zeros((B, n), dtype=currents.dtype)  # decay * (1 - s[t-1])
    for t in range(T):
        for b in range(B):
            for i in range(n):
                v = u[b, i] * keep[b, i] + currents[t, b, i]
                u[b, i] = v
                U[t, b, i] = v
                if v >= threshold:
                    S[t, b, i] = 1
                    keep[b, i] = 0
                else:
                    S[t, b, i] = 0
                    keep[b, i] = decay
    return U, S


@nb.njit(cache=True)
def lif_scan_backward(ds, U, S, decay, threshold, width, inv):
    """delta[t] = ds[t] * sg(U[t]) + decay * (1 - S[t]) * delta[t + 1]."""
    T, B, n = U.shape
    delta = np.empty_like(U)
    nxt = np.zeros((B, n), dtype=U.dtype)
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for i in range(n):
                sg = (width - abs(U[t, b, i] - threshold)) * inv
                local = ds[t, b, i] * sg if sg > 0 else ds[t, b, i] * 0
                d = local + (decay * (1 - S[t, b, i])) * nxt[b, i]
                delta[t, b, i] = d
                nxt[b, i] = d
    return delta


@nb.njit(cache=True)
def surrogate_mul(ds, U, threshold, width, inv):
    T, B, n = U.shape
    out = np.empty_like(U)
    for t in range(T):
        for b in range(B):
            for i in range(n):
                sg = (width - abs(U[t, b, i] - threshold)) * inv
                out[t, b, i] = ds[t, b, i] * sg if sg > 0 else ds[t, b, i] * 0
    return out
