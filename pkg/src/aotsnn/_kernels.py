"""Fused LIF time loops (numba). Arrays are flattened to ``(T, M)``."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def lif_forward(currents, T, lam, theta, lagged):
    static = currents.shape[0] == 1
    m = currents.shape[1]
    u = np.empty((T, m))
    s = np.empty((T, m))
    for j in range(m):
        carry = 0.0
        s_prev = 0.0
        for t in range(T):
            i_t = currents[0, j] if static else currents[t, j]
            if lagged:
                v = lam * carry + i_t - theta * s_prev
            else:
                v = lam * carry + i_t
            sp = 1.0 if v > theta else 0.0
            u[t, j] = v
            s[t, j] = sp
            carry = v if lagged else v - theta * sp
            s_prev = sp
    return u, s


@njit(cache=True)
def lif_backward(u, s, grad_s, lam, theta, alpha, lagged, static):
    T, m = u.shape
    grad_i = np.zeros((1, m)) if static else np.empty((T, m))
    k = 0.5 * math.pi * alpha
    dlam = 0.0
    for j in range(m):
        g_carry = 0.0
        g_reset = 0.0
        acc_static = 0.0
        for t in range(T - 1, -1, -1):
            x = u[t, j] - theta
            sg = alpha / (2.0 * (1.0 + (k * x) * (k * x)))
            gs = grad_s[t, j] + g_reset
            if not lagged:
                gs -= theta * g_carry
            gu = g_carry + gs * sg
            if static:
                acc_static += gu
            else:
                grad_i[t, j] = gu
            if t > 0:
                prev = u[t - 1, j] if lagged else u[t - 1, j] - theta * s[t - 1, j]
                dlam += gu * prev
            g_carry = lam * gu
            g_reset = -theta * gu if lagged else 0.0
        if static:
            grad_i[0, j] = acc_static
    return grad_i, dlam
