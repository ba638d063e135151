"""Compiled inner loops for the LoS observation model.

Per observation u the model response is

    mu_u = g(r)/sqrt(N) * sum_n w_un * exp(+j k r_n(theta, r))

i.e. the conjugate inner product of the predicted LoS channel with the
transmitted beam. Loops run in a fixed order on a fixed schedule, so results
are bit-stable from run to run on the same machine.
"""
from __future__ import annotations

import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi
TWO_OVER_PI = 0.63661977236758134308
# Cody-Waite split of pi/2
PIO2_1 = 1.57079632673412561417e00
PIO2_2 = 6.07710050650619224932e-11
PIO2_3 = 2.02226624879595063154e-21

# reassociation lets LLVM vectorize the element sums; no inf/nan shortcuts
_FM = {"contract", "reassoc", "nsz", "arcp"}


@numba.njit(fastmath=_FM, error_model="numpy", inline="always")
def _sincos(x):
    """sin/cos accurate to ~1 ulp for |x| < 1e5, written to vectorize.

    libm sin/cos calls block SIMD; this reduces to [-pi/4, pi/4] and uses
    Taylor polynomials through degree 17, with quadrant fix-up by selects.
    """
    q = math.floor(x * TWO_OVER_PI + 0.5)
    r = ((x - q * PIO2_1) - q * PIO2_2) - q * PIO2_3
    z = r * r
    s = r * (1.0 + z * (-1.6666666666666666e-01 + z * (8.3333333333333332e-03 + z * (
        -1.9841269841269841e-04 + z * (2.7557319223985893e-06 + z * (-2.5052108385441720e-08 + z * (
            1.6059043836821613e-10 + z * (-7.6471637318198164e-13 + z * 2.8114572543455206e-15))))))))
    c = 1.0 + z * (-0.5 + z * (4.1666666666666664e-02 + z * (-1.3888888888888889e-03 + z * (
        2.4801587301587302e-05 + z * (-2.7557319223985888e-07 + z * (2.0876756987868100e-09 + z * (
            -1.1470745597729725e-11 + z * 4.7794773323873853e-14)))))))
    quad = q - 4.0 * math.floor(q * 0.25)
    swap = (quad == 1.0) or (quad == 3.0)
    ss = c if swap else s
    cc = s if swap else c
    cc = -cc if (quad == 1.0 or quad == 2.0) else cc
    ss = -ss if quad >= 2.0 else ss
    return ss, cc


@numba.njit(fastmath=_FM, error_model="numpy", cache=True)
def sincos(x):
    s = np.empty_like(x)
    c = np.empty_like(x)
    for i in range(x.shape[0]):
        s[i], c[i] = _sincos(x[i])
    return s, c


@numba.njit(fastmath=_FM, error_model="numpy", cache=True)
def los_response(theta, r, w_re, w_im, pos, lam, with_grad):
    """mu_u, d mu_u / d theta_u and d mu_u / d r_u for every observation."""
    P = theta.shape[0]
    N = pos.shape[0]
    k = TWO_PI / lam
    scale = 1.0 / math.sqrt(N)
    mu = np.empty(P, dtype=np.complex128)
    d_theta = np.zeros(P, dtype=np.complex128)
    d_r = np.zeros(P, dtype=np.complex128)
    phase = np.empty(N)
    inv_rn = np.empty(N)
    es = np.empty(N)
    ec = np.empty(N)
    for u in range(P):
        rr = r[u]
        s = math.sin(theta[u])
        c = math.cos(theta[u])
        frac = rr / lam
        # the global phase k*r is the only large one; wrap it before use
        gphase = TWO_PI * (frac - math.floor(frac))
        two_rs = 2.0 * rr * s
        # separate passes keep each loop SIMD-friendly
        for n in range(N):
            p = pos[n]
            num = p * p - two_rs * p
            rn = math.sqrt(rr * rr + num)
            phase[n] = gphase + k * (num / (rn + rr))
            inv_rn[n] = 1.0 / rn
        for n in range(N):
            es[n], ec[n] = _sincos(phase[n])
        a_re = 0.0
        a_im = 0.0
        t_re = 0.0
        t_im = 0.0
        q_re = 0.0
        q_im = 0.0
        if with_grad:
            for n in range(N):
                wr = w_re[u, n]
                wi = w_im[u, n]
                x_re = ec[n] * wr - es[n] * wi
                x_im = ec[n] * wi + es[n] * wr
                a_re += x_re
                a_im += x_im
                p = pos[n]
                drt = -rr * c * p * inv_rn[n]
                drr = (rr - s * p) * inv_rn[n]
                t_re += x_re * drt
                t_im += x_im * drt
                q_re += x_re * drr
                q_im += x_im * drr
        else:
            for n in range(N):
                wr = w_re[u, n]
                wi = w_im[u, n]
                a_re += ec[n] * wr - es[n] * wi
                a_im += ec[n] * wi + es[n] * wr
        g = lam / (4.0 * math.pi * rr) * scale
        m = complex(a_re * g, a_im * g)
        mu[u] = m
        if with_grad:
            # d/dx exp(j k r_n) = j k (d r_n / dx) exp(j k r_n)
            d_theta[u] = complex(-k * g * t_im, k * g * t_re)
            d_r[u] = -m / rr + complex(-k * g * q_im, k * g * q_re)
    return mu, d_theta, d_r
