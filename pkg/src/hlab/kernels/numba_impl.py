"""numba-compiled kernels with the same signatures as ``numpy_impl``."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .layout import ANGULAR, CONSTANT, NSTATE, SAITO, WAVEGUIDE

_SQRT2 = math.sqrt(2.0)


@njit(cache=True)
def _smoothstep(r, r_moll):
    half = 0.5 * r_moll
    s = (r - half) / half
    if s <= 0.0:
        return 0.0, 0.0, 0.0
    if s >= 1.0:
        return 1.0, 0.0, 0.0
    chi = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    d1 = 30.0 * s * s * (1.0 - s) ** 2 / half
    d2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (half * half)
    return chi, d1, d2


@njit(cache=True)
def _soliton(s):
    z = abs(s) / _SQRT2
    e = math.exp(-2.0 * z)
    sech = 2.0 * math.exp(-z) / (1.0 + e)
    sgn = 1.0 if s > 0.0 else (-1.0 if s < 0.0 else 0.0)
    tanh = sgn * (1.0 - e) / (1.0 + e)
    return sech, -sech * tanh / _SQRT2, 0.5 * (sech * tanh * tanh - sech**3)


@njit(cache=True)
def _eval_point(kind, prm, x1, x2):
    if kind == CONSTANT:
        return prm[0], 0.0, 0.0, 0.0, 0.0, 0.0
    if kind == WAVEGUIDE:
        lw = prm[0]
        q, q1, q2 = _soliton(lw * x2)
        n = lw * lw * q * q + 1.0 - 0.5 * lw * lw
        return n, 0.0, 2.0 * lw**3 * q * q1, 0.0, 0.0, 2.0 * lw**4 * (q1 * q1 + q * q2)

    r = math.hypot(x1, x2)
    theta = math.atan2(x2, x1)
    if r > 0.0:
        c = x1 / r
        s = x2 / r
        safe = r
    else:
        c = 1.0
        s = 0.0
        safe = 1.0
    r_m = prm[1]
    if kind == SAITO:
        lam = prm[0]
        amp = prm[2]
        ct = math.cos(theta)
        st = math.sin(theta)
        f = lam - amp * ct
        f_r = 0.0
        f_t = amp * st
        f_rr = 0.0
        f_rt = 0.0
        f_tt = amp * ct
        mean = lam
    else:
        gam = prm[2]
        dlt = prm[3]
        K = int(prm[4])
        c0 = prm[5]
        N = c0
        N1 = 0.0
        N2 = 0.0
        for k in range(1, K + 1):
            ak = prm[5 + k]
            bk = prm[5 + K + k]
            ck = math.cos(k * theta)
            sk = math.sin(k * theta)
            N += ak * ck + bk * sk
            N1 += k * (-ak * sk + bk * ck)
            N2 += -k * k * (ak * ck + bk * sk)
        w = gam * safe ** (-dlt) if gam != 0.0 else 0.0
        f = N * (1.0 + w)
        f_r = -dlt * w / safe * N
        f_t = N1 * (1.0 + w)
        f_rr = dlt * (dlt + 1.0) * w / (safe * safe) * N
        f_rt = -dlt * w / safe * N1
        f_tt = N2 * (1.0 + w)
        if gam != 0.0 and r_m > 0.0:
            mean = c0 * (1.0 + gam * r_m ** (-dlt))
        else:
            mean = c0
    if r_m > 0.0:
        chi, d1, d2 = _smoothstep(r, r_m)
        dev = f - mean
        f_rr = d2 * dev + 2.0 * d1 * f_r + chi * f_rr
        f_rt = d1 * f_t + chi * f_rt
        f_r = d1 * dev + chi * f_r
        f_t = chi * f_t
        f_tt = chi * f_tt
        f = mean + chi * dev
    gt = f_t / safe
    g1 = f_r * c - gt * s
    g2 = f_r * s + gt * c
    a = f_rr
    b = f_r / safe + f_tt / (safe * safe)
    m = f_rt / safe - f_t / (safe * safe)
    h11 = a * c * c + b * s * s - 2.0 * m * c * s
    h22 = a * s * s + b * c * c + 2.0 * m * c * s
    h12 = (a - b) * c * s + m * (c * c - s * s)
    return f, g1, g2, h11, h12, h22


@njit(cache=True)
def index_eval(kind, prm, x1, x2):
    x1 = x1.ravel()
    x2 = x2.ravel()
    m = x1.size
    out = np.empty((6, m))
    for i in range(m):
        v = _eval_point(kind, prm, x1[i], x2[i])
        for j in range(6):
            out[j, i] = v[j]
    return out


@njit(cache=True)
def _rhs(kind, prm, inv_lam, y, out):
    n, g1, g2, h11, h12, h22 = _eval_point(kind, prm, y[0], y[1])
    out[0] = 2.0 * y[2]
    out[1] = 2.0 * y[3]
    out[2] = inv_lam * g1
    out[3] = inv_lam * g2
    out[4] = 2.0 * inv_lam * n
    out[5] = inv_lam * (y[0] * g1 + y[1] * g2)
    out[6] = 2.0 * y[8]
    out[7] = 2.0 * y[9]
    out[8] = inv_lam * (h11 * y[6] + h12 * y[7])
    out[9] = inv_lam * (h12 * y[6] + h22 * y[7])


@njit(cache=True)
def _init(alpha, p0, y):
    for j in range(NSTATE):
        y[j] = 0.0
    ca = math.cos(alpha)
    sa = math.sin(alpha)
    y[2] = p0 * ca
    y[3] = p0 * sa
    y[8] = -p0 * sa
    y[9] = p0 * ca


@njit(cache=True)
def _step(kind, prm, inv_lam, y, h, k1, k2, k3, k4, tmp):
    _rhs(kind, prm, inv_lam, y, k1)
    for j in range(NSTATE):
        tmp[j] = y[j] + 0.5 * h * k1[j]
    _rhs(kind, prm, inv_lam, tmp, k2)
    for j in range(NSTATE):
        tmp[j] = y[j] + 0.5 * h * k2[j]
    _rhs(kind, prm, inv_lam, tmp, k3)
    for j in range(NSTATE):
        tmp[j] = y[j] + h * k3[j]
    _rhs(kind, prm, inv_lam, tmp, k4)
    for j in range(NSTATE):
        y[j] = y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])


@njit(cache=True)
def substeps(y, h, ref_c, r_floor, ref_max):
    if ref_c <= 0.0:
        return 1
    r = max(math.hypot(y[0], y[1]), r_floor)
    speed = 2.0 * math.hypot(y[2], y[3])
    m = math.ceil(ref_c * h * speed / r)
    return int(min(max(m, 1.0), ref_max))


@njit(cache=True)
def _advance(kind, prm, inv_lam, y, h, ref_c, r_floor, ref_max, k1, k2, k3, k4, tmp):
    m = substeps(y, h, ref_c, r_floor, ref_max)
    hs = h / m
    for _ in range(m):
        _step(kind, prm, inv_lam, y, hs, k1, k2, k3, k4, tmp)


@njit(cache=True)
def rk4_final(kind, prm, lam, p0, alpha, h, nsteps, ref_c, r_floor, ref_max):
    m = alpha.size
    out = np.empty((m, NSTATE))
    inv_lam = 1.0 / lam
    y = np.empty(NSTATE)
    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    tmp = np.empty(NSTATE)
    for i in range(m):
        _init(alpha[i], p0, y)
        for _ in range(nsteps[i]):
            _advance(kind, prm, inv_lam, y, h[i], ref_c, r_floor, ref_max, k1, k2, k3, k4, tmp)
        out[i] = y
    return out


@njit(cache=True)
def rk4_record(kind, prm, lam, p0, alpha, dt, nsteps, every, safety, ref_c, r_floor, ref_max):
    m = alpha.size
    nrec = nsteps // every + 1
    rec = np.empty((m, nrec, NSTATE))
    escaped = np.zeros(m, dtype=np.bool_)
    inv_lam = 1.0 / lam
    y = np.empty(NSTATE)
    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    tmp = np.empty(NSTATE)
    s2 = safety * safety
    for i in range(m):
        _init(alpha[i], p0, y)
        rec[i, 0] = y
        for step in range(1, nsteps + 1):
            _advance(kind, prm, inv_lam, y, dt, ref_c, r_floor, ref_max, k1, k2, k3, k4, tmp)
            if y[0] * y[0] + y[1] * y[1] > s2:
                escaped[i] = True
            if step % every == 0:
                rec[i, step // every] = y
    return rec, escaped
