"""Vectorised numpy kernels: index evaluation and batched RK4 ray integration.

These are the reference implementations. ``numba_impl`` mirrors them loop by
loop; the test-suite checks both against each other.
"""

from __future__ import annotations

import numpy as np

from .layout import ANGULAR, CONSTANT, NSTATE, SAITO, WAVEGUIDE

_SQRT2 = np.sqrt(2.0)


def smoothstep(r, r_moll):
    """Quintic blend: 0 for r <= r_moll/2, 1 for r >= r_moll, C^2 in between.

    Returns (chi, dchi/dr, d2chi/dr2).
    """
    half = 0.5 * r_moll
    s = np.clip((r - half) / half, 0.0, 1.0)
    chi = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    d1 = 30.0 * s * s * (1.0 - s) ** 2 / half
    d2 = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (half * half)
    return chi, d1, d2


def fourier_profile(theta, c0, a, b):
    """n_inf(theta) = c0 + sum_k a_k cos k theta + b_k sin k theta and 3 derivatives."""
    theta = np.asarray(theta, dtype=float)
    v = np.full_like(theta, c0)
    d1 = np.zeros_like(theta)
    d2 = np.zeros_like(theta)
    d3 = np.zeros_like(theta)
    for k in range(1, len(a) + 1):
        ck = np.cos(k * theta)
        sk = np.sin(k * theta)
        ak, bk = a[k - 1], b[k - 1]
        v += ak * ck + bk * sk
        d1 += k * (-ak * sk + bk * ck)
        d2 += -k * k * (ak * ck + bk * sk)
        d3 += k**3 * (ak * sk - bk * ck)
    return v, d1, d2, d3


def sech_soliton(s):
    """Q(s) = sech(s / sqrt 2) with first and second derivatives."""
    z = np.abs(np.asarray(s, dtype=float)) / _SQRT2
    e = np.exp(-2.0 * z)
    sech = 2.0 * np.exp(-z) / (1.0 + e)
    tanh = np.sign(s) * (1.0 - e) / (1.0 + e)
    q1 = -sech * tanh / _SQRT2
    q2 = 0.5 * (sech * tanh * tanh - sech**3)
    return sech, q1, q2


def _polar_to_cartesian(c, s, r, f_r, f_t, f_rr, f_rt, f_tt):
    """Gradient and Hessian from polar derivatives (r > 0 assumed where used)."""
    safe = np.where(r > 0.0, r, 1.0)
    gt = f_t / safe
    g1 = f_r * c - gt * s
    g2 = f_r * s + gt * c
    a = f_rr
    b = f_r / safe + f_tt / (safe * safe)
    m = f_rt / safe - f_t / (safe * safe)
    h11 = a * c * c + b * s * s - 2.0 * m * c * s
    h22 = a * s * s + b * c * c + 2.0 * m * c * s
    h12 = (a - b) * c * s + m * (c * c - s * s)
    return g1, g2, h11, h12, h22


def _polar_field(kind, prm, r, theta):
    """Unmollified polar derivatives of n for the angular-type models."""
    if kind == SAITO:
        lam, amp = prm[0], prm[2]
        ct = np.cos(theta)
        st = np.sin(theta)
        zero = np.zeros_like(r)
        n = lam - amp * ct
        return n, zero, amp * st, zero, zero, amp * ct, lam
    # ANGULAR
    gam, dlt = prm[2], prm[3]
    K = int(prm[4])
    c0 = prm[5]
    a = prm[6 : 6 + K]
    b = prm[6 + K : 6 + 2 * K]
    N, N1, N2, _ = fourier_profile(theta, c0, a, b)
    safe = np.where(r > 0.0, r, 1.0)
    if gam != 0.0:
        w = gam * safe ** (-dlt)
    else:
        w = np.zeros_like(r)
    n = N * (1.0 + w)
    n_r = -dlt * w / safe * N
    n_t = N1 * (1.0 + w)
    n_rr = dlt * (dlt + 1.0) * w / (safe * safe) * N
    n_rt = -dlt * w / safe * N1
    n_tt = N2 * (1.0 + w)
    r_m = prm[1]
    mean = c0 * (1.0 + (gam * r_m ** (-dlt) if (gam != 0.0 and r_m > 0.0) else 0.0))
    return n, n_r, n_t, n_rr, n_rt, n_tt, mean


def index_eval(kind, prm, x1, x2):
    """Evaluate n, grad n and the Hessian of n at arrays of points.

    Returns six arrays ``(n, g1, g2, h11, h12, h22)`` with the broadcast shape
    of ``x1, x2``.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    x1, x2 = np.broadcast_arrays(x1, x2)
    zero = np.zeros(x1.shape)
    if kind == CONSTANT:
        return zero + prm[0], zero, zero.copy(), zero.copy(), zero.copy(), zero.copy()
    if kind == WAVEGUIDE:
        lw = prm[0]
        q, q1, q2 = sech_soliton(lw * x2)
        n = lw * lw * q * q + 1.0 - 0.5 * lw * lw
        g2 = 2.0 * lw**3 * q * q1
        h22 = 2.0 * lw**4 * (q1 * q1 + q * q2)
        return n, zero, g2, zero.copy(), zero.copy(), h22
    r = np.hypot(x1, x2)
    theta = np.arctan2(x2, x1)
    safe = np.where(r > 0.0, r, 1.0)
    c = np.where(r > 0.0, x1 / safe, 1.0)
    s = np.where(r > 0.0, x2 / safe, 0.0)
    f, f_r, f_t, f_rr, f_rt, f_tt, mean = _polar_field(kind, prm, r, theta)
    r_m = prm[1]
    if r_m > 0.0:
        chi, d1, d2 = smoothstep(r, r_m)
        dev = f - mean
        f_rr = d2 * dev + 2.0 * d1 * f_r + chi * f_rr
        f_rt = d1 * f_t + chi * f_rt
        f_r = d1 * dev + chi * f_r
        f_t = chi * f_t
        f_tt = chi * f_tt
        f = mean + chi * dev
    g1, g2, h11, h12, h22 = _polar_to_cartesian(c, s, r, f_r, f_t, f_rr, f_rt, f_tt)
    return f, g1, g2, h11, h12, h22


def _rhs(kind, prm, inv_lam, y):
    x1, x2 = y[:, 0], y[:, 1]
    n, g1, g2, h11, h12, h22 = index_eval(kind, prm, x1, x2)
    out = np.empty_like(y)
    out[:, 0] = 2.0 * y[:, 2]
    out[:, 1] = 2.0 * y[:, 3]
    out[:, 2] = inv_lam * g1
    out[:, 3] = inv_lam * g2
    out[:, 4] = 2.0 * inv_lam * n
    out[:, 5] = inv_lam * (x1 * g1 + x2 * g2)
    out[:, 6] = 2.0 * y[:, 8]
    out[:, 7] = 2.0 * y[:, 9]
    out[:, 8] = inv_lam * (h11 * y[:, 6] + h12 * y[:, 7])
    out[:, 9] = inv_lam * (h12 * y[:, 6] + h22 * y[:, 7])
    return out


def initial_states(alpha, p0):
    """Bicharacteristic launch states at the origin for launch angles ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    y = np.zeros((alpha.size, NSTATE))
    ca, sa = np.cos(alpha), np.sin(alpha)
    y[:, 2] = p0 * ca
    y[:, 3] = p0 * sa
    y[:, 8] = -p0 * sa
    y[:, 9] = p0 * ca
    return y


def _step(kind, prm, inv_lam, y, h):
    k1 = _rhs(kind, prm, inv_lam, y)
    k2 = _rhs(kind, prm, inv_lam, y + 0.5 * h * k1)
    k3 = _rhs(kind, prm, inv_lam, y + 0.5 * h * k2)
    k4 = _rhs(kind, prm, inv_lam, y + h * k3)
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def substeps(y, h, ref_c, r_floor, ref_max):
    """Number of RK4 substeps per coarse step, from the state at its start.

    ``ceil(ref_c * h * |dX/dt| / max(|X|, r_floor))`` clipped to
    ``[1, ref_max]``: a ray moving fast relative to its distance from the
    origin (where the models vary on the scale |X|) gets subdivided.
    ``ref_c <= 0`` disables subdivision.
    """
    if ref_c <= 0.0:
        return np.ones(y.shape[0], dtype=np.int64)
    r = np.maximum(np.hypot(y[:, 0], y[:, 1]), r_floor)
    speed = 2.0 * np.hypot(y[:, 2], y[:, 3])
    m = np.ceil(ref_c * h * speed / r)
    return np.clip(m, 1.0, ref_max).astype(np.int64)


def _advance(kind, prm, inv_lam, y, h, ref_c, r_floor, ref_max):
    """One coarse step of size ``h`` (per row) split into state-dependent substeps."""
    h = np.broadcast_to(np.asarray(h, dtype=float), (y.shape[0],))
    m = substeps(y, h, ref_c, r_floor, ref_max)
    out = np.empty_like(y)
    for mk in np.unique(m):
        sel = m == mk
        ys = y[sel]
        hs = (h[sel] / mk)[:, None]
        for _ in range(int(mk)):
            ys = _step(kind, prm, inv_lam, ys, hs)
        out[sel] = ys
    return out


def rk4_final(kind, prm, lam, p0, alpha, h, nsteps, ref_c, r_floor, ref_max):
    """Integrate each ray ``i`` with ``nsteps[i]`` coarse steps of size ``h[i]``.

    Coarse steps are subdivided as decided by :func:`substeps`.
    Returns the final state array of shape (len(alpha), NSTATE).
    """
    y = initial_states(alpha, p0)
    h = np.asarray(h, dtype=float)
    nsteps = np.asarray(nsteps, dtype=np.int64)
    inv_lam = 1.0 / lam
    total = int(nsteps.max()) if nsteps.size else 0
    for step in range(total):
        act = nsteps > step
        if not act.any():
            break
        y[act] = _advance(kind, prm, inv_lam, y[act], h[act], ref_c, r_floor, ref_max)
    return y


def rk4_record(kind, prm, lam, p0, alpha, dt, nsteps, every, safety, ref_c, r_floor, ref_max):
    """Integrate all rays with a common coarse step, recording every ``every`` steps.

    Returns ``(records, escaped)`` where records has shape
    (len(alpha), nsteps // every + 1, NSTATE) and ``escaped`` flags rays whose
    position left the disk of radius ``safety``.
    """
    y = initial_states(alpha, p0)
    nrec = nsteps // every + 1
    rec = np.empty((y.shape[0], nrec, NSTATE))
    rec[:, 0] = y
    escaped = np.zeros(y.shape[0], dtype=bool)
    inv_lam = 1.0 / lam
    for step in range(1, nsteps + 1):
        y = _advance(kind, prm, inv_lam, y, dt, ref_c, r_floor, ref_max)
        escaped |= y[:, 0] ** 2 + y[:, 1] ** 2 > safety * safety
        if step % every == 0:
            rec[:, step // every] = y
    return rec, escaped
