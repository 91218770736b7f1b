"""Closed-form waveguide counterexample.

    u(x, y) = Q_lam(y) theta(|x|) exp(i k |x|),   k = sqrt(1 + i eps), Im k > 0,
    Q_lam(y) = Q(lam y),  Q(s) = sech(s / sqrt 2),  Q'' + (Q^2 - 1/2) Q = 0,
    n_lam = lam^2 Q_lam^2 + 1 - lam^2/2,

solves Delta u + (n_lam + i eps) u = f_eps with
f_eps = (2 i k theta'(|x|) + theta''(|x|)) Q_lam(y) exp(i k |x|)
(the sign factor sig(x) of the even bump's x-derivative is absorbed).
(In the solver's sign convention the source is -f_eps.)  Only |x|, the
absolute value of the first coordinate, enters; theta vanishes for |x| < 1.

The tangential energy int |grad_tau u|^2 / (1 + r) grows like ln(1/eps)
while the conjugated energy and N(f_eps) stay put.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from . import norms

SQRT2 = math.sqrt(2.0)
# int_R Q'(s)^2 ds for Q = sech(s/sqrt 2)
Q1_SQ_INTEGRAL = SQRT2 / 3.0
# int_R Q(s)^2 ds
Q_SQ_INTEGRAL = 2.0 * SQRT2


class WaveguideError(ValueError):
    pass


class QuadratureUnderResolved(RuntimeError):
    pass


@dataclass(frozen=True)
class WaveguideParams:
    lam: float = 0.3
    eps: float = 1e-2
    y_max: float | None = None
    x_max: float | None = None
    points_per_panel: int = 8

    def __post_init__(self):
        if not 0.0 < self.lam < 0.5:
            raise WaveguideError(f"lambda must lie in (0, 1/2), got {self.lam}")
        if not 0.0 < self.eps < 1.0:
            raise WaveguideError(f"eps must lie in (0, 1), got {self.eps}")
        if self.points_per_panel < 2:
            raise WaveguideError("points_per_panel must be >= 2")

    @property
    def k(self) -> complex:
        return complex(np.sqrt(1.0 + 1j * self.eps))

    @property
    def Y(self) -> float:
        """Transverse truncation: Q_lam(Y)^2 < 1e-16 needs lam Y / sqrt 2 > 19."""
        return self.y_max if self.y_max is not None else max(40.0, 30.0 / self.lam)

    @property
    def X(self) -> float:
        return self.x_max if self.x_max is not None else 20.0 / self.eps

    def with_eps(self, eps: float) -> "WaveguideParams":
        d = asdict(self)
        d["eps"] = eps
        return WaveguideParams(**d)


def soliton(y):
    """(Q, Q', Q'') for Q(y) = sech(y / sqrt 2)."""
    y = np.asarray(y, dtype=float)
    s = y / SQRT2
    Q = 1.0 / np.cosh(s)
    T = np.tanh(s)
    Q1 = -Q * T / SQRT2
    Q2 = 0.5 * Q * (T * T - Q * Q)  # d/ds(-Q T) / 2
    return Q, Q1, Q2


def soliton_residual(y) -> np.ndarray:
    Q, _, Q2 = soliton(y)
    return np.abs(Q2 + (Q * Q - 0.5) * Q)


def bump(s):
    """(theta, theta', theta'') of the smooth step: 0 for s <= 1, 1 for s >= 2."""
    s = np.asarray(s, dtype=float)
    th = np.where(s >= 2.0, 1.0, 0.0)
    d1 = np.zeros_like(s)
    d2 = np.zeros_like(s)
    mid = (s > 1.0 + 1e-9) & (s < 2.0 - 1e-9)
    a = s[mid] - 1.0
    b = 2.0 - s[mid]
    z = 1.0 / b - 1.0 / a  # theta = expit(-(1/a - 1/b))
    sg = expit(z)
    z1 = 1.0 / a**2 + 1.0 / b**2
    z2 = -2.0 / a**3 + 2.0 / b**3
    w = sg * (1.0 - sg)
    th[mid] = sg
    d1[mid] = w * z1
    d2[mid] = w * ((1.0 - 2.0 * sg) * z1 * z1 + z2)
    # endpoints of the tiny excluded band: value is 0 or 1 to all digits
    th[(s > 1.0) & (s <= 1.0 + 1e-9)] = 0.0
    th[(s < 2.0) & (s >= 2.0 - 1e-9)] = 1.0
    return th, d1, d2


def index(params: WaveguideParams, y):
    Q, _, _ = soliton(params.lam * np.asarray(y, dtype=float))
    return params.lam**2 * Q * Q + 1.0 - 0.5 * params.lam**2


def fields(params: WaveguideParams, x, y):
    """(u, f, n) at the points (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ax = np.abs(x)
    k = params.k
    Q, _, _ = soliton(params.lam * y)
    th, t1, t2 = bump(ax)
    e = np.exp(1j * k * ax)
    u = Q * th * e
    f = (2j * k * t1 + t2) * Q * e
    return u, f, index(params, y)


def derivatives(params: WaveguideParams, x, y):
    """(u_x, u_y, u_xx, u_yy) analytically."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lam, k = params.lam, params.k
    ax = np.abs(x)
    sig = np.sign(x)
    Q, Q1, Q2 = soliton(lam * y)
    th, t1, t2 = bump(ax)
    e = np.exp(1j * k * ax)
    ux = sig * (t1 + 1j * k * th) * Q * e
    uxx = (t2 + 2j * k * t1 - k * k * th) * Q * e
    uy = lam * Q1 * th * e
    uyy = lam * lam * Q2 * th * e
    return ux, uy, uxx, uyy


def pde_residual(params: WaveguideParams, x, y) -> np.ndarray:
    """|Delta u + (n + i eps) u - f| at the points."""
    u, f, n = fields(params, x, y)
    _, _, uxx, uyy = derivatives(params, x, y)
    return np.abs(uxx + uyy + (n + 1j * params.eps) * u - f)


def phase_is_not_eikonal(params: WaveguideParams, samples: int = 101) -> bool:
    """True when phi = k|x| misses |grad phi|^2 = n somewhere (it always does)."""
    y = np.linspace(-params.Y, params.Y, samples)
    return bool(np.max(np.abs(params.k**2 - index(params, y))) > 1e-12)


# -- quadrature -------------------------------------------------------------

def _panels(edges, m):
    xg, wg = np.polynomial.legendre.leggauss(m)
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1, None], edges[1:, None]
    x = 0.5 * (a + b) + 0.5 * (b - a) * xg
    w = 0.5 * (b - a) * wg
    return x.ravel(), np.broadcast_to(w, x.shape).ravel()


def _x_edges(X: float, refine: int = 1):
    inner = np.linspace(1.0, 2.0, 16 * refine + 1)
    mid = np.linspace(2.0, 4.0, 4 * refine + 1)[1:]
    n_log = max(1, int(math.ceil(math.log(X / 4.0) / math.log(1.25)))) * refine if X > 4 else 0
    outer = np.geomspace(4.0, X, n_log + 1)[1:] if n_log else np.array([])
    return np.concatenate([inner, mid, outer])


def _y_edges(Y: float, refine: int = 1):
    near = np.linspace(0.0, min(8.0, Y), 16 * refine + 1)
    if Y <= 8.0:
        return near
    n_far = int(math.ceil(math.log(Y / 8.0) / math.log(1.25))) * refine
    return np.concatenate([near, np.geomspace(8.0, Y, n_far + 1)[1:]])


def _tangential(params: WaveguideParams, refine: int, m: int) -> float:
    x, wx = _panels(_x_edges(params.X, refine), m)
    y, wy = _panels(_y_edges(params.Y, refine), m)
    lam, k = params.lam, params.k
    kap = k.imag
    th, t1, _ = bump(x)
    Q, Q1, _ = soliton(lam * y)
    # |e|^2 = exp(-2 Im k x); the common phase drops out of |u_tau|^2
    env = np.exp(-2.0 * kap * x)
    A = (t1 + 1j * k * th)[:, None] * Q[None, :]  # u_x / e
    B = (lam * th)[:, None] * Q1[None, :]  # u_y / e
    X, Yg = np.meshgrid(x, y, indexing="ij")
    r = np.hypot(X, Yg)
    ut = (-Yg * A + X * B) / r
    dens = np.abs(ut) ** 2 * env[:, None] / (1.0 + r)
    return 4.0 * float(wx @ dens @ wy)  # both signs of x and of y


def tangential_energy(params: WaveguideParams, check: bool = True, rtol: float = 0.01) -> float:
    """T(eps) = int |grad_tau u|^2 / (1 + |(x, y)|) over the plane.

    With ``check`` the value is recomputed with twice the points per panel
    and twice the panels; a relative change above ``rtol`` raises.
    """
    m = params.points_per_panel
    coarse = _tangential(params, 1, m)
    if not check:
        return coarse
    fine = _tangential(params, 2, 2 * m)
    if abs(fine - coarse) > rtol * abs(fine):
        raise QuadratureUnderResolved(
            f"T changed by {abs(fine - coarse) / abs(fine):.2%} under refinement (eps={params.eps})"
        )
    return fine


@dataclass
class BlowupFit:
    eps: list
    T: list
    slope: float
    intercept: float
    r2: float

    def to_dict(self) -> dict:
        return asdict(self)


def linear_fit(xs, ys):
    """Least squares y = slope x + intercept with r^2."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    A = np.column_stack([xs, np.ones_like(xs)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ys, rcond=None)
    pred = A @ np.array([slope, intercept])
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def tangential_blowup(params: WaveguideParams, eps_list, check: bool = True) -> BlowupFit:
    """T(eps) per eps and the fit T = slope ln(1/eps) + intercept."""
    eps_list = [float(e) for e in eps_list]
    if any(not 1e-5 < e < 1.0 for e in eps_list):
        raise WaveguideError("each eps must lie in (1e-5, 1)")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise WaveguideError("eps_list must be strictly decreasing")
    T = [tangential_energy(params.with_eps(e), check=check) for e in eps_list]
    slope, intercept, r2 = linear_fit([math.log(1.0 / e) for e in eps_list], T)
    return BlowupFit(eps_list, T, slope, intercept, r2)


def _bump_integrals(m: int = 64):
    x, w = _panels(np.linspace(1.0, 2.0, 17), m)
    th, t1, _ = bump(x)
    return float(w @ (t1 * t1)), float(w @ (th * th))


def conjugated_energy(params: WaveguideParams, x_window: float = 4.0) -> dict:
    """int_{|x| <= x_window} |grad(Q_lam(y) theta(|x|))|^2 dx dy.

    The conjugated field exp(-i k|x|) u = Q_lam theta does not involve eps,
    so the value is eps-independent by construction.  Over the whole strip
    the transverse part grows linearly in the window, at the rate
    2 int (Q_lam')^2 dy per unit length, so the integral is reported on a
    window together with that density.
    """
    if x_window < 2.0:
        raise WaveguideError("x_window must be >= 2")
    lam = params.lam
    i_t1, i_th = _bump_integrals()
    q_sq = Q_SQ_INTEGRAL / lam  # int Q_lam^2 dy
    q1_sq = lam * Q1_SQ_INTEGRAL  # int (Q_lam')^2 dy
    transition = 2.0 * q_sq * i_t1
    transverse = 2.0 * q1_sq * (i_th + (x_window - 2.0))
    return {
        "value": transition + transverse,
        "transition_term": transition,
        "transverse_term": transverse,
        "transverse_density": 2.0 * q1_sq,
        "x_window": x_window,
        "bound_reference": 1.0 + q1_sq,
    }


def _sech2_int(lam, a, b):
    """int_a^b Q_lam(y)^2 dy (closed form, elementwise)."""
    c = lam / SQRT2
    return (np.tanh(c * b) - np.tanh(c * a)) / c


def source_annuli(params: WaveguideParams, m: int = 64) -> dict:
    """j -> int_{C(j)} |f_eps|^2, C(j) = {2^j <= r < 2^(j+1)}.

    f lives on 1 < |x| < 2; for each such x the annulus cuts y into exact
    intervals, so only the x integral is numerical.
    """
    x, w = _panels(np.linspace(1.0, 2.0, 17), m)
    k = params.k
    _, t1, t2 = bump(x)
    dens_x = np.abs(2j * k * t1 + t2) ** 2 * np.exp(-2.0 * k.imag * x)
    out = {}
    j = 0
    while True:
        lo2, hi2 = 4.0**j, 4.0 ** (j + 1)
        a = np.sqrt(np.maximum(lo2 - x * x, 0.0))
        b = np.sqrt(np.maximum(hi2 - x * x, 0.0))
        val = 4.0 * float(w @ (dens_x * _sech2_int(params.lam, a, b)))  # signs of x and y
        out[j] = val
        if 2.0**j > params.Y:
            break
        j += 1
    return out


def source_norm(params: WaveguideParams) -> float:
    return norms.dyadic_sum(source_annuli(params))


def triple_u(params: WaveguideParams, R_max: float | None = None, n_radii: int = 200, m: int = 256):
    """(sup, argmax) of (1/R) int_{B(R)} |u|^2 over R in [1, R_max]."""
    R_max = params.X if R_max is None else float(R_max)
    lam = params.lam
    kap = params.k.imag
    xg, wg = np.polynomial.legendre.leggauss(m)
    best, arg = 0.0, 1.0
    for R in np.geomspace(1.0, R_max, n_radii):
        if R <= 1.0:
            continue
        # x = R sin s removes the square-root endpoint at x = R
        s0 = math.asin(1.0 / R)
        s = 0.5 * (s0 + math.pi / 2) + 0.5 * (math.pi / 2 - s0) * xg
        ws = 0.5 * (math.pi / 2 - s0) * wg
        x = R * np.sin(s)
        th, _, _ = bump(x)
        ymax = R * np.cos(s)
        inner = _sech2_int(lam, 0.0, ymax)
        val = 4.0 * float(np.sum(ws * R * np.cos(s) * th * th * np.exp(-2 * kap * x) * inner)) / R
        if val > best:
            best, arg = val, float(R)
    return best, arg


@dataclass
class SourceNorms:
    eps: list
    N_f: list
    triple_u: list
    stability_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def source_norms(params: WaveguideParams, eps_list) -> SourceNorms:
    Nf, Tu = [], []
    for e in eps_list:
        p = params.with_eps(float(e))
        Nf.append(source_norm(p))
        Tu.append(triple_u(p)[0])
    return SourceNorms([float(e) for e in eps_list], Nf, Tu, max(Nf) / min(Nf))
