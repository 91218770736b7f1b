"""Weighted norms, radiation-condition residuals and flux balances on a PolarGrid.

All radial integrals go through :meth:`PolarGrid.radial_weights`, so balls,
dyadic annuli and exterior regions share one quadrature. Balls and annuli
whose radii fall on cell faces (k * dr) are integrated without splitting
cells. Nothing is integrated over the unresolved disk r < r_inner.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .helmholtz_fd import ComplexField, PolarGrid, gradient
from .index_models import AngularProfile, IndexModel


# -- shared helpers -------------------------------------------------------

def _angular_sum(grid: PolarGrid, density: np.ndarray) -> np.ndarray:
    """Integrate a nodal density over theta, shell by shell."""
    return density.sum(axis=1) * grid.dtheta


def integrate(grid: PolarGrid, density: np.ndarray, a: float = 0.0, b: float = math.inf) -> float:
    """Integral of ``density`` over the grid points with ``a <= r <= b`` (area measure)."""
    return float(np.dot(grid.radial_weights(a, b), _angular_sum(grid, density)))


def ball_integrals(grid: PolarGrid, density: np.ndarray) -> np.ndarray:
    """Integral over B(r_k) for every grid radius r_k (trapezoid, k = 0..Nr-1)."""
    ang = _angular_sum(grid, density)
    r, dr = grid.r, grid.dr
    full = r * dr * ang
    full[0] = r[0] * (0.5 * dr) * ang[0]  # first cell starts at r_inner
    out = np.empty(grid.Nr, dtype=np.result_type(ang, float))
    out[0] = 0.0
    out[1:] = np.cumsum(full)[:-1] + r[1:] * (0.5 * dr) * ang[1:]
    return out


def dyadic_range(r_min: float, r_max: float) -> range:
    """Indices j whose annulus C(j) = [2^j, 2^(j+1)] meets [r_min, r_max]."""
    return range(int(math.floor(math.log2(r_min))), int(math.ceil(math.log2(r_max))))


def dyadic_sum(annulus_integrals: dict) -> float:
    """sum_j [2^(j+1) I_j]^(1/2) for a map j -> int_{C(j)} |f|^2."""
    return math.fsum(math.sqrt(2.0 ** (j + 1) * max(v, 0.0)) for j, v in sorted(annulus_integrals.items()))


def _nodal(x, grid: PolarGrid) -> np.ndarray:
    if isinstance(x, ComplexField):
        return x.values
    if callable(x):
        R, T = grid.mesh()
        return np.broadcast_to(x(R, T), grid.shape)
    return np.broadcast_to(np.asarray(x), grid.shape)


# -- norms ----------------------------------------------------------------

def triple_norm(
    u: ComplexField,
    R0: float = 0.0,
    weight=None,
    extra_radii: Sequence[float] = (),
) -> float:
    """sup over grid radii R in (R0, L] of (1/R) int_{B(R)} weight |u|^2.

    ``weight`` is an optional nodal multiplier (e.g. n for |||n^(1/2) u|||^2).
    ``extra_radii`` adds further sup points (used for dyadic radii).
    """
    return triple_norm_profile(u, R0, weight, extra_radii)[0]


def triple_norm_profile(u: ComplexField, R0: float = 0.0, weight=None, extra_radii: Sequence[float] = ()):
    """(sup, argmax R, radii, values) of R -> (1/R) int_{B(R)} weight |u|^2."""
    g = u.grid
    if R0 >= g.L:
        raise ValueError("R0 must be smaller than L")
    dens = np.abs(u.values) ** 2
    if weight is not None:
        dens = dens * _nodal(weight, g).real
    balls = ball_integrals(g, dens)
    keep = g.r > R0
    radii = list(g.r[keep])
    vals = list(balls[keep] / g.r[keep])
    ang = _angular_sum(g, dens)
    for R in extra_radii:
        if R0 < R <= g.L:
            radii.append(float(R))
            vals.append(float(np.dot(g.radial_weights(0.0, R), ang)) / R)
    if not vals:
        return 0.0, float("nan"), np.array([]), np.array([])
    radii = np.asarray(radii)
    vals = np.asarray(vals)
    k = int(np.argmax(vals))
    return float(vals[k]), float(radii[k]), radii, vals


@dataclass
class BesovDetail:
    value: float
    head: float
    terms: dict
    clipped: list
    J: int | None


def besov_detail(f: ComplexField, R0: float = 0.0) -> BesovDetail:
    """N_R0(f) = sum_{j>J} [2^(j+1) int_{C(j)} |f|^2]^(1/2) + [R0 int_{B(R0)} |f|^2]^(1/2)."""
    g = f.grid
    if R0 < 0:
        raise ValueError("R0 must be >= 0")
    dens = np.abs(f.values) ** 2
    ang = _angular_sum(g, dens)
    if R0 > 0:
        J = int(math.floor(math.log2(R0)))
        js = [j for j in dyadic_range(g.r_inner, g.L) if j > J]
        head = math.sqrt(R0 * float(np.dot(g.radial_weights(0.0, R0), ang)))
    else:
        J = None
        js = list(dyadic_range(g.r_inner, g.L))
        head = 0.0
    terms, clipped = {}, []
    for j in js:
        a, b = 2.0**j, 2.0 ** (j + 1)
        terms[j] = float(np.dot(g.radial_weights(a, b), ang))
        if b > g.L or a < g.r_inner:
            clipped.append(j)
    value = dyadic_sum(terms) + head
    return BesovDetail(value, head, terms, clipped, J)


def besov_norm(f: ComplexField, R0: float = 0.0) -> float:
    return besov_detail(f, R0).value


def weighted_l2(f: ComplexField, a: float = 2.0) -> float:
    """int |f|^2 (1 + |x|)^a."""
    R, _ = f.grid.mesh()
    return integrate(f.grid, np.abs(f.values) ** 2 * (1.0 + R) ** a)


# -- reports ---------------------------------------------------------------

@dataclass
class NormReport:
    triple_u: float = 0.0
    triple_nu: float = 0.0
    tangential_energy: float = 0.0
    M2: float = 0.0
    besov_f: float = 0.0
    concentration: float = 0.0
    sommerfeld: dict = field(default_factory=dict)
    flux_pairs: list = field(default_factory=list)
    weighted_f: float = 0.0
    R0: float = 0.0
    a: float = 2.0
    notes: list = field(default_factory=lambda: ["ball integrals exclude the disk r < r_inner"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flux_pairs"] = [list(p) for p in self.flux_pairs]
        return d

    def to_json(self, path=None) -> str:
        s = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s)
        return s


def default_R0(model: IndexModel) -> float:
    """R0 = n0^(-1/2) for d = 2 with n >= n0."""
    return model.n_min ** -0.5


def morawetz_report(u: ComplexField, model: IndexModel, R0: float | None = None) -> NormReport:
    """|||grad u|||^2 + |||n^(1/2) u|||^2 + int_{|x|>=R0} |grad_tau u|^2/|x|."""
    g = u.grid
    R0 = default_R0(model) if R0 is None else float(R0)
    du_r, du_t = gradient(u)
    grad_mag = ComplexField(g, np.sqrt(np.abs(du_r.values) ** 2 + np.abs(du_t.values) ** 2))
    X1, X2 = g.cartesian()
    n = model.n(X1, X2)
    triple_u = triple_norm(grad_mag, R0)
    triple_nu = triple_norm(u, R0, weight=n)
    R, _ = g.mesh()
    tang = integrate(g, np.abs(du_t.values) ** 2 / R, a=R0)
    return NormReport(
        triple_u=triple_u,
        triple_nu=triple_nu,
        tangential_energy=tang,
        M2=triple_u + triple_nu + tang,
        R0=R0,
    )


def concentration_integral(u: ComplexField, profile: AngularProfile, R: float) -> float:
    """int_{|x|>=R} |d n_inf/d omega|^2 |u|^2 / |x|."""
    g = u.grid
    if not g.r_inner <= R < g.L:
        raise ValueError("R must lie in [r_inner, L)")
    Rm, T = g.mesh()
    dens = profile.d1(T) ** 2 * np.abs(u.values) ** 2 / Rm
    return integrate(g, dens, a=R)


def _weight(grid: PolarGrid, kind: str) -> np.ndarray:
    R, _ = grid.mesh()
    if kind == "one_plus_r":
        return 1.0 / (1.0 + R)
    if kind == "r":
        return 1.0 / R
    if kind == "none":
        return np.ones_like(R)
    raise ValueError(f"unknown weight {kind!r}")


def sommerfeld_residual(u: ComplexField, phase, weight: str = "one_plus_r", r_min: float = 0.0) -> float:
    """Weighted radiation-condition defect.

    Scalar ``phase`` s (number, nodal array or ``s(r, theta)``):
    int (|d_r u - i s u|^2 + |grad_tau u|^2) w. Vector ``phase = (G1, G2)``
    (Cartesian nodal arrays): int |grad u - i G u|^2 w. ``weight`` is
    ``'one_plus_r'`` (1/(1+|x|)), ``'r'`` (1/|x|) or ``'none'``.
    """
    g = u.grid
    w = _weight(g, weight)
    du_r, du_t = gradient(u)
    v = u.values
    if isinstance(phase, tuple):
        G1 = np.asarray(phase[0])
        G2 = np.asarray(phase[1])
        if not (np.all(np.isfinite(G1)) and np.all(np.isfinite(G2))):
            raise ValueError("phase field has non-finite entries (ray inversion failed?)")
        _, T = g.mesh()
        c, s = np.cos(T), np.sin(T)
        Gr = c * G1 + s * G2
        Gt = -s * G1 + c * G2
        dens = np.abs(du_r.values - 1j * Gr * v) ** 2 + np.abs(du_t.values - 1j * Gt * v) ** 2
    else:
        s_ = _nodal(phase, g)
        dens = np.abs(du_r.values - 1j * s_ * v) ** 2 + np.abs(du_t.values) ** 2
    return integrate(g, dens * w, a=r_min)


def gradient_energy(u: ComplexField, weight: str = "one_plus_r", r_min: float = 0.0) -> float:
    """int |grad u|^2 w: the normaliser used for residual ratios."""
    du_r, du_t = gradient(u)
    dens = np.abs(du_r.values) ** 2 + np.abs(du_t.values) ** 2
    return integrate(u.grid, dens * _weight(u.grid, weight), a=r_min)


FLUX_HEADER = ["R", "surface_flux", "minus_surface_energy", "volume_lhs", "volume_rhs"]


def flux_report(u: ComplexField, f: ComplexField, model: IndexModel, profile: AngularProfile | None, radii):
    """Rows (R, surface_flux, minus_surface_energy, volume_lhs, volume_rhs).

    Each R is snapped to the nearest shell and the snapped value is reported.
    """
    g = u.grid
    profile = profile if profile is not None else model.profile
    du_r, _ = gradient(u)
    X1, X2 = g.cartesian()
    sq_n = np.sqrt(model.n(X1, X2))
    _, T = g.mesh()
    sq_ninf = np.sqrt(profile.eval(T))
    v = u.values
    balls_lhs = ball_integrals(g, sq_ninf * np.abs(v) ** 2)
    balls_rhs = ball_integrals(g, f.values * np.conj(v))  # complex-valued density
    rows = []
    for R in radii:
        i = g.shell_index(R)
        Ri = float(g.r[i])
        if not (g.r_inner < Ri <= g.L or i == 0):
            raise ValueError("radius outside the grid")
        vi = v[i]
        flux = float(np.sum(np.imag(np.conj(vi) * (du_r.values[i] - 1j * sq_n[i] * vi))) * Ri * g.dtheta)
        mse = float(-np.sum(sq_n[i] * np.abs(vi) ** 2) * Ri * g.dtheta)
        lhs = float(balls_lhs[i].real / Ri)
        rhs = float(-np.imag(balls_rhs[i]))
        rows.append((Ri, flux, mse, lhs, rhs))
    return rows


def write_flux_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FLUX_HEADER)
        for row in rows:
            w.writerow([f"{x:.16e}" for x in row])


def duality_check(f: ComplexField, u: ComplexField):
    """(int |f u|, N(f) |||u|||, ok) with the sup taken over grid and dyadic radii."""
    g = f.grid
    lhs = integrate(g, np.abs(f.values * np.conj(u.values)))
    js = dyadic_range(g.r_inner, g.L)
    dyadic = [min(2.0 ** (j + 1), g.L) for j in js]
    rhs = besov_norm(f) * math.sqrt(triple_norm(u, 0.0, extra_radii=dyadic))
    return lhs, rhs, bool(lhs <= rhs * (1.0 + 1e-12))


def angular_histogram(u: ComplexField, shell: int | None = None):
    """|u|^2 on one shell (default: outermost), normalised to unit mass."""
    i = u.grid.Nr - 1 if shell is None else shell
    m = np.abs(u.values[i]) ** 2
    tot = m.sum()
    return m / tot if tot > 0 else m


def mass_near(theta: np.ndarray, hist: np.ndarray, centers, half_width: float) -> float:
    """Histogram mass within ``half_width`` (radians) of any of ``centers``."""
    d = np.full(theta.shape, np.inf)
    for c in centers:
        d = np.minimum(d, np.abs((theta - c + np.pi) % (2 * np.pi) - np.pi))
    return float(hist[d <= half_width + 1e-12].sum())
