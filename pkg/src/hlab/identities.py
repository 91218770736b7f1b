"""Multiplier identities for discrete Helmholtz solutions.

The identities are written for ``Delta u + (n + i eps) u = g``; the solver's
equation ``i eps u + Delta u + n u = -f`` gives ``g = -f``.  Everything is
integrated over a disc B(rho) whose radius sits on a cell face
(rho = k dr), so that volume integrals use the cell weights r_i dr dtheta of
shells i < k and surface integrals use face values

    u(rho) = (u_{k-1} + u_k)/2,   d_r u(rho) = (u_k - u_{k-1})/dr.

With these choices the psi = 1 flux identity reproduces the summed rows of
the discrete system exactly.  Multipliers are evaluated analytically in the
local orthonormal frame (e_r, e_theta); field gradients come from centred
differences, so smooth multipliers converge at O(h^2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .helmholtz_fd import ComplexField, PolarGrid, gradient
from .index_models import AngularProfile, IndexModel

REL_FLOOR = 1e-300


class IdentityError(ValueError):
    pass


# -- multipliers ------------------------------------------------------------

@dataclass
class Multiplier:
    """Scalar (phi / psi) or vector-field (grad Psi) multiplier.

    ``evaluate(r, theta)`` returns a dict of frame components.  Scalars
    provide ``value, grad_r, grad_t, lap``; vector multipliers provide
    ``grad_r, grad_t, h_rr, h_rt, h_tt, lap, dlap_r, dlap_t``.  ``jumps`` lists
    (radius, [Delta Psi]) for multipliers whose Laplacian jumps across a
    circle; the jump enters the grad-Laplacian term as a surface integral.
    ``breaks`` lists radii where some evaluated derivative is discontinuous;
    shells straddling one use cell-averaged coefficients (see ``on_disc``).
    """

    kind: str
    evaluate: Callable = field(repr=False)
    params: dict = field(default_factory=dict)
    jumps: tuple = ()
    breaks: tuple = ()

    SCALAR_KEYS = ("value", "grad_r", "grad_t", "lap")
    VECTOR_KEYS = ("grad_r", "grad_t", "h_rr", "h_rt", "h_tt", "lap", "dlap_r", "dlap_t")

    def on(self, r, theta, keys) -> dict:
        vals = self.evaluate(np.asarray(r, dtype=float), np.asarray(theta, dtype=float))
        missing = [k for k in keys if k not in vals]
        if missing:
            raise IdentityError(f"multiplier {self.kind!r} lacks {missing}")
        shape = np.broadcast(np.asarray(r), np.asarray(theta)).shape
        return {k: np.broadcast_to(np.asarray(vals[k], dtype=float), shape) for k in keys}

    def on_disc(self, D: "_Disc", keys) -> dict:
        """Coefficients at the nodes of shells 0..k-1.

        A shell whose cell [i dr, (i+1) dr] contains a break gets the
        r-weighted cell average of each coefficient instead of its nodal
        value, computed with Gauss points on both sides of the break.  A
        jump inside a cell would otherwise cost O(h) in the midpoint rule.
        """
        out = {k: np.array(v) for k, v in self.on(D.R, D.T, keys).items()}
        dr = D.grid.dr
        xg, wg = np.polynomial.legendre.leggauss(4)
        th = D.grid.theta
        for b in self.breaks:
            i = int(math.floor(b / dr))
            if not 0 <= i < D.k:
                continue
            lo, hi = i * dr, (i + 1) * dr
            cuts = [lo] + ([b] if lo < b < hi else []) + [hi]
            rs, ws = [], []
            for a, c in zip(cuts[:-1], cuts[1:]):
                rs.append(0.5 * (a + c) + 0.5 * (c - a) * xg)
                ws.append(0.5 * (c - a) * wg)
            rs = np.concatenate(rs)
            ws = np.concatenate(ws) * rs
            vals = self.on(rs[:, None], th[None, :], keys)
            for k in keys:
                out[k][i] = np.sum(ws[:, None] * vals[k], axis=0) / ws.sum()
        return out


def scalar_phi(kind: str = "gaussian", sigma: float = 1.0) -> Multiplier:
    """phi = exp(-r^2/sigma^2) (``gaussian``) or phi = 1 (``one``)."""
    if kind == "one":
        return constant_scalar(1.0, "scalar_phi")
    if kind != "gaussian":
        raise IdentityError(f"unknown scalar_phi kind {kind!r}")
    s2 = sigma * sigma

    def ev(r, t):
        e = np.exp(-r * r / s2)
        return {
            "value": e,
            "grad_r": -2 * r / s2 * e,
            "grad_t": np.zeros_like(r),
            "lap": (4 * r * r / s2 - 4) / s2 * e,
        }

    return Multiplier("scalar_phi", ev, {"kind": kind, "sigma": sigma})


def constant_scalar(c: float = 1.0, kind: str = "scalar_psi") -> Multiplier:
    def ev(r, t):
        z = np.zeros(np.broadcast(r, t).shape)
        return {"value": z + c, "grad_r": z, "grad_t": z, "lap": z}

    return Multiplier(kind, ev, {"constant": c})


def scalar_psi(profile: AngularProfile | None = None) -> Multiplier:
    """psi = 1, or psi = profile(theta) (angular flux probe)."""
    if profile is None:
        return constant_scalar(1.0, "scalar_psi")

    def ev(r, t):
        N, N1, N2 = profile.eval(t), profile.d1(t), profile.d2(t)
        return {"value": N + 0 * r, "grad_r": 0 * r + 0 * t, "grad_t": N1 / r, "lap": N2 / (r * r)}

    return Multiplier("scalar_psi", ev, {"profile": profile.to_dict()})


def radial_Psi(F: Callable, name: str = "custom_smooth", **params) -> Multiplier:
    """Radial Psi(r) from ``F(r) -> (F', F'', F''')``."""

    def ev(r, t):
        f1, f2, f3 = F(r)
        z = np.zeros(np.broadcast(r, t).shape)
        return {
            "grad_r": z + f1,
            "grad_t": z,
            "h_rr": z + f2,
            "h_rt": z,
            "h_tt": z + f1 / r,
            "lap": z + f2 + f1 / r,
            "dlap_r": z + f3 + f2 / r - f1 / (r * r),
            "dlap_t": z,
        }

    return Multiplier(name, ev, params)


def quadratic_Psi() -> Multiplier:
    """Psi = |x|^2/2: D^2 Psi = I, Delta Psi = 2."""
    return radial_Psi(
        lambda r: (r, np.ones_like(r), np.zeros_like(r)), name="custom_smooth", form="quadratic"
    )


def gaussian_Psi(sigma: float = 1.0) -> Multiplier:
    """Psi = -(sigma^2/2) exp(-r^2/sigma^2): grad Psi = x exp(-r^2/sigma^2)."""
    s2 = sigma * sigma

    def F(r):
        e = np.exp(-r * r / s2)
        f1 = r * e
        f2 = (1 - 2 * r * r / s2) * e
        f3 = (-6 * r / s2 + 4 * r**3 / (s2 * s2)) * e
        return f1, f2, f3

    return radial_Psi(F, name="custom_smooth", form="gaussian", sigma=sigma)


def vector_Psi_paper(R: float) -> Multiplier:
    """Psi = |x|^2/(2R) + R/2 inside B(R), |x| outside.

    grad Psi = x/R inside and x/|x| outside; Delta Psi = 2/R inside and 1/|x|
    outside, so [Delta Psi] = -1/R on |x| = R.
    """
    if not R > 0:
        raise IdentityError("R must be positive")

    def ev(r, t):
        inside = r <= R
        z = np.zeros(np.broadcast(r, t).shape)
        rr = r + z
        return {
            "grad_r": np.where(inside, rr / R, 1.0),
            "grad_t": z,
            "h_rr": np.where(inside, 1.0 / R, 0.0),
            "h_rt": z,
            "h_tt": np.where(inside, 1.0 / R, 1.0 / rr),
            "lap": np.where(inside, 2.0 / R, 1.0 / rr),
            "dlap_r": np.where(inside, 0.0, -1.0 / (rr * rr)),
            "dlap_t": z,
        }

    return Multiplier("vector_Psi_paper", ev, {"R": R}, jumps=((R, -1.0 / R),), breaks=(R,))


def q_transition(s):
    """(q, q', q'', q''') of the quintic: 0 for s <= 1, s for s >= 2, C^2 joins."""
    s = np.asarray(s, dtype=float)
    t = np.clip(s - 1.0, 0.0, 1.0)
    mid = (s > 1.0) & (s < 2.0)
    hi = s >= 2.0
    q = np.where(hi, s, np.where(mid, 16 * t**3 - 23 * t**4 + 9 * t**5, 0.0))
    q1 = np.where(hi, 1.0, np.where(mid, 48 * t**2 - 92 * t**3 + 45 * t**4, 0.0))
    q2 = np.where(mid, 96 * t - 276 * t**2 + 180 * t**3, 0.0)
    q3 = np.where(mid, 96 - 552 * t + 540 * t**2, 0.0)
    return q, q1, q2, q3


def _Q(r, R):
    q, q1, q2, q3 = q_transition(r / R)
    return q, q1 / R, q2 / R**2, q3 / R**3


def vector_Psi_q(R: float, profile: AngularProfile) -> Multiplier:
    """Psi_q(x) = q(|x|/R) N(x/|x|) with N the angular profile."""
    if not R > 0:
        raise IdentityError("R must be positive")

    def ev(r, t):
        Q, Q1, Q2, Q3 = _Q(r, R)
        N, N1, N2, N3 = profile.eval(t), profile.d1(t), profile.d2(t), profile.d3(t)
        r2 = r * r
        lap = Q2 * N + Q1 * N / r + Q * N2 / r2
        return {
            "grad_r": Q1 * N,
            "grad_t": Q * N1 / r,
            "h_rr": Q2 * N,
            "h_rt": N1 * (Q1 / r - Q / r2),
            "h_tt": Q1 * N / r + Q * N2 / r2,
            "lap": lap,
            "dlap_r": Q3 * N + (Q2 / r - Q1 / r2) * N + (Q1 / r2 - 2 * Q / (r2 * r)) * N2,
            "dlap_t": (Q2 * N1 + Q1 * N1 / r + Q * N3 / r2) / r,
        }

    return Multiplier(
        "vector_Psi_q", ev, {"R": R, "profile": profile.to_dict(), "q_transition": "quintic"},
        breaks=(R, 2 * R),
    )


# -- quadrature on B(rho) ---------------------------------------------------

@dataclass
class _Disc:
    grid: PolarGrid
    k: int
    rho: float
    w: np.ndarray  # (k, Nt) cell weights of shells 0..k-1
    R: np.ndarray
    T: np.ndarray

    def vol(self, density) -> float:
        return float(np.sum(self.w * density))

    def surf(self, density) -> float:
        return float(np.sum(density) * self.rho * self.grid.dtheta)


def _disc(grid: PolarGrid, rho: float | None) -> _Disc:
    Nr = grid.Nr
    k = Nr - 1 if rho is None else int(round(rho / grid.dr))
    k = max(1, min(k, Nr - 1))
    R, T = grid.mesh()
    return _Disc(grid, k, k * grid.dr, grid.cell_weights[:k], R[:k], T[:k])


def _face(u: ComplexField, k: int):
    """(u, d_r u, tangential derivative) on the face r = k dr."""
    g = u.grid
    v = u.values
    uf = 0.5 * (v[k - 1] + v[k])
    urf = (v[k] - v[k - 1]) / g.dr
    utf = (np.roll(uf, -1) - np.roll(uf, 1)) / (2 * g.dtheta) / (k * g.dr)
    return uf, urf, utf


def _frame_grad(u: ComplexField, k: int):
    ur, ut = gradient(u)
    return ur.values[:k], ut.values[:k]


def _model_frame(model: IndexModel, R, T):
    c, s = np.cos(T), np.sin(T)
    n, g1, g2, *_ = model.evaluate(R * c, R * s)
    return n, c * g1 + s * g2, -s * g1 + c * g2


def _g(f: ComplexField, k: int):
    return -f.values[:k]


@dataclass
class IdentityReport:
    name: str
    lhs: float
    rhs: float
    terms: dict
    rho: float
    floor: float = 1e-14

    @property
    def abs_residual(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def rel_residual(self) -> float:
        return self.abs_residual / max(abs(self.lhs), abs(self.rhs), self.floor, REL_FLOOR)

    @property
    def term_residual(self) -> float:
        """Residual relative to the largest single term (robust when terms cancel)."""
        scale = max([abs(v) for v in self.terms.values()] + [self.floor, REL_FLOOR])
        return self.abs_residual / scale

    def to_dict(self) -> dict:
        return {
            "identity": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "abs_residual": self.abs_residual,
            "rel_residual": self.rel_residual,
            "term_residual": self.term_residual,
            "rho": self.rho,
            "terms": dict(self.terms),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _check_grids(u: ComplexField, f: ComplexField):
    if u.grid != f.grid:
        raise IdentityError("u and f live on different grids")


def check_variational(u: ComplexField, f: ComplexField, model: IndexModel, phi: Multiplier,
                      rho: float | None = None) -> IdentityReport:
    """-int phi|grad u|^2 + 1/2 int Delta phi |u|^2 + int phi n |u|^2 + boundary = Re int phi conj(u) g."""
    _check_grids(u, f)
    D = _disc(u.grid, rho)
    m = phi.on_disc(D, Multiplier.SCALAR_KEYS)
    v = u.values[: D.k]
    ur, ut = _frame_grad(u, D.k)
    n = model.n(D.R * np.cos(D.T), D.R * np.sin(D.T))
    a2 = np.abs(v) ** 2
    terms = {
        "eq1_gradient": -D.vol(m["value"] * (np.abs(ur) ** 2 + np.abs(ut) ** 2)),
        "eq1_laplacian": 0.5 * D.vol(m["lap"] * a2),
        "eq1_potential": D.vol(m["value"] * n * a2),
    }
    uf, urf, _ = _face(u, D.k)
    mf = phi.on(np.full(u.grid.Ntheta, D.rho), u.grid.theta, Multiplier.SCALAR_KEYS)
    terms["boundary_phi_u_dru"] = D.surf(mf["value"] * np.real(np.conj(uf) * urf))
    terms["boundary_drphi_u2"] = -0.5 * D.surf(mf["grad_r"] * np.abs(uf) ** 2)
    rhs = D.vol(m["value"] * np.real(np.conj(v) * _g(f, D.k)))
    terms["eq1_source"] = rhs
    lhs = sum(v_ for k_, v_ in terms.items() if k_ != "eq1_source")
    return IdentityReport("variational", lhs, rhs, terms, D.rho)


def check_flux(u: ComplexField, f: ComplexField, eps: float, psi: Multiplier | None = None,
               rho: float | None = None) -> IdentityReport:
    """eps int psi|u|^2 - Im int grad psi . grad u conj(u) + Im surf psi conj(u) d_r u = Im int g conj(u) psi."""
    _check_grids(u, f)
    psi = psi if psi is not None else scalar_psi()
    D = _disc(u.grid, rho)
    m = psi.on_disc(D, Multiplier.SCALAR_KEYS)
    v = u.values[: D.k]
    terms = {"eq2_eps": eps * D.vol(m["value"] * np.abs(v) ** 2)}
    if np.any(m["grad_r"]) or np.any(m["grad_t"]):
        ur, ut = _frame_grad(u, D.k)
        terms["eq2_gradient"] = -D.vol(np.imag((m["grad_r"] * ur + m["grad_t"] * ut) * np.conj(v)))
    else:
        terms["eq2_gradient"] = 0.0
    uf, urf, _ = _face(u, D.k)
    mf = psi.on(np.full(u.grid.Ntheta, D.rho), u.grid.theta, Multiplier.SCALAR_KEYS)
    terms["boundary_flux"] = D.surf(mf["value"] * np.imag(np.conj(uf) * urf))
    rhs = D.vol(m["value"] * np.imag(_g(f, D.k) * np.conj(v)))
    terms["eq2_source"] = rhs
    lhs = terms["eq2_eps"] + terms["eq2_gradient"] + terms["boundary_flux"]
    return IdentityReport("flux", lhs, rhs, terms, D.rho)


def check_morawetz(u: ComplexField, f: ComplexField, model: IndexModel, eps: float,
                   Psi: Multiplier, rho: float | None = None) -> IdentityReport:
    """Vector-field identity for the multiplier grad Psi . grad conj(u) + 1/2 Delta Psi conj(u).

    lhs = int grad u* D^2Psi grad u + 1/2 Re int conj(u) grad(Delta Psi).grad u
          + 1/2 int grad n . grad Psi |u|^2 + surface terms on S_rho
    rhs = -Re int g (grad Psi . grad conj(u) + 1/2 Delta Psi conj(u))
          - eps Im int grad Psi . grad conj(u) u
    The fourth-order term is kept in this once-integrated form, and a jump
    [Delta Psi] across |x| = R contributes 1/2 [Delta Psi] Re surf_R conj(u) d_r u.
    """
    _check_grids(u, f)
    D = _disc(u.grid, rho)
    m = Psi.on_disc(D, Multiplier.VECTOR_KEYS)
    v = u.values[: D.k]
    ur, ut = _frame_grad(u, D.k)
    n, n_r, n_t = _model_frame(model, D.R, D.T)
    a2 = np.abs(v) ** 2
    hess = (
        m["h_rr"] * np.abs(ur) ** 2
        + 2 * m["h_rt"] * np.real(np.conj(ur) * ut)
        + m["h_tt"] * np.abs(ut) ** 2
    )
    terms = {
        "eq3_hessian": D.vol(hess),
        "eq230_grad_lap": 0.5 * D.vol(np.real(np.conj(v) * (m["dlap_r"] * ur + m["dlap_t"] * ut))),
        "eq3_potential": 0.5 * D.vol((n_r * m["grad_r"] + n_t * m["grad_t"]) * a2),
    }
    jump_total = 0.0
    for Rj, jump in Psi.jumps:
        kj = int(round(Rj / u.grid.dr))
        if 1 <= kj < D.k:
            ujf, urjf, _ = _face(u, kj)
            jump_total += 0.5 * jump * float(np.sum(np.real(np.conj(ujf) * urjf)) * kj * u.grid.dr * u.grid.dtheta)
    terms["eq230_lap_jump"] = jump_total

    uf, urf, utf = _face(u, D.k)
    th = u.grid.theta
    mf = Psi.on(np.full(th.size, D.rho), th, Multiplier.VECTOR_KEYS)
    c, s = np.cos(th), np.sin(th)
    nf = model.n(D.rho * c, D.rho * s)
    gradPsi_dot = mf["grad_r"] * np.conj(urf) + mf["grad_t"] * np.conj(utf)
    terms["res0_boundary_grad"] = 0.5 * D.surf(mf["grad_r"] * (np.abs(urf) ** 2 + np.abs(utf) ** 2))
    terms["res0_boundary_cross"] = -D.surf(np.real(urf * gradPsi_dot))
    terms["res0_boundary_lap"] = -0.5 * D.surf(mf["lap"] * np.real(np.conj(uf) * urf))
    terms["res0_boundary_n"] = -0.5 * D.surf(nf * mf["grad_r"] * np.abs(uf) ** 2)

    gv = _g(f, D.k)
    mult = m["grad_r"] * np.conj(ur) + m["grad_t"] * np.conj(ut) + 0.5 * m["lap"] * np.conj(v)
    terms["eq3_source"] = -D.vol(np.real(gv * mult))
    terms["eq3_eps"] = -eps * D.vol(np.imag((m["grad_r"] * np.conj(ur) + m["grad_t"] * np.conj(ut)) * v))
    lhs_keys = (
        "eq3_hessian", "eq230_grad_lap", "eq3_potential", "eq230_lap_jump",
        "res0_boundary_grad", "res0_boundary_cross", "res0_boundary_lap", "res0_boundary_n",
    )
    lhs = math.fsum(terms[k_] for k_ in lhs_keys)
    rhs = terms["eq3_source"] + terms["eq3_eps"]
    return IdentityReport("morawetz", lhs, rhs, terms, D.rho)


def psi_q_decomposition(u: ComplexField, model: IndexModel, profile: AngularProfile | None,
                        R: float, rho: float | None = None) -> IdentityReport:
    """Named terms of grad n . grad Psi_q |u|^2 and grad u* D^2 Psi_q grad u.

    First group (three terms, N = n_inf profile, Q = q(|x|/R)):
      eq2_1_term1 = int Q N'^2 |u|^2 / r^2
      eq2_1_term2 = int d_r n Q' N |u|^2
      eq2_1_term3 = int Q d_theta(n - N) N' |u|^2 / r^2
    Second group (four terms):
      eq2_3_radial     = int Q'' N |d_r u|^2
      eq2_3_tangential = int Q' N / r |u_tau|^2
      eq2_3_cross      = int 2 N' (Q'/r - Q/r^2) Re(conj(d_r u) u_tau)
      eq2_3_angular    = int Q N'' / r^2 |u_tau|^2
    Both sums are compared with direct Cartesian evaluations; ``lhs`` and
    ``rhs`` are the summed and direct totals of both groups together.
    """
    profile = profile if profile is not None else model.profile
    if profile is None:
        raise IdentityError("an angular profile is required")
    D = _disc(u.grid, rho)
    Rr, T = D.R, D.T
    Q, Q1, Q2, _ = _Q(Rr, R)
    N, N1, N2 = profile.eval(T), profile.d1(T), profile.d2(T)
    v = u.values[: D.k]
    ur, ut = _frame_grad(u, D.k)
    a2 = np.abs(v) ** 2
    n, n_r, n_t = _model_frame(model, Rr, T)
    dth_n = Rr * n_t
    r2 = Rr * Rr
    terms = {
        "eq2_1_term1": D.vol(Q * N1**2 * a2 / r2),
        "eq2_1_term2": D.vol(n_r * Q1 * N * a2),
        "eq2_1_term3": D.vol(Q * (dth_n - N1) * N1 * a2 / r2),
        "eq2_3_radial": D.vol(Q2 * N * np.abs(ur) ** 2),
        "eq2_3_tangential": D.vol(Q1 * N / Rr * np.abs(ut) ** 2),
        "eq2_3_cross": D.vol(2 * N1 * (Q1 / Rr - Q / r2) * np.real(np.conj(ur) * ut)),
        "eq2_3_angular": D.vol(Q * N2 / r2 * np.abs(ut) ** 2),
    }
    # direct evaluation in Cartesian components
    c, s = np.cos(T), np.sin(T)
    m = vector_Psi_q(R, profile).on(Rr, T, Multiplier.VECTOR_KEYS)
    G1 = c * m["grad_r"] - s * m["grad_t"]
    G2 = s * m["grad_r"] + c * m["grad_t"]
    _, g1, g2, *_ = model.evaluate(Rr * c, Rr * s)
    direct_21 = D.vol((g1 * G1 + g2 * G2) * a2)
    # rotate the frame Hessian to Cartesian
    hrr, hrt, htt = m["h_rr"], m["h_rt"], m["h_tt"]
    H11 = c * c * hrr - 2 * c * s * hrt + s * s * htt
    H12 = c * s * (hrr - htt) + (c * c - s * s) * hrt
    H22 = s * s * hrr + 2 * c * s * hrt + c * c * htt
    u1 = c * ur - s * ut
    u2 = s * ur + c * ut
    direct_23 = D.vol(
        H11 * np.abs(u1) ** 2 + 2 * H12 * np.real(np.conj(u1) * u2) + H22 * np.abs(u2) ** 2
    )
    sum_21 = math.fsum(terms[k] for k in terms if k.startswith("eq2_1"))
    sum_23 = math.fsum(terms[k] for k in terms if k.startswith("eq2_3"))
    terms.update(
        {
            "eq2_1_sum": sum_21,
            "eq2_1_direct": direct_21,
            "eq2_3_sum": sum_23,
            "eq2_3_direct": direct_23,
            "eq2_1_rel_error": abs(sum_21 - direct_21) / max(abs(direct_21), REL_FLOOR),
            "eq2_3_rel_error": abs(sum_23 - direct_23) / max(abs(direct_23), REL_FLOOR),
        }
    )
    return IdentityReport("psi_q_decomposition", sum_21 + sum_23, direct_21 + direct_23, terms, D.rho)
