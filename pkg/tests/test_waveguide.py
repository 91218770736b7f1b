from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import simpson

from hlab import waveguide as wg


def test_soliton_solves_profile_equation_and_decays():
    y = np.linspace(-40.0, 40.0, 4001)
    assert wg.soliton_residual(y).max() <= 1e-12
    Q, Q1, _ = wg.soliton(np.array([-40.0, 0.0, 40.0]))
    assert Q[1] == 1.0 and Q1[1] == 0.0
    assert Q[0] < 1.05e-12 and Q[2] < 1.05e-12
    h = 1e-5
    yy = np.linspace(-5, 5, 11)
    fd1 = (wg.soliton(yy + h)[0] - wg.soliton(yy - h)[0]) / (2 * h)
    assert np.max(np.abs(fd1 - wg.soliton(yy)[1])) < 1e-9


def test_closed_form_integrals():
    y = np.linspace(-60.0, 60.0, 120001)
    Q, Q1, _ = wg.soliton(y)
    assert simpson(Q**2, x=y) == pytest.approx(wg.Q_SQ_INTEGRAL, rel=1e-10)
    assert simpson(Q1**2, x=y) == pytest.approx(wg.Q1_SQ_INTEGRAL, rel=1e-10)


def test_bump_is_smooth_step():
    s = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 5.0])
    th, d1, d2 = wg.bump(s)
    assert list(th[[0, 1, 2]]) == [0.0, 0.0, 0.0]
    assert list(th[[4, 5]]) == [1.0, 1.0]
    assert th[3] == pytest.approx(0.5)
    x = np.linspace(1.01, 1.99, 99)
    h = 1e-6
    num = (wg.bump(x + h)[0] - wg.bump(x - h)[0]) / (2 * h)
    assert np.max(np.abs(num - wg.bump(x)[1])) < 1e-6
    num2 = (wg.bump(x + h)[1] - wg.bump(x - h)[1]) / (2 * h)
    assert np.max(np.abs(num2 - wg.bump(x)[2])) < 1e-4


@pytest.mark.parametrize("lam", [0.1, 0.3, 0.45])
def test_pde_residual_closed_form(lam):
    p = wg.WaveguideParams(lam=lam, eps=0.05)
    x = np.linspace(-30.0, 30.0, 241)[:, None]
    y = np.linspace(-30.0, 30.0, 241)[None, :]
    assert wg.pde_residual(p, x, y).max() <= 1e-10


def test_source_support_and_far_field():
    p = wg.WaveguideParams(lam=0.3, eps=0.01)
    x = np.array([0.5, 2.0, 2.5, 10.0, -3.0])
    _, f, _ = wg.fields(p, x, np.zeros_like(x))
    assert np.all(f == 0)
    u, _, _ = wg.fields(p, np.array([5.0]), np.array([0.0]))
    assert u[0] == pytest.approx(np.exp(5j * p.k))
    p0 = wg.WaveguideParams(lam=0.3, eps=1e-15)
    u0, _, _ = wg.fields(p0, np.array([5.0]), np.array([0.0]))
    assert abs(u0[0] - np.exp(5j)) < 1e-12


def test_index_profile():
    p = wg.WaveguideParams(lam=0.3)
    assert wg.index(p, 0.0) == pytest.approx(1.0 + 0.5 * 0.09)
    assert wg.index(p, 1e3) == pytest.approx(1.0 - 0.5 * 0.09)
    assert wg.phase_is_not_eikonal(p)


@pytest.mark.parametrize(
    "kw", [{"lam": 0.0}, {"lam": 0.5}, {"lam": 0.6}, {"eps": 0.0}, {"eps": 1.0}, {"points_per_panel": 1}]
)
def test_parameter_validation(kw):
    with pytest.raises(wg.WaveguideError):
        wg.WaveguideParams(**kw)


def test_blowup_input_validation():
    p = wg.WaveguideParams()
    with pytest.raises(wg.WaveguideError):
        wg.tangential_blowup(p, [1e-2, 1e-1, 1e-3])
    with pytest.raises(wg.WaveguideError):
        wg.tangential_blowup(p, [1e-1, 1e-6])


def test_truncation_defaults():
    p = wg.WaveguideParams(lam=0.3, eps=0.01)
    assert p.Y == pytest.approx(100.0)
    assert p.X == pytest.approx(2000.0)
    assert wg.WaveguideParams(lam=0.45).Y == pytest.approx(30 / 0.45)
    assert wg.WaveguideParams(lam=0.45, y_max=50.0).Y == 50.0
    assert abs(p.k**2 - (1 + 0.01j)) < 1e-15 and p.k.imag > 0


def test_tangential_energy_matches_independent_quadrature():
    p = wg.WaveguideParams(lam=0.3, eps=0.5)
    T = wg.tangential_energy(p)
    x = np.linspace(0.0, p.X, 4001)
    y = np.linspace(0.0, p.Y, 2001)
    X, Y = np.meshgrid(x, y, indexing="ij")
    ux, uy, _, _ = wg.derivatives(p, X, Y)
    r = np.hypot(X, Y)
    ut = (-Y * ux + X * uy) / np.where(r == 0, 1.0, r)
    ref = 4 * simpson(simpson(np.abs(ut) ** 2 / (1 + r), x=y, axis=1), x=x)
    assert T == pytest.approx(ref, rel=1e-8)


def test_tangential_energy_grows_as_eps_shrinks():
    fit = wg.tangential_blowup(wg.WaveguideParams(lam=0.3), [1e-1, 1e-2, 1e-3])
    assert np.all(np.diff(fit.T) > 0)
    assert fit.slope > 0


def test_underresolved_quadrature_detected():
    p = wg.WaveguideParams(lam=0.3, eps=1e-3, points_per_panel=2)
    with pytest.raises(wg.QuadratureUnderResolved):
        wg.tangential_energy(p, rtol=1e-9)


def test_conjugated_energy_is_eps_independent():
    base = wg.WaveguideParams(lam=0.3)
    vals = [wg.conjugated_energy(base.with_eps(e))["value"] for e in (1e-1, 1e-2, 1e-3)]
    assert vals[0] == vals[1] == vals[2]
    c = wg.conjugated_energy(base, x_window=6.0)
    assert c["transverse_density"] == pytest.approx(2 * 0.3 * math.sqrt(2) / 3)
    with pytest.raises(wg.WaveguideError):
        wg.conjugated_energy(base, x_window=1.0)


def test_conjugated_energy_matches_grid_integral():
    p = wg.WaveguideParams(lam=0.3)
    xw = 4.0
    x = np.linspace(0.0, xw, 4001)
    y = np.linspace(0.0, 120.0, 6001)
    X, Y = np.meshgrid(x, y, indexing="ij")
    th, t1, _ = wg.bump(X)
    Q, Q1, _ = wg.soliton(0.3 * Y)
    dens = (t1 * Q) ** 2 + (0.3 * th * Q1) ** 2
    ref = 4 * simpson(simpson(dens, x=y, axis=1), x=x)
    assert wg.conjugated_energy(p, xw)["value"] == pytest.approx(ref, rel=1e-6)


def test_source_norm_and_triple_u_stable():
    p = wg.WaveguideParams(lam=0.3)
    s = wg.source_norms(p, [1e-1, 3e-2, 1e-2, 3e-3, 1e-3])
    assert s.stability_ratio <= 1.1
    assert all(np.isfinite(s.N_f)) and all(v > 0 for v in s.N_f)
    t1, _ = wg.triple_u(p)
    t2, _ = wg.triple_u(p, R_max=2 * p.X)
    assert abs(t2 - t1) / t1 < 1e-3


def test_source_annuli_sum_to_total_energy():
    p = wg.WaveguideParams(lam=0.3, eps=0.1)
    ann = wg.source_annuli(p)
    x = np.linspace(1.0, 2.0, 20001)
    _, t1, t2 = wg.bump(x)
    dens_x = np.abs(2j * p.k * t1 + t2) ** 2 * np.exp(-2 * p.k.imag * x)
    total = 2 * simpson(dens_x, x=x) * wg.Q_SQ_INTEGRAL / p.lam
    assert sum(ann.values()) == pytest.approx(total, rel=1e-6)
