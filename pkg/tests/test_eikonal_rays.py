from __future__ import annotations

import math

import numpy as np
import pytest

from hlab import eikonal_rays as E
from hlab import index_models as im


@pytest.fixture(scope="module")
def saito_field():
    return E.eikonal_field(im.saito_tilt(10.0), 12.0, Nq=180, seed_dt=1e-2)


@pytest.fixture(scope="module")
def constant_field():
    return E.eikonal_field(im.constant(1.0), 10.0, Nq=72)


def test_constant_ray_is_straight():
    tr = E.integrate_ray(im.constant(1.0), q=(0.6, 0.8), t_max=5.0, dt=1e-2)
    q = np.array([0.6, 0.8])
    assert np.allclose(tr.X, 2 * tr.t[:, None] * q, atol=1e-12)
    assert np.allclose(tr.P, q, atol=1e-14)
    assert np.allclose(tr.Phi, 2 * tr.t, atol=1e-12)
    assert np.allclose(tr.Phi, np.hypot(tr.X[:, 0], tr.X[:, 1]), atol=1e-12)


def test_saito_conservation():
    m = im.saito_tilt(10.0)
    for a in (0.0, 1.0, 2.5, 4.0):
        tr = E.integrate_ray(m, q=a, t_max=10.0, dt=1e-3)
        assert tr.conservation_drift(m) <= 1e-10


def test_reflection_symmetry():
    m = im.saito_tilt(10.0)
    a = E.integrate_ray(m, q=(math.cos(0.8), math.sin(0.8)), t_max=5.0, dt=1e-3, every=100)
    b = E.integrate_ray(m, q=(math.cos(0.8), -math.sin(0.8)), t_max=5.0, dt=1e-3, every=100)
    assert np.allclose(a.X[:, 0], b.X[:, 0], atol=1e-12)
    assert np.allclose(a.X[:, 1], -b.X[:, 1], atol=1e-12)
    assert np.allclose(a.Phi, b.Phi, atol=1e-12)


def test_ray_errors():
    with pytest.raises(E.RayError):
        E.integrate_ray(im.constant(1.0), lam=0.0)
    with pytest.raises(E.RayEscaped):
        E.integrate_ray(im.constant(1.0), t_max=10.0, dt=1e-2, safety=5.0)


def test_trajectory_csv(tmp_path):
    tr = E.integrate_ray(im.constant(1.0), q=0.3, t_max=0.1, dt=1e-2)
    tr.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2,p1,p2,phi"
    assert len(lines) == len(tr.t) + 1


def test_invert_constant(constant_field):
    t, q, det = constant_field.invert((3.0, 4.0))
    assert t == pytest.approx(2.5, abs=1e-10)
    assert np.allclose(q, (0.6, 0.8), atol=1e-10)
    assert det > 0


def test_invert_saito_reconstruction(saito_field):
    t, q, det = saito_field.invert((5.0, 0.0))
    y = E.ray_final(saito_field.model, 10.0, saito_field.bundle.p0, np.array([E._angle(q)]), np.array([t]), 1e-3)
    assert np.hypot(*(y[0, :2] - (5.0, 0.0))) <= 1e-8
    assert det > 0


def test_invert_inside_mollifier(saito_field):
    with pytest.raises(E.InversionDomainError):
        saito_field.invert((0.05, 0.0))
    res = saito_field.solve(np.array([[0.05, 0.0], [3.0, 1.0]]), strict=False)
    assert list(res.ok) == [False, True]
    assert res.errors == [(0, "inside r_moll")]


def test_phase_field_constant(constant_field):
    pts = np.array([[1.0, 2.0], [-3.0, 0.5], [0.2, -6.0]])
    res = E.phase_field(constant_field, pts)
    r = np.hypot(pts[:, 0], pts[:, 1])
    assert np.allclose(res.phi, r, atol=1e-9)
    assert np.allclose(res.grad, pts / r[:, None], atol=1e-9)


def test_round_trip(saito_field):
    m = saito_field.model
    alphas = np.array([0.3, 1.7, 3.5, 5.0])
    ts = np.array([1.5, 2.0, 3.0, 4.0])
    y = E.ray_final(m, 10.0, saito_field.bundle.p0, alphas, ts, 1e-3)
    res = saito_field.solve(y[:, :2])
    assert np.allclose(res.t, ts, atol=1e-9)
    assert np.allclose(res.alpha, alphas, atol=1e-9)


def test_gradient_consistency(saito_field):
    x0 = np.array([4.0, 3.0])
    h = 1e-3
    pts = np.array([x0, x0 + (h, 0), x0 - (h, 0), x0 + (0, h), x0 - (0, h)])
    res = saito_field.solve(pts)
    g = np.array([(res.phi[1] - res.phi[2]) / (2 * h), (res.phi[3] - res.phi[4]) / (2 * h)])
    assert np.allclose(g, res.grad[0], atol=1e-6)


def test_saito_matches_closed_form(saito_field):
    rng = np.random.default_rng(7)
    r = rng.uniform(2, 10, 20)
    th = rng.uniform(0, 2 * np.pi, 20)
    pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    res = saito_field.solve(pts)
    _, g = E.saito_closed_form(10.0, pts)
    assert np.max(np.abs(res.grad - g)) <= 5e-3


def test_saito_coefficient_identities():
    for lam in (2.0, 10.0, 100.0):
        a, b = E.saito_coefficients(lam)
        assert abs(a * a + b * b - 1) <= 1e-14
        assert abs(2 * a * b - 1 / lam) <= 1e-14


def test_query_csv(tmp_path, constant_field):
    res = constant_field.solve(np.array([[1.0, 1.0]]))
    res.to_csv(tmp_path / "q.csv")
    assert (tmp_path / "q.csv").read_text().splitlines()[0] == "x1,x2,phi,gphi1,gphi2,t,alpha,jac"


def test_curl_checks(constant_field, saito_field):
    assert E.curl_check(constant_field, E.circle_loop(1.0, 64)) < 1e-14
    assert E.curl_check(saito_field, E.circle_loop(5.0, 64)) <= 1e-6
    c = 0.3

    def vortex(pts):
        r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        return c * np.column_stack([-pts[:, 1], pts[:, 0]]) / r2[:, None]

    circ, length = E.circulation(vortex, E.circle_loop(2.0, 256))
    assert circ == pytest.approx(2 * math.pi * c, rel=1e-3)  # chord quadrature
    assert E.curl_check(vortex, E.circle_loop(2.0, 256)) == pytest.approx(c / 2.0, rel=1e-3)


def test_caustic_detection():
    m = im.angular_limit(c0=2.0, a=(0.0, 1.0))
    fld = E.eikonal_field(m, 12.0, lam=2.0, Nq=180, seed_dt=1e-2, dt=1e-2, refine=False, tol=1e-8)
    th = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    pts = np.column_stack([10 * np.cos(th), 10 * np.sin(th)])
    res = fld.solve(pts, strict=False)
    assert (~res.ok).any()
    assert any(msg == "caustic suspected" for _, msg in res.errors)
    assert np.all(np.isnan(res.phi[~res.ok]))
    with pytest.raises(E.CausticSuspected):
        fld.solve(pts[~res.ok][:1])


def test_monotone_escape():
    m = im.angular_limit(c0=10.0, a=(0.0, 1.0))
    b = E.build_bundle(m, 10.0, Nq=36, dt=1e-2, t_max=20.0, every=100, refine=False)
    lo = 0.5 * 2 * math.sqrt(m.n_min / 10.0)
    hi = 1.5 * 2 * math.sqrt(11.0 / 10.0)
    late = b.times >= 10
    X = b.records[:, late, 0:2]
    speed = np.hypot(X[..., 0], X[..., 1]) / b.times[late]
    assert np.all((speed >= lo) & (speed <= hi))


def test_hj_report_constant(constant_field):
    rep = E.hj_report(constant_field, radii=(2.0, 5.0, 8.0), theta_samples=16)
    assert rep.g_min == pytest.approx(1.0, abs=1e-9)
    assert rep.g_max == pytest.approx(1.0, abs=1e-9)
    assert rep.sup_x_Dg < 1e-6
    assert rep.hjlim_residual < 1e-8
    assert not rep.hjest_applicable or rep.sup_r_dr_g < 1e-6


def test_hj_report_saito_bounds():
    fld = E.eikonal_field(im.saito_tilt(10.0), 21.0, Nq=180, seed_dt=1e-2, dt=2e-3, refine=False, tol=1e-8)
    rep = E.hj_report(fld, radii=(2.0, 5.0, 10.0, 20.0), theta_samples=32)
    lo, hi = math.sqrt(1 - 0.1), math.sqrt(1 + 0.1)
    assert lo - 1e-6 <= rep.g_min <= rep.g_max <= hi + 1e-6
    d = rep.to_dict()
    assert set(d) >= {"hjlim_residual", "ratio_bounds", "F_table", "g_inf"}


def test_grad_phi_on_grid_constant(constant_field):
    from hlab import helmholtz_fd as fd

    g = fd.PolarGrid(16, 16, 8.0)
    G1, G2 = E.grad_phi_on_grid(constant_field, g, r_lattice=12, theta_lattice=32)
    _, T = g.mesh()
    assert np.allclose(G1, np.cos(T), atol=1e-6)
    assert np.allclose(G2, np.sin(T), atol=1e-6)
