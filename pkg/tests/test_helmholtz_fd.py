from __future__ import annotations

import math

import numpy as np
import pytest

from hlab import helmholtz_fd as fd
from hlab import index_models as im


def test_grid_weights_sum_to_annulus_area():
    g = fd.PolarGrid(40, 32, 3.0)
    area = math.pi * (g.L**2 - g.r_inner**2)
    assert abs(g.weights.sum() - area) / area < 1e-10
    assert g.metadata() == {"Nr": 40, "Ntheta": 32, "L": 3.0, "r_inner": g.r_inner}
    assert g.r[-1] == pytest.approx(g.L)
    assert g.r_inner == pytest.approx(g.dr / 2)


@pytest.mark.parametrize("args", [(3, 16, 1.0), (10, 7, 1.0), (10, 6, 1.0), (10, 16, 0.0)])
def test_grid_validation(args):
    with pytest.raises(ValueError):
        fd.PolarGrid(*args)


def test_complex_field_rejects_nonfinite_and_shape():
    g = fd.PolarGrid(8, 8, 1.0)
    with pytest.raises(ValueError):
        fd.ComplexField(g, np.full(g.shape, np.nan, dtype=complex))
    with pytest.raises(ValueError):
        fd.ComplexField(g, np.zeros((3, 3), dtype=complex))


def test_assemble_structure_dirichlet():
    g = fd.PolarGrid(64, 64, 5.0)
    s = fd.assemble(g, im.constant(1.0), 0.1, "dirichlet0")
    A = s.matrix
    assert A.shape == (64 * 64, 64 * 64)
    pattern = (A != 0).astype(int)
    assert (pattern - pattern.T).nnz == 0
    nnz_rows = np.diff(A.indptr)
    # shell Nr-2 loses its coupling to the known wall values (moved to the rhs)
    interior = nnz_rows[g.Ntheta : (g.Nr - 2) * g.Ntheta]
    assert np.all(interior == 5)


def test_assemble_diagonal_constant_index():
    g = fd.PolarGrid(16, 16, 2.0)
    eps = 0.3
    s = fd.assemble(g, im.constant(1.0), eps, "outgoing")
    d = s.matrix.diagonal().reshape(g.shape)
    i = 5
    expected = -2 / g.dr**2 - 2 / (g.r[i] * g.dtheta) ** 2 + 1 + 1j * eps
    assert np.allclose(d[i], expected, rtol=1e-13)


def test_assemble_errors():
    g = fd.PolarGrid(16, 16, 2.0)
    with pytest.raises(fd.AssemblyError):
        fd.assemble(g, im.constant(1.0), 0.0, "dirichlet0")
    with pytest.raises(fd.AssemblyError):
        fd.assemble(g, im.constant(1.0), -1.0, "outgoing")
    with pytest.raises(fd.AssemblyError):
        fd.assemble(g, im.constant(1.0), 0.1, "pml")


def test_diagonal_system_solve():
    g = fd.PolarGrid(12, 16, 2.0)
    m = im.angular_limit()
    eps = 0.2
    s = fd.assemble(g, m, eps, "dirichlet0", laplacian=False)
    rng = np.random.default_rng(0)
    f = fd.ComplexField(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape), "source")
    u, res, _ = fd.solve(s, f)
    X1, X2 = g.cartesian()
    expect = -f.values / (m.n(X1, X2) + 1j * eps)
    assert np.allclose(u.values[:-1], expect[:-1], rtol=1e-12)
    assert res < 1e-12


def test_discrete_green_identity():
    g = fd.PolarGrid(32, 32, 4.0)
    s = fd.assemble(g, im.constant(1.0), 0.1, "dirichlet0")
    rng = np.random.default_rng(5)
    v = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
    v[-1] = 0.0
    Lu = (s.laplacian @ v.ravel()).reshape(g.shape)
    w = g.cell_weights
    ip = np.sum(w * np.conj(v) * Lu)
    assert abs(ip.imag) <= 1e-12 * abs(ip)


def test_manufactured_convergence_second_order():
    rows, orders = fd.manufactured_convergence(im.constant(1.0), 0.1, (32, 64, 128))
    assert all(1.8 <= p <= 2.2 for p in orders), orders
    assert rows[0][1] > rows[-1][1]


def test_manufactured_constant_solution_exact():
    # u* = 1 with matching f is reproduced exactly away from the pole closure
    rows, _ = fd.manufactured_convergence(im.constant(1.0), 0.5, (16, 32, 64), kind="one")
    assert all(e < 1e-10 for _, e in rows)


def test_manufactured_order_independent_of_eps():
    _, o1 = fd.manufactured_convergence(im.constant(1.0), 1.0, (32, 64, 128))
    _, o2 = fd.manufactured_convergence(im.constant(1.0), 0.01, (32, 64, 128))
    assert all(1.8 <= p <= 2.2 for p in o1 + o2)


def test_bicgstab_converges_small_system():
    g = fd.PolarGrid(32, 32, 4.0)
    s = fd.assemble(g, im.constant(1.0), 0.5, "outgoing")
    R, _ = g.mesh()
    f = fd.ComplexField(g, np.exp(-((R - 1.0) ** 2)).astype(complex), "source")
    u, res, its = fd.solve(s, f, method="bicgstab", tol=1e-10)
    assert res <= 1e-10
    assert its < 500
    ud, _, _ = fd.solve(s, f, method="direct")
    assert np.max(np.abs(u.values - ud.values)) < 1e-7 * np.max(np.abs(ud.values))


def test_bicgstab_nonconvergence():
    g = fd.PolarGrid(32, 32, 4.0)
    s = fd.assemble(g, im.constant(1.0), 0.0, "outgoing")
    f = fd.ComplexField(g, np.ones(g.shape, dtype=complex), "source")
    with pytest.raises(fd.NonConvergence) as exc:
        fd.solve(s, f, method="bicgstab", tol=1e-14, max_iter=3, ilu=False)
    assert exc.value.iterations == 3


def test_solver_is_deterministic():
    g = fd.PolarGrid(24, 24, 3.0)
    s = fd.assemble(g, im.saito_tilt(4.0), 0.0, "outgoing")
    R, _ = g.mesh()
    f = fd.ComplexField(g, np.exp(-R * R).astype(complex), "source")
    a, _, _ = fd.solve(s, f)
    b, _, _ = fd.solve(s, f)
    assert np.array_equal(a.values, b.values)


def test_gradient_examples():
    g = fd.PolarGrid(64, 64, 4.0)
    R, T = g.mesh()
    ur, ut = fd.gradient(fd.ComplexField(g, R.astype(complex)))
    assert np.allclose(ur.values, 1.0, atol=1e-12)
    assert np.allclose(ut.values, 0.0, atol=1e-12)
    ur, ut = fd.gradient(fd.ComplexField(g, np.exp(1j * T)))
    assert np.allclose(ur.values, 0.0, atol=1e-12)
    assert np.allclose(np.abs(ut.values), 1.0 / R, rtol=2e-3)
    ur, ut = fd.gradient(fd.ComplexField(g, np.exp(1j * R)))
    err = np.max(np.abs(ur.values - 1j * np.exp(1j * R)))
    assert err < 2 * g.dr**2
    assert np.allclose(ut.values, 0.0, atol=1e-12)


def test_outgoing_row_residual_limits():
    L = 10.0
    plane, spherical = [], []
    for N in (32, 64, 128):
        g = fd.PolarGrid(N, 16, L)
        s = fd.assemble(g, im.constant(1.0), 0.0, "outgoing")
        R, _ = g.mesh()
        plane.append(np.max(np.abs(fd.boundary_row_residual(s, fd.ComplexField(g, np.exp(1j * R))))))
        u = fd.ComplexField(g, np.exp(1j * R) / np.sqrt(R))
        spherical.append(np.max(np.abs(fd.boundary_row_residual(s, u))))
    # e^{ir}: pure O(dr^2) truncation of the one-sided difference
    assert plane[0] / plane[1] > 3.5 and plane[1] / plane[2] > 3.5
    # e^{ir}/sqrt(r): the curvature defect |u|/(2L) remains as dr -> 0
    limit = 1.0 / (2 * L * math.sqrt(L))
    assert spherical[0] > spherical[1] > spherical[2]
    assert spherical[-1] == pytest.approx(limit, rel=1e-2)


def test_flux_sign_with_absorption():
    g = fd.PolarGrid(48, 32, 6.0)
    for bc in ("outgoing", "dirichlet0"):
        s = fd.assemble(g, im.angular_limit(), 0.2, bc)
        R, T = g.mesh()
        f = fd.ComplexField(g, (np.exp(-((R - 2) ** 2)) * (1 + 0.5j * np.cos(T))), "source")
        u, _, _ = fd.solve(s, f)
        assert np.sum(g.weights * f.values * np.conj(u.values)).imag <= 0


def test_field_csv_and_metadata(tmp_path):
    g = fd.PolarGrid(4, 8, 1.0)
    v = np.arange(g.size).reshape(g.shape) * (1 + 0.5j) / 3
    u = fd.ComplexField(g, v, "solution")
    u.to_csv(tmp_path / "u.csv")
    u.write_metadata(tmp_path / "u.json")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "r,theta,re,im"
    assert len(lines) == g.size + 1
    back = np.loadtxt(tmp_path / "u.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back[:, 2] + 1j * back[:, 3], v.ravel())
