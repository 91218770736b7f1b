"""Second-order finite differences for i eps u + Delta u + n u = -f on a disk.

The grid is cell-centred in r: ``r_i = (i + 1/2) dr`` with ``dr = L/(Nr - 1/2)``,
so the last node sits on the outer circle ``r = L`` and the first node sits
half a cell from the pole. The Laplacian is written in flux form

    (1/r) d/dr (r du/dr) + (1/r^2) d^2u/dtheta^2,

and because the inner face radius is ``r_{-1/2} = 0`` the row at the pole
needs no ghost value: the coefficient of the antipodal node vanishes.
Multiplying by the cell areas ``r_i dr dtheta`` gives a real symmetric matrix,
which is what makes the discrete energy identities exact.

Node ``(i, j)`` has flat index ``i * Ntheta + j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .index_models import AngularProfile, IndexModel


class NonConvergence(RuntimeError):
    """Iterative solve stopped at ``max_iter`` above the requested tolerance."""

    def __init__(self, iterations: int, residual: float):
        super().__init__(f"BiCGStab did not converge: {iterations} iterations, residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class PolarGrid:
    Nr: int
    Ntheta: int
    L: float

    def __post_init__(self):
        if self.Ntheta < 8 or self.Ntheta % 2:
            raise ValueError("Ntheta must be even and >= 8")
        if self.Nr < 4:
            raise ValueError("Nr must be >= 4")
        if not self.L > 0:
            raise ValueError("L must be positive")

    @property
    def dr(self) -> float:
        return self.L / (self.Nr - 0.5)

    @property
    def dtheta(self) -> float:
        return 2.0 * math.pi / self.Ntheta

    @property
    def r_inner(self) -> float:
        return 0.5 * self.dr

    @property
    def r(self) -> np.ndarray:
        return (np.arange(self.Nr) + 0.5) * self.dr

    @property
    def theta(self) -> np.ndarray:
        return np.arange(self.Ntheta) * self.dtheta

    @property
    def shape(self) -> tuple:
        return (self.Nr, self.Ntheta)

    @property
    def size(self) -> int:
        return self.Nr * self.Ntheta

    def mesh(self):
        """(R, T) arrays of shape (Nr, Ntheta)."""
        return np.meshgrid(self.r, self.theta, indexing="ij")

    def cartesian(self):
        R, T = self.mesh()
        return R * np.cos(T), R * np.sin(T)

    def radial_weights(self, a: float = 0.0, b: float = math.inf) -> np.ndarray:
        """Per-shell ``r_i * |cell_i  intersect  [a, b]|``, cells clipped to [r_inner, L].

        Shell ``i`` owns ``[i dr, (i+1) dr]``. With ``a = 0, b = L`` this is the
        trapezoid rule in r, exact for the annulus area; with a, b on cell
        faces it integrates dyadic annuli without splitting cells.
        """
        lo = np.maximum(np.arange(self.Nr) * self.dr, self.r_inner)
        hi = np.minimum((np.arange(self.Nr) + 1.0) * self.dr, self.L)
        length = np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)
        return self.r * length

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights, shape (Nr, Ntheta); they sum to the annulus area."""
        return np.repeat((self.radial_weights() * self.dtheta)[:, None], self.Ntheta, axis=1)

    @property
    def cell_weights(self) -> np.ndarray:
        """Finite-volume areas ``r_i dr dtheta`` that symmetrise the Laplacian."""
        return np.repeat((self.r * self.dr * self.dtheta)[:, None], self.Ntheta, axis=1)

    def shell_index(self, R: float) -> int:
        """Index of the grid shell nearest to radius ``R``."""
        i = int(round(R / self.dr - 0.5))
        return min(max(i, 0), self.Nr - 1)

    def metadata(self) -> dict:
        return {"Nr": self.Nr, "Ntheta": self.Ntheta, "L": self.L, "r_inner": self.r_inner}


@dataclass(frozen=True, eq=False)
class ComplexField:
    grid: PolarGrid
    values: np.ndarray = field(repr=False)
    role: str = "derived"

    def __post_init__(self):
        v = np.array(self.values, dtype=complex)
        if v.shape == (self.grid.size,):
            v = v.reshape(self.grid.shape)
        if v.shape != self.grid.shape:
            raise ValueError(f"values have shape {v.shape}, grid is {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        if self.role not in ("solution", "source", "derived"):
            raise ValueError(f"unknown role {self.role!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: PolarGrid, fn: Callable, role: str = "derived"):
        """Sample ``fn(r, theta)`` at the nodes."""
        R, T = grid.mesh()
        return cls(grid, np.broadcast_to(fn(R, T), grid.shape), role)

    @classmethod
    def zeros(cls, grid: PolarGrid, role: str = "derived"):
        return cls(grid, np.zeros(grid.shape, dtype=complex), role)

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def scaled(self, c) -> "ComplexField":
        return ComplexField(self.grid, c * self.values, self.role)

    def to_csv(self, path) -> None:
        """``r,theta,re,im`` rows in (i, j) row-major order, 17 significant digits."""
        R, T = self.grid.mesh()
        v = self.values
        with open(path, "w", newline="") as fh:
            fh.write("r,theta,re,im\n")
            for a, b, c, d in zip(R.ravel(), T.ravel(), v.real.ravel(), v.imag.ravel()):
                fh.write(f"{a:.16e},{b:.16e},{c:.16e},{d:.16e}\n")

    def write_metadata(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.grid.metadata(), fh, indent=2)


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    grid: PolarGrid
    matrix: sp.csr_matrix = field(repr=False)
    eps: float
    bc: str
    laplacian: sp.csr_matrix = field(repr=False)
    n_nodes: np.ndarray = field(repr=False)
    boundary_rows: np.ndarray = field(repr=False)
    profile: AngularProfile | None = None

    def describe(self) -> dict:
        return {"bc": self.bc, "eps": self.eps, "rows": self.matrix.shape[0], "nnz": self.matrix.nnz}


def _laplacian(grid: PolarGrid, drop_outer: bool):
    """Flux-form polar Laplacian rows for shells 0..Nr-2 (COO triplets)."""
    Nr, Nt = grid.shape
    dr, dt = grid.dr, grid.dtheta
    r = grid.r
    rows, cols, vals = [], [], []
    j = np.arange(Nt)
    for i in range(Nr - 1):
        k = i * Nt + j
        rp = r[i] + 0.5 * dr
        rm = r[i] - 0.5 * dr  # exactly 0 at i = 0: no coupling across the pole
        cr_p = rp / (r[i] * dr * dr)
        cr_m = rm / (r[i] * dr * dr)
        ct = 1.0 / (r[i] * r[i] * dt * dt)
        rows.append(k)
        cols.append(k)
        vals.append(np.full(Nt, -(cr_p + cr_m) - 2.0 * ct))
        if not (drop_outer and i == Nr - 2):
            rows.append(k)
            cols.append(k + Nt)
            vals.append(np.full(Nt, cr_p))
        if i > 0:
            rows.append(k)
            cols.append(k - Nt)
            vals.append(np.full(Nt, cr_m))
        rows.append(k)
        cols.append(i * Nt + (j + 1) % Nt)
        vals.append(np.full(Nt, ct))
        rows.append(k)
        cols.append(i * Nt + (j - 1) % Nt)
        vals.append(np.full(Nt, ct))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble(
    grid: PolarGrid,
    model: IndexModel,
    eps: float,
    bc: str = "outgoing",
    profile: AngularProfile | None = None,
    laplacian: bool = True,
) -> DiscreteSystem:
    """Assemble ``Delta_h + n + i eps`` with the outer row set by ``bc``.

    ``bc='outgoing'`` imposes ``du/dr - i n_inf^{1/2}(theta) u = 0`` at r = L
    with the second-order one-sided difference; ``bc='dirichlet0'`` uses
    identity rows there. ``laplacian=False`` drops the Delta_h part (test aid).
    """
    if eps < 0:
        raise AssemblyError("eps must be >= 0")
    if bc not in ("outgoing", "dirichlet0"):
        raise AssemblyError(f"unknown boundary condition {bc!r}")
    if eps == 0 and bc != "outgoing":
        raise AssemblyError("eps = 0 is ill-posed without the outgoing condition")
    if bc == "outgoing":
        profile = profile if profile is not None else model.profile
        if profile is None:
            raise AssemblyError("outgoing condition needs an angular profile")
    Nr, Nt = grid.shape
    N = grid.size
    X1, X2 = grid.cartesian()
    n_nodes = model.n(X1, X2)
    rows_l, cols_l, vals_l = _laplacian(grid, drop_outer=(bc == "dirichlet0"))
    lap = sp.csr_matrix((vals_l, (rows_l, cols_l)), shape=(N, N))
    lap.sum_duplicates()

    interior = np.arange((Nr - 1) * Nt)
    diag = np.zeros(N, dtype=complex)
    diag[interior] = n_nodes.ravel()[interior] + 1j * eps
    A = sp.diags(diag, format="csr")
    if laplacian:
        A = A + lap.astype(complex)

    j = np.arange(Nt)
    kb = (Nr - 1) * Nt + j
    if bc == "dirichlet0":
        B = sp.csr_matrix((np.ones(Nt, dtype=complex), (kb, kb)), shape=(N, N))
    else:
        s = np.sqrt(profile.eval(grid.theta))
        dr = grid.dr
        rows = np.concatenate([kb, kb, kb])
        cols = np.concatenate([kb, kb - Nt, kb - 2 * Nt])
        vals = np.concatenate(
            [3.0 / (2 * dr) - 1j * s, np.full(Nt, -4.0 / (2 * dr)), np.full(Nt, 1.0 / (2 * dr))]
        ).astype(complex)
        B = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
    A = (A + B).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    return DiscreteSystem(
        grid=grid,
        matrix=A,
        eps=float(eps),
        bc=bc,
        laplacian=lap,
        n_nodes=n_nodes,
        boundary_rows=kb,
        profile=profile,
    )


def rhs_vector(system: DiscreteSystem, f: ComplexField, boundary_values=None) -> np.ndarray:
    """Right-hand side ``-f`` on interior rows, boundary data on the outer rows."""
    b = -f.flat().astype(complex).copy()
    if boundary_values is None:
        b[system.boundary_rows] = 0.0
        return b
    g = np.broadcast_to(np.asarray(boundary_values, dtype=complex), (system.grid.Ntheta,))
    b[system.boundary_rows] = g
    if system.bc == "dirichlet0":
        # the shell Nr-2 -> Nr-1 coupling was dropped to keep A symmetric;
        # known boundary data moves to the right-hand side instead
        grid = system.grid
        i = grid.Nr - 2
        cr_p = (grid.r[i] + 0.5 * grid.dr) / (grid.r[i] * grid.dr**2)
        b[system.boundary_rows - grid.Ntheta] -= cr_p * g
    return b


def bicgstab(A, b, tol=1e-10, max_iter=1000, M=None):
    """Preconditioned BiCGStab from x0 = 0 (van der Vorst); returns (x, iterations, relres).

    ``M`` is an optional callable applying an approximate inverse of ``A``.
    """
    M = (lambda v: v) if M is None else M
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0, 0.0
    rhat = r.copy()
    rho = alpha = omega = 1.0 + 0j
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    for it in range(1, max_iter + 1):
        rho_new = np.vdot(rhat, r)
        if rho_new == 0:
            break
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        phat = M(p)
        v = A @ phat
        alpha = rho_new / np.vdot(rhat, v)
        s = r - alpha * v
        if np.linalg.norm(s) <= tol * bnorm:
            x = x + alpha * phat
            return x, it, float(np.linalg.norm(b - A @ x) / bnorm)
        shat = M(s)
        t = A @ shat
        tt = np.vdot(t, t)
        omega = np.vdot(t, s) / tt if tt != 0 else 0.0
        x = x + alpha * phat + omega * shat
        r = s - omega * t
        rho = rho_new
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it, float(np.linalg.norm(b - A @ x) / bnorm)
        if omega == 0:
            break
    raise NonConvergence(it, float(np.linalg.norm(b - A @ x) / bnorm))


DIRECT_MAX_NODES = 256 * 256


def solve(
    system: DiscreteSystem,
    f: ComplexField,
    method: str | None = None,
    tol: float = 1e-10,
    max_iter: int = 2000,
    boundary_values=None,
    ilu: bool = True,
):
    """Solve ``A u = -f``; returns ``(u, relative_residual, iterations)``.

    ``method=None`` picks the sparse direct LU up to 256x256 nodes and
    BiCGStab above. BiCGStab uses an incomplete-LU preconditioner unless
    ``ilu=False``.
    """
    if f.grid != system.grid:
        raise ValueError("source and system live on different grids")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method is None:
        method = "direct" if system.grid.size <= DIRECT_MAX_NODES else "bicgstab"
    A = system.matrix.tocsc()
    b = rhs_vector(system, f, boundary_values)
    bnorm = np.linalg.norm(b)
    if method == "direct":
        x = spla.splu(A).solve(b) if bnorm > 0 else np.zeros_like(b)
        its = 1
    elif method == "bicgstab":
        M = None
        if ilu:
            fac = spla.spilu(A, drop_tol=1e-4, fill_factor=10)
            M = fac.solve
        x, its, _ = bicgstab(system.matrix, b, tol=tol, max_iter=max_iter, M=M)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = float(np.linalg.norm(b - system.matrix @ x) / bnorm) if bnorm > 0 else 0.0
    if res > tol and method == "bicgstab":
        raise NonConvergence(its, res)
    return ComplexField(system.grid, x.reshape(system.grid.shape), "solution"), res, its


def gradient(u: ComplexField):
    """(du/dr, (1/r) du/dtheta) by centred differences, one-sided at r_inner and L."""
    g = u.grid
    v = u.values
    dr, dt = g.dr, g.dtheta
    du_r = np.empty_like(v)
    du_r[1:-1] = (v[2:] - v[:-2]) / (2 * dr)
    du_r[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dr)
    du_r[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * dr)
    du_t = (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2 * dt) / g.r[:, None]
    return ComplexField(g, du_r, "derived"), ComplexField(g, du_t, "derived")


def cartesian_gradient(u: ComplexField):
    """(du/dx1, du/dx2) from the polar gradient."""
    du_r, du_t = gradient(u)
    T = u.grid.mesh()[1]
    c, s = np.cos(T), np.sin(T)
    return c * du_r.values - s * du_t.values, s * du_r.values + c * du_t.values


def manufactured_solution(kind: str = "x_gauss"):
    """(u*(r, theta), Delta u*(r, theta)) for a few smooth closed forms.

    ``x_gauss``: u* = x1 exp(-r^2), Delta u* = (4 r^3 - 8 r) cos(theta) exp(-r^2).
    ``one``: u* = 1, Delta u* = 0.
    """
    if kind == "x_gauss":
        return (
            lambda r, t: r * np.cos(t) * np.exp(-r * r),
            lambda r, t: (4 * r**3 - 8 * r) * np.cos(t) * np.exp(-r * r),
        )
    if kind == "one":
        return (lambda r, t: np.ones_like(r), lambda r, t: np.zeros_like(r))
    raise ValueError(f"unknown manufactured solution {kind!r}")


def manufactured_source(grid: PolarGrid, model: IndexModel, eps: float, kind: str = "x_gauss"):
    """(u*, f*) on ``grid`` with f* = -(i eps u* + Delta u* + n u*)."""
    u_fn, lap_fn = manufactured_solution(kind)
    R, T = grid.mesh()
    us = u_fn(R, T).astype(complex)
    n = model.n(R * np.cos(T), R * np.sin(T))
    f = -(1j * eps * us + lap_fn(R, T) + n * us)
    return ComplexField(grid, us, "derived"), ComplexField(grid, f, "source")


def manufactured_convergence(
    model: IndexModel,
    eps: float,
    levels: Sequence[int] = (32, 64, 128),
    L: float = 5.0,
    kind: str = "x_gauss",
    method: str | None = "direct",
):
    """Max-norm errors of the Dirichlet solve against u* on Nr = Ntheta = N grids.

    Returns ``(rows, orders)`` with rows ``(h, error)`` where h = dr and
    ``orders[k] = log2(e_k / e_{k+1})`` for successive levels.
    """
    if len(levels) < 3:
        raise ValueError("need at least 3 levels")
    u_fn, _ = manufactured_solution(kind)
    rows = []
    for N in levels:
        grid = PolarGrid(N, N, L)
        us, fs = manufactured_source(grid, model, eps, kind)
        system = assemble(grid, model, eps, "dirichlet0")
        bvals = u_fn(np.full(grid.Ntheta, grid.L), grid.theta)
        u, _, _ = solve(system, fs, method=method, boundary_values=bvals)
        rows.append((grid.dr, float(np.max(np.abs(u.values - us.values)))))
    orders = []
    for (h0, e0), (h1, e1) in zip(rows, rows[1:]):
        orders.append(math.log(e0 / e1) / math.log(h0 / h1) if e0 > 0 and e1 > 0 else float("nan"))
    return rows, orders


def boundary_row_residual(system: DiscreteSystem, u: ComplexField) -> np.ndarray:
    """(A u) restricted to the outer rows: the discrete radiation-condition defect."""
    return (system.matrix @ u.flat())[system.boundary_rows]
