"""Refraction-index models with analytic derivatives, and assumption checks.

Every built-in model is evaluated by the compiled kernels in
:mod:`hlab.kernels`, so the ray integrator and the finite-difference
assembly see exactly the same ``n``.

Models that are singular (or merely angular) at the origin are mollified:
inside ``r_moll`` the perturbation is blended to a constant with a quintic
smoothstep on ``[r_moll/2, r_moll]``. Outside ``r_moll`` the formula is
evaluated unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels as K
from .kernels.numpy_impl import fourier_profile, sech_soliton


class ModelError(ValueError):
    """Raised for invalid model parameters or a non-positive index."""


@dataclass(frozen=True)
class AngularProfile:
    """n_inf on the unit circle as a finite Fourier series.

    ``n_inf(theta) = c0 + sum_k a[k-1] cos(k theta) + b[k-1] sin(k theta)``.
    """

    c0: float
    a: tuple = ()
    b: tuple = ()

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        K_ = max(len(a), len(b))
        object.__setattr__(self, "a", a + (0.0,) * (K_ - len(a)))
        object.__setattr__(self, "b", b + (0.0,) * (K_ - len(b)))
        object.__setattr__(self, "c0", float(self.c0))
        if self.n0 <= 0.0:
            raise ModelError("angular profile must be positive on the circle")

    @classmethod
    def constant(cls, value: float) -> "AngularProfile":
        return cls(float(value))

    @property
    def order(self) -> int:
        return len(self.a)

    def _all(self, theta):
        return fourier_profile(theta, self.c0, np.array(self.a), np.array(self.b))

    def eval(self, theta):
        return self._all(theta)[0]

    def d1(self, theta):
        return self._all(theta)[1]

    def d2(self, theta):
        return self._all(theta)[2]

    def d3(self, theta):
        return self._all(theta)[3]

    def __call__(self, theta):
        return self.eval(theta)

    @property
    def n0(self) -> float:
        """A certified lower bound: sampled minimum minus a Lipschitz margin."""
        m = 4096
        th = np.linspace(0.0, 2.0 * np.pi, m, endpoint=False)
        v, d1, _, _ = self._all(th)
        lip = sum(k * math.hypot(ak, bk) for k, (ak, bk) in enumerate(zip(self.a, self.b), 1))
        return float(v.min() - lip * np.pi / m)

    @property
    def is_constant(self) -> bool:
        return not any(self.a) and not any(self.b)

    def critical_angles(self, samples: int = 4096) -> np.ndarray:
        """Zeros of d1 located by sign change plus bisection refinement."""
        th = np.linspace(0.0, 2.0 * np.pi, samples + 1)
        d = self.d1(th)
        out = []
        for i in range(samples):
            lo, hi = th[i], th[i + 1]
            flo, fhi = d[i], d[i + 1]
            if flo == 0.0:
                out.append(lo)
                continue
            if flo * fhi < 0.0:
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    fm = float(self.d1(np.array(mid)))
                    if flo * fm <= 0.0:
                        hi = mid
                    else:
                        lo, flo = mid, fm
                out.append(0.5 * (lo + hi))
        return np.mod(np.array(out), 2.0 * np.pi)

    def to_dict(self) -> dict:
        return {"c0": self.c0, "a": list(self.a), "b": list(self.b)}


def angular_eval(profile: AngularProfile, theta):
    """(n_inf, d n_inf/d omega, d^2 n_inf/d omega^2) at angle(s) ``theta``."""
    v, d1, d2, _ = profile._all(theta)
    return v, d1, d2


@dataclass(frozen=True, eq=False)
class IndexModel:
    """A refraction index n(x) on the plane.

    ``lam`` is the constant of the form n = lam + p. ``gamma``/``delta``
    describe the declared decay ``|n - n_inf| <= n gamma / |x|^delta``
    (``delta = None`` when n - n_inf vanishes outside ``r_moll``, so any
    exponent works).
    """

    name: str
    kind: int
    prm: np.ndarray = field(repr=False)
    lam: float
    profile: AngularProfile | None = None
    gamma: float = 0.0
    delta: float | None = None
    r_moll: float = 0.0
    n_min: float = 0.0
    params: dict = field(default_factory=dict)
    n1: Callable | None = field(default=None, repr=False)

    # -- evaluation -------------------------------------------------------
    def evaluate(self, x1, x2):
        """(n, dn/dx1, dn/dx2, h11, h12, h22) on arrays of points."""
        return K.index_eval(self.kind, self.prm, x1, x2)

    def n(self, x1, x2):
        return self.evaluate(x1, x2)[0]

    def grad_n(self, x1, x2):
        v = self.evaluate(x1, x2)
        return v[1], v[2]

    def hessian(self, x1, x2):
        v = self.evaluate(x1, x2)
        return v[3], v[4], v[5]

    def eval(self, x):
        """n and grad n at a single point ``x``."""
        v = self.evaluate(np.array([float(x[0])]), np.array([float(x[1])]))
        return float(v[0][0]), np.array([v[1][0], v[2][0]])

    def p(self, x1, x2):
        return self.n(x1, x2) - self.lam

    def split(self, x1, x2):
        """(n1, n2) with n = n1 + n2; built-ins are bounded so n1 = 0 by default."""
        n = self.n(x1, x2)
        if self.n1 is None:
            n1 = np.zeros_like(n)
        else:
            n1 = np.asarray(self.n1(x1, x2), dtype=float) + np.zeros_like(n)
        return n1, n - n1

    def n_inf(self, theta):
        if self.profile is None:
            raise ModelError(f"model {self.name!r} declares no angular limit")
        return self.profile.eval(theta)

    def unmollified(self) -> "IndexModel":
        """The same model with mollification switched off (singular at 0)."""
        if self.kind not in (K.SAITO, K.ANGULAR):
            return self
        prm = self.prm.copy()
        prm[1] = 0.0
        return _replace(self, prm=prm, r_moll=0.0)

    def n2_sup(self) -> float:
        """sup |n2|, used by the eps-sweep ratios (n1 = 0 for built-ins)."""
        if self.kind == K.CONSTANT:
            return abs(self.lam)
        if self.kind == K.WAVEGUIDE:
            lw = self.params["lambda_w"]
            return 1.0 + 0.5 * lw * lw
        r = np.geomspace(max(self.r_moll, 1e-3) / 2, 1e3, 400)
        th = np.linspace(0.0, 2.0 * np.pi, 256, endpoint=False)
        R, T = np.meshgrid(r, th, indexing="ij")
        n = self.n(R * np.cos(T), R * np.sin(T))
        return float(np.abs(n).max())

    def ray_params(self) -> dict:
        """Substepping policy for the ray integrator (see ``kernels.substeps``)."""
        if self.kind in (K.SAITO, K.ANGULAR) and self.r_moll > 0.0:
            return {"ref_c": RAY_REFINE_C, "r_floor": 0.5 * self.r_moll, "ref_max": RAY_REFINE_MAX}
        return {"ref_c": 0.0, "r_floor": 1.0, "ref_max": 1}

    def to_dict(self) -> dict:
        d = {"model": self.name, **self.params}
        return d


# Substeps per coarse ray step are ceil(C dt |dX/dt| / max(|X|, r_moll/2)).
# C = 5000 keeps |P|^2 - n/lam below 1e-10 at dt = 1e-3 for every catalogue
# model; far from the origin the factor drops to 1.
RAY_REFINE_C = 5000.0
RAY_REFINE_MAX = 4000


def _replace(model: IndexModel, **kw) -> IndexModel:
    from dataclasses import replace

    return replace(model, **kw)


# -- catalogue ------------------------------------------------------------

def constant(lam: float = 1.0) -> IndexModel:
    if not lam > 0:
        raise ModelError("constant index needs lam > 0")
    return IndexModel(
        name="constant",
        kind=K.CONSTANT,
        prm=np.array([float(lam)]),
        lam=float(lam),
        profile=AngularProfile.constant(lam),
        gamma=0.0,
        delta=None,
        r_moll=0.0,
        n_min=float(lam),
        params={"lam": float(lam)},
    )


def saito_tilt(lam: float = 10.0, amp: float = 1.0, r_moll: float = 0.1) -> IndexModel:
    """n = lam - amp x1/|x|: an angular perturbation that never decays."""
    if not lam > abs(amp):
        raise ModelError("saito_tilt needs lam > |amp| so that n > 0")
    if r_moll <= 0:
        raise ModelError("saito_tilt is discontinuous at 0 and needs r_moll > 0")
    return IndexModel(
        name="saito_tilt",
        kind=K.SAITO,
        prm=np.array([float(lam), float(r_moll), float(amp)]),
        lam=float(lam),
        profile=AngularProfile(lam, (-amp,)),
        gamma=0.0,
        delta=None,
        r_moll=float(r_moll),
        n_min=float(lam - abs(amp)),
        params={"lam": float(lam), "amp": float(amp), "r_moll": float(r_moll)},
    )


def angular_limit(
    c0: float = 2.0,
    a: Sequence[float] = (0.0, 1.0),
    b: Sequence[float] = (),
    gamma: float = 0.0,
    delta: float = 1.0,
    lam: float | None = None,
    r_moll: float = 0.1,
) -> IndexModel:
    """n = n_inf(theta) (1 + gamma |x|^-delta) with a Fourier profile n_inf.

    Defaults give n_inf = 2 + cos 2 theta. ``lam`` (the constant in
    n = lam + p) defaults to ``c0``.
    """
    prof = AngularProfile(c0, tuple(a), tuple(b))
    if gamma < 0:
        raise ModelError("angular_limit needs gamma >= 0")
    if delta <= 0:
        raise ModelError("angular_limit needs delta > 0")
    if r_moll <= 0 and (gamma > 0 or not prof.is_constant):
        raise ModelError("angular_limit needs r_moll > 0 unless it is constant")
    lam = float(c0 if lam is None else lam)
    if lam <= 0:
        raise ModelError("lam must be positive")
    Kk = prof.order
    prm = np.array(
        [lam, float(r_moll), float(gamma), float(delta), float(Kk), prof.c0, *prof.a, *prof.b]
    )
    # the blend mixes n with a constant of the same sign, so n >= min(n0, mean)
    return IndexModel(
        name="angular_limit",
        kind=K.ANGULAR,
        prm=prm,
        lam=lam,
        profile=prof,
        gamma=float(gamma),
        delta=float(delta) if gamma > 0 else None,
        r_moll=float(r_moll),
        n_min=prof.n0,
        params={
            "c0": prof.c0,
            "a": list(prof.a),
            "b": list(prof.b),
            "gamma": float(gamma),
            "delta": float(delta),
            "lam": lam,
            "r_moll": float(r_moll),
        },
    )


def waveguide(lambda_w: float = 0.3) -> IndexModel:
    """n = lw^2 Q(lw y)^2 + 1 - lw^2/2 with Q = sech(s/sqrt 2)."""
    if not 0.0 < lambda_w < 0.5:
        raise ModelError("waveguide needs 0 < lambda < 1/2")
    lw = float(lambda_w)
    return IndexModel(
        name="waveguide",
        kind=K.WAVEGUIDE,
        prm=np.array([lw]),
        lam=1.0,
        profile=AngularProfile.constant(1.0 - 0.5 * lw * lw),
        gamma=0.0,
        delta=None,
        r_moll=0.0,
        n_min=1.0 - 0.5 * lw * lw,
        params={"lambda_w": lw},
    )


CATALOG = {
    "constant": constant,
    "saito_tilt": saito_tilt,
    "angular_limit": angular_limit,
    "waveguide": waveguide,
}


def build_model(model_id: str, **params) -> IndexModel:
    """Construct a catalogue model from its string id and keyword parameters."""
    try:
        factory = CATALOG[model_id]
    except KeyError:
        raise ModelError(f"unknown model {model_id!r}; choose from {sorted(CATALOG)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ModelError(f"bad parameters for {model_id!r}: {exc}") from None


def waveguide_beta_constant(lambda_w: float) -> float:
    """C with sup_{r>1} r (d_r n)_- / n <= 2 C lw^2, from a dense sample of s Q Q'."""
    s = np.linspace(0.0, 40.0, 400001)
    q, q1, _ = sech_soliton(s)
    return float(np.max(-s * q * q1)) / (1.0 - 0.5 * lambda_w**2)


# -- assumption checks ----------------------------------------------------

def _annulus_lattice(j: int, samples: int):
    """Geometric-in-r, uniform-in-theta lattice of C(j), nested in ``samples``.

    ``samples`` is rounded down to a power of two so that larger counts give
    a superset of points (hence a non-decreasing sup).
    """
    m = 1 << int(math.floor(math.log2(samples)))
    r = 2.0 ** (j + np.arange(m + 1) / m)
    th = 2.0 * np.pi * np.arange(m) / m
    R, T = np.meshgrid(r, th, indexing="ij")
    return R * np.cos(T), R * np.sin(T)


def _neg_radial_ratio(model: IndexModel, x1, x2):
    n, g1, g2, *_ = model.evaluate(x1, x2)
    if np.any(n <= 0.0):
        raise ModelError("index is non-positive at a sample point")
    xg = x1 * g1 + x2 * g2
    return np.maximum(-xg, 0.0) / n


def beta_table(model: IndexModel, j_min: int, j_max: int, samples_per_annulus: int = 64):
    """Per-annulus sup of (x . grad n)_- / n for j = j_min..j_max."""
    if j_min > j_max:
        raise ModelError("need j_min <= j_max")
    if samples_per_annulus < 64:
        raise ModelError("samples_per_annulus must be >= 64")
    rows = []
    for j in range(j_min, j_max + 1):
        x1, x2 = _annulus_lattice(j, samples_per_annulus)
        rows.append((j, float(_neg_radial_ratio(model, x1, x2).max())))
    return rows


def beta_coefficient(model: IndexModel, j_min: int, j_max: int, samples_per_annulus: int = 64):
    """2 * sum_j sup_{C(j)} (x . grad n)_- / n, truncated to j_min..j_max."""
    return 2.0 * math.fsum(v for _, v in beta_table(model, j_min, j_max, samples_per_annulus))


@dataclass
class AssumptionReport:
    beta: float
    c0_estimate: float
    gamma_fit: float
    delta_fit: float
    a8_margin: float
    annulus_table: list
    j_range: tuple
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "c0_estimate": self.c0_estimate,
            "gamma_fit": self.gamma_fit,
            "delta_fit": self.delta_fit,
            "a8_margin": self.a8_margin,
            "annulus_table": [{"j": j, "sup": v} for j, v in self.annulus_table],
            "j_range": list(self.j_range),
            "notes": list(self.notes),
        }


def default_test_fields(count: int = 20):
    """Deterministic smooth test fields for the advisory form-bound check.

    Each entry is ``u(x1, x2) -> (u, du/dx1, du/dx2)``: Gaussian bumps, some
    modulated by a plane wave, with centres/widths/wavenumbers from a fixed
    table.
    """
    fields = []
    for k in range(count):
        cx = 1.5 * math.cos(0.7 * k)
        cy = 1.5 * math.sin(1.3 * k)
        s = 0.5 + 0.25 * (k % 4)
        kx = (k % 5) * 0.8
        ky = ((k * 3) % 7) * 0.4

        def u(x1, x2, cx=cx, cy=cy, s=s, kx=kx, ky=ky):
            g = np.exp(-((x1 - cx) ** 2 + (x2 - cy) ** 2) / (s * s))
            c = np.cos(kx * x1 + ky * x2)
            sn = np.sin(kx * x1 + ky * x2)
            gx = -2.0 * (x1 - cx) / (s * s) * g
            gy = -2.0 * (x2 - cy) / (s * s) * g
            return g * c, gx * c - g * kx * sn, gy * c - g * ky * sn

        fields.append(u)
    return fields


def _form_ratio(model: IndexModel, u, half_width=6.0, m=257):
    x = np.linspace(-half_width, half_width, m)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    val, ux, uy = u(X1, X2)
    n1, _ = model.split(X1, X2)
    grad2 = float(np.sum(ux * ux + uy * uy))
    if grad2 == 0.0:
        return None
    return math.sqrt(float(np.sum(np.maximum(n1, 0.0) * val * val)) / grad2)


def assumption_report(
    model: IndexModel,
    profile: AngularProfile | None = None,
    radii: Sequence[float] = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0),
    test_fields=None,
    theta_samples: int = 256,
    beta_tilde: float = 0.5,
    gamma_bar: float | None = None,
    samples_per_annulus: int = 64,
) -> AssumptionReport:
    """Measure the structural constants of ``model`` on a polar lattice.

    ``gamma_fit`` is the sup of |n - n_inf| |x| / n_inf, ``delta_fit`` the
    slope of a log-log fit of max_theta |n - n_inf|/n_inf against r (0 when that
    difference vanishes), and ``a8_margin`` the minimum over the lattice of
    ``beta_tilde |n_inf'|^2 + n gamma_bar / r^delta - (r grad_tau(n - n_inf) . n_inf')_-``.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.size == 0 or np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ModelError("radii must be non-empty, positive and increasing")
    profile = profile if profile is not None else model.profile
    if profile is None:
        raise ModelError("an angular profile is required")
    notes = []
    th = 2.0 * np.pi * np.arange(theta_samples) / theta_samples
    R, T = np.meshgrid(radii, th, indexing="ij")
    x1, x2 = R * np.cos(T), R * np.sin(T)
    n, g1, g2, *_ = model.evaluate(x1, x2)
    ninf, dninf, _ = angular_eval(profile, T)
    diff = np.abs(n - ninf)
    gamma_fit = float(np.max(diff * R / ninf))

    rel = (diff / ninf).max(axis=1)
    good = rel > 1e-14
    if good.sum() >= 2:
        slope = np.polyfit(np.log(radii[good]), np.log(rel[good]), 1)[0]
        delta_fit = float(-slope)
    else:
        delta_fit = 0.0
        notes.append("n - n_inf vanishes on the sampled radii; delta_fit set to 0")

    # A8: angular derivative of (n - n_inf): r grad_tau n = -sin*g1*r + cos*g2*r
    dn_dtheta = R * (-np.sin(T) * g1 + np.cos(T) * g2)
    lhs = np.maximum(-(dn_dtheta - dninf) * dninf, 0.0)
    gb = gamma_fit if gamma_bar is None else float(gamma_bar)
    dl = delta_fit if delta_fit > 0 else 1.0
    a8 = beta_tilde * dninf**2 + n * gb / R**dl - lhs
    a8_margin = float(a8.min())

    fields_ = default_test_fields() if test_fields is None else list(test_fields)
    ratios = [r for r in (_form_ratio(model, u) for u in fields_) if r is not None]
    c0_estimate = 1.0 - max(ratios) if ratios else 1.0
    if model.n1 is None:
        notes.append("n1 = 0 split: the form bound holds with c0 = 1")

    j_min = int(math.floor(math.log2(radii[0])))
    j_max = int(math.floor(math.log2(radii[-1])))
    table = beta_table(model, j_min, j_max, samples_per_annulus)
    beta = 2.0 * math.fsum(v for _, v in table)
    notes.append(f"beta truncated to j in [{j_min}, {j_max}]")
    return AssumptionReport(
        beta=beta,
        c0_estimate=c0_estimate,
        gamma_fit=gamma_fit,
        delta_fit=delta_fit,
        a8_margin=a8_margin,
        annulus_table=table,
        j_range=(j_min, j_max),
        notes=notes,
    )
