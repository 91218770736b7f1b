"""Config-driven experiments that tie the numerical modules together.

A config is one JSON document. ``ExperimentConfig.from_dict`` merges it over
``DEFAULTS`` and validates every numeric field; ``to_dict`` returns the merged
document, so a config round-trips unchanged. ``run`` writes all artifacts into
a scratch directory and moves them to the output directory only on success.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import platform
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__
from . import eikonal_rays as rays
from . import helmholtz_fd as fd
from . import identities as ident
from . import index_models as im
from . import kernels
from . import norms as nm
from . import waveguide as wg

log = logging.getLogger("hlab")

EXPERIMENTS = (
    "solve",
    "norms",
    "rays",
    "identities",
    "waveguide",
    "concentration",
    "sommerfeld-compare",
    "eps-sweep",
)

DEFAULTS: dict = {
    "experiment": None,
    "model": {"id": "constant", "params": {}},
    "grid": {"Nr": 128, "Ntheta": 128, "L": 20.0},
    "bc": "outgoing",
    "eps": 0.0,
    "eps_list": None,
    "L_list": None,
    "source": {"kind": "ring", "r0": 3.0, "width": 0.5, "amplitude": 1.0},
    "solver": {"method": None, "tol": 1e-10, "max_iter": 2000},
    "norms": {"R0": None, "a": 2.0, "radii": None},
    "rays": {
        "lam": None,
        "Nq": 720,
        "dt": 1e-3,
        "t_max": None,
        "delta": None,
        "r_max": 20.0,
        "every": 50,
        "seed_dt": 1e-2,
        "tol": 1e-10,
        "n_queries": 100,
        "r_query": [2.0, 20.0],
        "queries": None,
        "curl_radii": [2.0, 5.0, 10.0],
        "hj": False,
        "hj_radii": [2.0, 5.0, 10.0, 20.0, 50.0],
        "theta_samples": 128,
    },
    "identities": {"rho": None, "sigma": 1.0, "Psi": "quadratic", "Psi_sigma": 1.0, "R": None},
    "waveguide": {"lam": 0.3, "x_window": 4.0, "check": True},
    "sommerfeld": {
        "r_min": None,
        "weight": "one_plus_r",
        "ray_candidate": True,
        "Nq": 360,
        "dt": 2e-3,
        "seed_dt": 1e-2,
        "tol": 1e-6,
        "r_lattice": 24,
        "theta_lattice": 64,
    },
    "concentration": {"points_per_unit": 3.2, "Ntheta": 256, "half_width_deg": 15.0},
    "workers": 1,
    "out": None,
}

# keys whose values are echoed without validation
FREE_FORM = ("out", "notes")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# -- configuration -----------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base and k not in FREE_FORM and path not in ("model.params.", "source."):
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "params":
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _num(d: dict, key: str, where: str, positive=True, allow_none=False, integer=False):
    v = d.get(key)
    if v is None and allow_none:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}{key} must be a finite number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{where}{key} must be an integer, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{where}{key} must be positive, got {v!r}")
    if positive is None and v < 0:
        raise ConfigError(f"{where}{key} must be >= 0, got {v!r}")


def _num_list(v, name: str, decreasing=False, increasing=False, min_len=1):
    if not isinstance(v, list) or len(v) < min_len:
        raise ConfigError(f"{name} must be a list of at least {min_len} numbers")
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not x > 0:
            raise ConfigError(f"{name} entries must be positive numbers, got {x!r}")
    if decreasing and any(b >= a for a, b in zip(v, v[1:])):
        raise ConfigError(f"{name} must be strictly decreasing")
    if increasing and any(b <= a for a, b in zip(v, v[1:])):
        raise ConfigError(f"{name} must be strictly increasing")


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``key=value`` strings to a raw config; dotted keys reach nested fields.

    Values parse as JSON and fall back to plain strings. Missing intermediate
    sections are taken from the defaults.
    """
    d = _merge(DEFAULTS, d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r} does not name a nested field")
            node = node[p]
        node[parts[-1]] = val
    return d


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def sha256(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, overrides) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(apply_overrides(self.to_dict(), overrides))

    def __getitem__(self, key):
        return self.data[key]

    def validate(self) -> None:
        d = self.data
        if d["experiment"] not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {d['experiment']!r}")
        mdl = d["model"]
        if not isinstance(mdl.get("id"), str) or not isinstance(mdl.get("params", {}), dict):
            raise ConfigError("model needs a string id and a params object")
        if d["experiment"] != "waveguide":
            self.model()  # parameter checks live in the catalogue
        g = d["grid"]
        for k in ("Nr", "Ntheta"):
            _num(g, k, "grid.", integer=True)
        _num(g, "L", "grid.")
        if g["Ntheta"] % 2 or g["Ntheta"] < 8 or g["Nr"] < 4:
            raise ConfigError("grid needs Nr >= 4 and an even Ntheta >= 8")
        if d["bc"] not in ("outgoing", "dirichlet0"):
            raise ConfigError(f"bc must be 'outgoing' or 'dirichlet0', got {d['bc']!r}")
        _num(d, "eps", "", positive=None)
        if d["eps_list"] is not None:
            _num_list(d["eps_list"], "eps_list", decreasing=True)
        used = d["eps_list"] if d["experiment"] == "eps-sweep" and d["eps_list"] else [d["eps"]]
        if d["bc"] == "dirichlet0" and min(used) == 0:
            raise ConfigError("eps = 0 with a Dirichlet wall has resonances; use eps > 0")
        if d["L_list"] is not None:
            _num_list(d["L_list"], "L_list", increasing=True)
        self._validate_source()
        s = d["solver"]
        if s["method"] not in (None, "direct", "bicgstab"):
            raise ConfigError("solver.method must be null, 'direct' or 'bicgstab'")
        _num(s, "tol", "solver.")
        _num(s, "max_iter", "solver.", integer=True)
        n = d["norms"]
        _num(n, "R0", "norms.", positive=None, allow_none=True)
        _num(n, "a", "norms.")
        if n["radii"] is not None:
            _num_list(n["radii"], "norms.radii")
        r = d["rays"]
        for k in ("Nq", "every", "n_queries", "theta_samples"):
            _num(r, k, "rays.", integer=True)
        for k in ("dt", "r_max", "seed_dt", "tol"):
            _num(r, k, "rays.")
        for k in ("lam", "t_max", "delta"):
            _num(r, k, "rays.", allow_none=True)
        _num_list(r["r_query"], "rays.r_query", increasing=True, min_len=2)
        _num_list(r["curl_radii"], "rays.curl_radii")
        _num_list(r["hj_radii"], "rays.hj_radii", increasing=True)
        if r["queries"] is not None:
            q = r["queries"]
            if not isinstance(q, list) or not all(isinstance(p, list) and len(p) == 2 for p in q):
                raise ConfigError("rays.queries must be a list of [x1, x2] pairs")
        i = d["identities"]
        _num(i, "rho", "identities.", allow_none=True)
        _num(i, "R", "identities.", allow_none=True)
        _num(i, "sigma", "identities.")
        _num(i, "Psi_sigma", "identities.")
        if i["Psi"] not in ("quadratic", "gaussian", "piecewise", "transition"):
            raise ConfigError("identities.Psi must be quadratic, gaussian, piecewise or transition")
        w = d["waveguide"]
        _num(w, "x_window", "waveguide.")
        if d["experiment"] == "waveguide":
            if d["eps_list"] is None:
                raise ConfigError("the waveguide experiment needs eps_list")
            try:
                wg.WaveguideParams(lam=w["lam"])
            except (TypeError, wg.WaveguideError) as exc:
                raise ConfigError(f"waveguide: {exc}") from None
        so = d["sommerfeld"]
        _num(so, "r_min", "sommerfeld.", positive=None, allow_none=True)
        if so["weight"] not in ("one_plus_r", "r", "none"):
            raise ConfigError("sommerfeld.weight must be one_plus_r, r or none")
        for k in ("Nq", "r_lattice", "theta_lattice"):
            _num(so, k, "sommerfeld.", integer=True)
        for k in ("dt", "seed_dt", "tol"):
            _num(so, k, "sommerfeld.")
        c = d["concentration"]
        _num(c, "points_per_unit", "concentration.")
        _num(c, "Ntheta", "concentration.", integer=True)
        _num(c, "half_width_deg", "concentration.")
        _num(d, "workers", "", integer=True)
        exp = d["experiment"]
        if exp == "eps-sweep" and (d["eps_list"] is None or len(d["eps_list"]) < 3):
            raise ConfigError("eps-sweep needs an eps_list of at least 3 decreasing values")
        if exp == "concentration":
            if d["L_list"] is None or len(d["L_list"]) < 3:
                raise ConfigError("the concentration experiment needs an L_list of at least 3 sizes")
            if self.model().profile.is_constant:
                raise ConfigError("the concentration experiment needs a non-constant angular profile")

    def _validate_source(self) -> None:
        s = self.data["source"]
        kind = s.get("kind")
        if kind == "ring":
            for k, pos in (("r0", None), ("width", True), ("amplitude", None)):
                s.setdefault(k, DEFAULTS["source"][k])
                _num(s, k, "source.", positive=pos)
        elif kind == "gaussian":
            c = s.get("center", [0.0, 0.0])
            if not (isinstance(c, list) and len(c) == 2):
                raise ConfigError("source.center must be [x1, x2]")
            _num(s, "sigma", "source.")
        elif kind == "file":
            if not isinstance(s.get("path"), str):
                raise ConfigError("file source needs a path")
        elif kind == "zero":
            pass
        else:
            raise ConfigError(f"source.kind must be ring, gaussian, file or zero, got {kind!r}")

    # -- builders -------------------------------------------------------------

    def model(self) -> im.IndexModel:
        m = self.data["model"]
        try:
            return im.build_model(m["id"], **m.get("params", {}))
        except im.ModelError as exc:
            raise ConfigError(str(exc)) from None

    def grid(self, L: float | None = None, Nr: int | None = None, Ntheta: int | None = None):
        g = self.data["grid"]
        return fd.PolarGrid(
            int(Nr if Nr is not None else g["Nr"]),
            int(Ntheta if Ntheta is not None else g["Ntheta"]),
            float(L if L is not None else g["L"]),
        )


# -- sources -------------------------------------------------------------------

def ring_source(grid: fd.PolarGrid, r0: float = 3.0, width: float = 0.5, amplitude: float = 1.0):
    """Annular Gaussian exp(-(r - r0)^2 / 2 width^2) scaled to L2 norm ``amplitude``."""
    R, _ = grid.mesh()
    f = np.exp(-((R - r0) ** 2) / (2.0 * width * width)).astype(complex)
    norm = math.sqrt(float(np.sum(grid.weights * np.abs(f) ** 2)))
    return fd.ComplexField(grid, amplitude * f / norm, "source")


def gaussian_source(grid: fd.PolarGrid, center=(0.0, 0.0), sigma: float = 1.0, amplitude: float = 1.0):
    X1, X2 = grid.cartesian()
    d2 = (X1 - center[0]) ** 2 + (X2 - center[1]) ** 2
    return fd.ComplexField(grid, (amplitude * np.exp(-d2 / (sigma * sigma))).astype(complex), "source")


def file_source(grid: fd.PolarGrid, path: str):
    """Read an ``r,theta,re,im`` CSV as written by ``ComplexField.to_csv``."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read source file: {exc}") from None
    if data.shape != (grid.size, 4):
        raise ConfigError(f"source file has {data.shape[0]} rows, the grid has {grid.size} nodes")
    R, T = grid.mesh()
    if not (np.allclose(data[:, 0], R.ravel()) and np.allclose(data[:, 1], T.ravel())):
        raise ConfigError("source file nodes do not match the configured grid")
    v = (data[:, 2] + 1j * data[:, 3]).reshape(grid.shape)
    return fd.ComplexField(grid, v, "source")


def make_source(spec: dict, grid: fd.PolarGrid) -> fd.ComplexField:
    kind = spec["kind"]
    if kind == "ring":
        return ring_source(grid, spec["r0"], spec["width"], spec["amplitude"])
    if kind == "gaussian":
        return gaussian_source(grid, spec.get("center", (0.0, 0.0)), spec["sigma"], spec.get("amplitude", 1.0))
    if kind == "file":
        return file_source(grid, spec["path"])
    return fd.ComplexField.zeros(grid, "source")


def source_outer_radius(spec: dict) -> float:
    """Radius beyond which the source is negligible (used to start radiation integrals)."""
    if spec["kind"] == "ring":
        return spec["r0"] + 4.0 * spec["width"]
    if spec["kind"] == "gaussian":
        c = spec.get("center", (0.0, 0.0))
        return math.hypot(*c) + 3.0 * spec["sigma"]
    return 0.0


# -- shared pieces -------------------------------------------------------------

def _solve(cfg: ExperimentConfig, grid: fd.PolarGrid, model, eps: float, f=None):
    if cfg["bc"] == "dirichlet0" and eps * grid.L < 4.0:
        log.warning("eps * L = %.3g < 4: the Dirichlet wall reflects noticeably", eps * grid.L)
    f = make_source(cfg["source"], grid) if f is None else f
    sys_ = fd.assemble(grid, model, eps, cfg["bc"])
    s = cfg["solver"]
    u, res, its = fd.solve(sys_, f, method=s["method"], tol=s["tol"], max_iter=int(s["max_iter"]))
    return u, f, {"relative_residual": res, "iterations": its}


def _write_csv(path, header, rows) -> None:
    """CSV with shortest round-trip floats (repr), so values re-read bit-exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _pool_map(fn, items, workers: int):
    """Ordered map; a process pool when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def _norm_report(cfg: ExperimentConfig, u, f, model) -> nm.NormReport:
    n = cfg["norms"]
    g = u.grid
    R0 = nm.default_R0(model) if n["R0"] is None else float(n["R0"])
    rep = nm.morawetz_report(u, model, R0)
    rep.besov_f = nm.besov_norm(f, R0)
    rep.weighted_f = nm.weighted_l2(f, n["a"])
    rep.a = float(n["a"])
    if not model.profile.is_constant:
        rep.concentration = nm.concentration_integral(u, model.profile, max(R0, g.r_inner))
    X1, X2 = g.cartesian()
    _, T = g.mesh()
    r_min = source_outer_radius(cfg["source"])
    rep.sommerfeld = {
        "n_half": nm.sommerfeld_residual(u, np.sqrt(model.n(X1, X2)), r_min=r_min),
        "n_inf_half": nm.sommerfeld_residual(u, np.sqrt(model.n_inf(T)), r_min=r_min),
    }
    radii = n["radii"] if n["radii"] is not None else [0.8 * g.L]
    rows = nm.flux_report(u, f, model, None, radii)
    rep.flux_pairs = [(r[0], r[3], r[4]) for r in rows]
    return rep, rows


# -- experiments ---------------------------------------------------------------

def exp_solve(cfg: ExperimentConfig, out: str) -> dict:
    model = cfg.model()
    g = cfg.grid()
    u, f, info = _solve(cfg, g, model, float(cfg["eps"]))
    u.to_csv(os.path.join(out, "solution.csv"))
    rep, rows = _norm_report(cfg, u, f, model)
    nm.write_flux_csv(rows, os.path.join(out, "flux.csv"))
    return {"solver": info, "norms": rep.to_dict()}


def exp_norms(cfg: ExperimentConfig, out: str) -> dict:
    model = cfg.model()
    g = cfg.grid()
    u, f, info = _solve(cfg, g, model, float(cfg["eps"]))
    rep, rows = _norm_report(cfg, u, f, model)
    nm.write_flux_csv(rows, os.path.join(out, "flux.csv"))
    lhs, rhs, ok = nm.duality_check(f, u)
    _, _, radii, vals = nm.triple_norm_profile(u, rep.R0)
    _write_csv(os.path.join(out, "triple_profile.csv"), ["R", "ball_over_R"], zip(radii, vals))
    return {
        "solver": info,
        "norms": rep.to_dict(),
        "duality": {"lhs": lhs, "rhs": rhs, "ok": ok},
        "besov_detail": asdict(nm.besov_detail(f, rep.R0)),
    }


def _query_points(r: dict) -> np.ndarray:
    if r["queries"] is not None:
        return np.asarray(r["queries"], dtype=float)
    # golden-angle spiral: deterministic and evenly spread in angle and radius
    k = np.arange(int(r["n_queries"]))
    lo, hi = r["r_query"]
    rad = lo + (hi - lo) * (k + 0.5) / len(k)
    ang = k * math.pi * (3.0 - math.sqrt(5.0))
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def exp_rays(cfg: ExperimentConfig, out: str) -> dict:
    model = cfg.model()
    r = cfg["rays"]
    lam = model.lam if r["lam"] is None else float(r["lam"])
    pts = _query_points(r)
    r_max = max(float(r["r_max"]), float(np.hypot(pts[:, 0], pts[:, 1]).max()) * 1.05)
    t_max = r["t_max"] if r["t_max"] is not None else rays.t_max_for(model, lam, r_max)
    bundle = rays.build_bundle(model, lam, Nq=int(r["Nq"]), dt=float(r["dt"]), t_max=t_max, every=int(r["every"]))
    drift = bundle.conservation_drift()
    seed = rays.build_bundle(
        model, lam, Nq=int(r["Nq"]), dt=float(r["seed_dt"]), t_max=t_max, every=1, refine=False
    )
    fld = rays.EikonalField(seed, tol=float(r["tol"]), dt=float(r["dt"]))
    res = fld.solve(pts, strict=True)
    res.to_csv(os.path.join(out, "phase.csv"))
    bundle.trajectory(0).to_csv(os.path.join(out, "trajectory_q0.csv"))
    curl = {str(R): rays.curl_check(fld, rays.circle_loop(R, 64)) for R in r["curl_radii"]}
    report = {
        "lam": lam,
        "t_max": t_max,
        "conservation_drift": drift,
        "curl_check": curl,
        "n_points": int(len(pts)),
        "phase_minus_radius_max": float(np.max(np.abs(res.phi - np.hypot(pts[:, 0], pts[:, 1])))),
    }
    if model.name == "saito_tilt" and model.params["amp"] == 1.0:
        a, b = rays.saito_coefficients(lam)
        _, grad_exact = rays.saito_closed_form(lam, pts)
        report["saito"] = {
            "a": a,
            "b": b,
            "a2_plus_b2_minus_1": a * a + b * b - 1.0,
            "two_ab_minus_inv_lam": 2 * a * b - 1.0 / lam,
            "grad_max_error": float(np.max(np.linalg.norm(res.grad - grad_exact, axis=1))),
        }
    if r["hj"]:
        hj_field = rays.eikonal_field(
            model, 1.05 * max(r["hj_radii"]), lam=lam, Nq=int(r["Nq"]), dt=float(r["dt"]),
            tol=float(r["tol"]), seed_dt=float(r["seed_dt"]),
        )
        hj = rays.hj_report(hj_field, lam, r["delta"], r["hj_radii"], int(r["theta_samples"]))
        report["hj"] = hj.to_dict()
    return report


def _Psi(cfg: ExperimentConfig, model, g):
    i = cfg["identities"]
    kind = i["Psi"]
    if kind == "quadratic":
        return ident.quadratic_Psi()
    if kind == "gaussian":
        return ident.gaussian_Psi(i["Psi_sigma"])
    R = i["R"] if i["R"] is not None else g.L / 4.0
    if kind == "piecewise":
        return ident.vector_Psi_paper(R)
    return ident.vector_Psi_q(R, model.profile)


def exp_identities(cfg: ExperimentConfig, out: str) -> dict:
    model = cfg.model()
    g = cfg.grid()
    eps = float(cfg["eps"])
    u, f, info = _solve(cfg, g, model, eps)
    i = cfg["identities"]
    rho = i["rho"]
    reps = [
        ident.check_flux(u, f, eps, rho=rho),
        ident.check_variational(u, f, model, ident.scalar_phi("gaussian", i["sigma"]), rho=rho),
        ident.check_morawetz(u, f, model, eps, _Psi(cfg, model, g), rho=rho),
    ]
    rows = [(r.name, r.rho, r.lhs, r.rhs, r.abs_residual, r.rel_residual, r.term_residual) for r in reps]
    header = ["identity", "rho", "lhs", "rhs", "abs_residual", "rel_residual", "term_residual"]
    _write_csv(os.path.join(out, "identities.csv"), header, rows)
    report = {"solver": info, "identities": [r.to_dict() for r in reps]}
    if not model.profile.is_constant:
        R = i["R"] if i["R"] is not None else g.L / 4.0
        report["psi_q_decomposition"] = ident.psi_q_decomposition(u, model, None, R, rho=rho).to_dict()
    return report


def _waveguide_row(args):
    lam, eps, x_window, check = args
    p = wg.WaveguideParams(lam=lam, eps=eps)
    T = wg.tangential_energy(p, check=check)
    ce = wg.conjugated_energy(p, x_window)["value"]
    return (eps, T, ce, wg.source_norm(p), wg.triple_u(p)[0])


def exp_waveguide(cfg: ExperimentConfig, out: str) -> dict:
    w = cfg["waveguide"]
    eps_list = [float(e) for e in cfg["eps_list"]]
    if any(not 1e-5 < e < 1.0 for e in eps_list):
        raise ConfigError("waveguide eps values must lie in (1e-5, 1)")
    params = wg.WaveguideParams(lam=float(w["lam"]))
    jobs = [(params.lam, e, float(w["x_window"]), bool(w["check"])) for e in eps_list]
    rows = _pool_map(_waveguide_row, jobs, int(cfg["workers"]))
    _write_csv(os.path.join(out, "waveguide.csv"), ["epsilon", "T", "conjugated_energy", "N_f", "triple_u"], rows)
    T = [r[1] for r in rows]
    slope, intercept, r2 = wg.linear_fit([math.log(1.0 / e) for e in eps_list], T)
    Nf = [r[3] for r in rows]
    ce = [r[2] for r in rows]
    fit = {
        "slope": slope,
        "intercept": intercept,
        "r2": r2,
        "T_ratio_last_first": T[-1] / T[0],
        "N_f_max_over_min": max(Nf) / min(Nf),
        "conjugated_energy_spread": max(ce) - min(ce),
        "asymptotic_slope": 2.0 * params.lam * math.sqrt(2.0) / 3.0,
    }
    _write_json(os.path.join(out, "fit.json"), fit)
    detail = wg.conjugated_energy(params.with_eps(eps_list[0]), float(w["x_window"]))
    return {"lam": params.lam, "rows": rows, "fit": fit, "conjugated_energy_detail": detail}


def _sweep_row(args):
    cfg_dict, eps = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model = cfg.model()
    g = cfg.grid()
    u, f, _ = _solve(cfg, g, model, eps)
    R0 = nm.default_R0(model) if cfg["norms"]["R0"] is None else float(cfg["norms"]["R0"])
    rep = nm.morawetz_report(u, model, R0)
    X1, X2 = g.cartesian()
    fn = fd.ComplexField(g, f.values / np.sqrt(model.n(X1, X2)), "source")
    Nf = nm.besov_norm(fn, R0)
    denom = (eps + model.n2_sup()) * Nf * Nf
    ratio = rep.M2 / denom if denom > 0 else 0.0
    return (eps, rep.triple_u, rep.triple_nu, rep.tangential_energy, rep.M2, Nf, ratio)


def exp_eps_sweep(cfg: ExperimentConfig, out: str) -> dict:
    jobs = [(cfg.to_dict(), float(e)) for e in cfg["eps_list"]]
    rows = _pool_map(_sweep_row, jobs, int(cfg["workers"]))
    header = ["epsilon", "triple_u", "triple_nu", "tangential_energy", "M2", "N_f_over_sqrt_n", "ratio"]
    _write_csv(os.path.join(out, "eps_sweep.csv"), header, rows)
    M2 = [r[4] for r in rows]
    spread = (max(M2) - min(M2)) / max(M2) if max(M2) > 0 else 0.0
    return {"rows": [dict(zip(header, r)) for r in rows], "M2_relative_spread": spread}


def _concentration_row(args):
    cfg_dict, L = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    c = cfg["concentration"]
    model = cfg.model()
    g = cfg.grid(L=L, Nr=int(round(c["points_per_unit"] * L)), Ntheta=int(c["Ntheta"]))
    u, f, _ = _solve(cfg, g, model, float(cfg["eps"]))
    R, _ = g.mesh()
    conc = nm.concentration_integral(u, model.profile, L / 2.0)
    mass = nm.integrate(g, np.abs(u.values) ** 2 / R, a=L / 2.0)
    hist = nm.angular_histogram(u)
    crit = model.profile.critical_angles()
    near = nm.mass_near(g.theta, hist, crit, math.radians(c["half_width_deg"]))
    baseline = min(1.0, len(crit) * 2.0 * c["half_width_deg"] / 360.0)
    flux = nm.flux_report(u, f, model, None, [0.8 * L])[0]
    row = (L, conc, mass, conc / mass if mass > 0 else 0.0, near, baseline, flux[0], flux[3], flux[4])
    return row, g.theta.tolist(), hist.tolist()


def exp_concentration(cfg: ExperimentConfig, out: str) -> dict:
    jobs = [(cfg.to_dict(), float(L)) for L in cfg["L_list"]]
    results = _pool_map(_concentration_row, jobs, int(cfg["workers"]))
    header = [
        "L", "concentration", "annulus_mass", "ratio", "near_critical_mass",
        "uniform_baseline", "R_flux", "volume_lhs", "volume_rhs",
    ]
    rows = [r[0] for r in results]
    _write_csv(os.path.join(out, "concentration.csv"), header, rows)
    for (row, theta, hist) in results:
        _write_csv(
            os.path.join(out, f"histogram_L{row[0]:g}.csv"), ["theta", "mass"], zip(theta, hist)
        )
    ratios = [r[3] for r in rows]
    return {
        "rows": [dict(zip(header, r)) for r in rows],
        "ratio_non_increasing": all(b <= a for a, b in zip(ratios, ratios[1:])),
        "critical_angles": cfg.model().profile.critical_angles().tolist(),
    }


def sommerfeld_table(u, model, r_min: float, weight: str = "one_plus_r", ray_grad=None):
    """Residuals per phase candidate, each normalised by the weighted gradient energy."""
    g = u.grid
    X1, X2 = g.cartesian()
    _, T = g.mesh()
    sn = np.sqrt(model.n(X1, X2))
    cands = {
        "n_half": sn,
        "n_inf_half": np.sqrt(model.n_inf(T)),
        "control_minus_n_half": -sn,
    }
    if ray_grad is not None:
        cands["ray_lam_half_grad_phi"] = ray_grad
    energy = nm.gradient_energy(u, weight, r_min)
    res = {k: nm.sommerfeld_residual(u, v, weight, r_min) for k, v in cands.items()}
    ctrl = res["control_minus_n_half"]
    table = {}
    for k, v in res.items():
        table[k] = {
            "residual": v,
            "normalised": v / energy if energy > 0 else 0.0,
            "ratio_to_control": v / ctrl if ctrl > 0 else 0.0,
        }
    return table, energy


def radial_identity_check(model, G1, G2, grid, r_min: float):
    """|lam^1/2 d_r phi - n^1/2| against |lam^1/2 grad_tau phi|^2 at the nodes.

    From n - lam (d_r phi)^2 = lam |grad_tau phi|^2 the defect equals
    lam |grad_tau phi|^2 / (n^1/2 + lam^1/2 d_r phi), so the measured constant
    must stay below 1 / min(n^1/2 + lam^1/2 d_r phi). G = lam^1/2 grad phi.
    """
    X1, X2 = grid.cartesian()
    R, T = grid.mesh()
    c, s = np.cos(T), np.sin(T)
    Gr = c * G1 + s * G2
    Gt = -s * G1 + c * G2
    sn = np.sqrt(model.n(X1, X2))
    mask = R >= r_min
    defect = np.abs(Gr - sn)[mask]
    tang = (Gt**2)[mask]
    nz = tang > 1e-12
    c_meas = float(np.max(defect[nz] / tang[nz])) if np.any(nz) else 0.0
    c_bound = float(1.0 / np.min((sn + Gr)[mask]))
    return {
        "c_measured": c_meas,
        "c_bound": c_bound,
        "eikonal_defect_max": float(np.max(np.abs(sn**2 - Gr**2 - Gt**2)[mask])),
        "defect_where_tangential_vanishes": float(np.max(defect[~nz])) if np.any(~nz) else 0.0,
    }


def exp_sommerfeld(cfg: ExperimentConfig, out: str) -> dict:
    model = cfg.model()
    g = cfg.grid()
    so = cfg["sommerfeld"]
    u, f, info = _solve(cfg, g, model, float(cfg["eps"]))
    r_min = source_outer_radius(cfg["source"]) if so["r_min"] is None else float(so["r_min"])
    ray_grad = None
    report: dict = {"solver": info, "r_min": r_min, "weight": so["weight"]}
    if so["ray_candidate"]:
        fld = rays.eikonal_field(
            model, 1.05 * g.L, Nq=int(so["Nq"]), dt=float(so["dt"]), seed_dt=float(so["seed_dt"]),
            refine=False, tol=float(so["tol"]),
        )
        G1, G2 = rays.grad_phi_on_grid(fld, g, int(so["r_lattice"]), int(so["theta_lattice"]))
        sl = math.sqrt(fld.bundle.lam)
        ray_grad = (sl * G1, sl * G2)
        report["radial_identity"] = radial_identity_check(model, *ray_grad, g, max(r_min, 1.0))
        R, T = g.mesh()
        Gt = -np.sin(T) * ray_grad[0] + np.cos(T) * ray_grad[1]
        bridging = nm.integrate(g, np.abs(Gt * u.values) ** 2 / (1.0 + R), a=r_min)
        energy = nm.gradient_energy(u, so["weight"], r_min)
        report["bridging"] = {"value": bridging, "normalised": bridging / energy if energy > 0 else 0.0}
    table, energy = sommerfeld_table(u, model, r_min, so["weight"], ray_grad)
    report["gradient_energy"] = energy
    report["candidates"] = table
    rows = [(k, v["residual"], v["normalised"], v["ratio_to_control"]) for k, v in table.items()]
    _write_csv(os.path.join(out, "sommerfeld.csv"), ["candidate", "residual", "normalised", "ratio_to_control"], rows)
    return report


RUNNERS = {
    "solve": exp_solve,
    "norms": exp_norms,
    "rays": exp_rays,
    "identities": exp_identities,
    "waveguide": exp_waveguide,
    "concentration": exp_concentration,
    "sommerfeld-compare": exp_sommerfeld,
    "eps-sweep": exp_eps_sweep,
}


# -- orchestration ---------------------------------------------------------------

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_CAUSTIC = 4

VALIDATION_ERRORS = (ConfigError, wg.WaveguideError, im.ModelError, fd.AssemblyError, rays.InversionDomainError)
NONCONVERGENCE_ERRORS = (fd.NonConvergence, rays.NoConvergence, wg.QuadratureUnderResolved)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, VALIDATION_ERRORS):
        return EXIT_VALIDATION
    if isinstance(exc, NONCONVERGENCE_ERRORS):
        return EXIT_NONCONVERGENCE
    if isinstance(exc, rays.CausticSuspected):
        return EXIT_CAUSTIC
    return 1


def provenance(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    meta = {}
    if d["experiment"] != "waveguide":
        meta = cfg.grid().metadata()
    return {
        "config": d,
        "config_sha256": cfg.sha256(),
        "versions": {
            "hlab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "kernel_backend": kernels.get_backend(),
        "grid": meta,
    }


def run(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Run one experiment; artifacts land in ``out_dir`` only if it succeeds."""
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".hlab-", dir=parent)
    try:
        report = RUNNERS[cfg["experiment"]](cfg, tmp)
        report = {"experiment": cfg["experiment"], "config_sha256": cfg.sha256(), **report}
        _write_json(os.path.join(tmp, "report.json"), report)
        _write_json(os.path.join(tmp, "provenance.json"), provenance(cfg))
        if os.path.isdir(out_dir):
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return report
