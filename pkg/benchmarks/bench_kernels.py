"""Time the ray and index kernels on both backends and check they agree.

Run: python benchmarks/bench_kernels.py [--rays 128] [--steps 200] [--repeat 3]

Rays launched from the origin of the mollified models take thousands of
substeps per coarse step at first, which is where the compiled path pays off;
the numpy path of the default run takes about a minute per such model.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from hlab import kernels as K
from hlab import index_models as im
from hlab.eikonal_rays import launch_momentum


def _time(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_rays(model, n_rays: int, steps: int, dt: float, repeat: int) -> dict:
    lam = model.lam
    p0 = launch_momentum(model, lam)
    alpha = 2.0 * np.pi * np.arange(n_rays) / n_rays
    h = np.full(n_rays, dt)
    ns = np.full(n_rays, steps, dtype=np.int64)
    rp = model.ray_params()
    out = {}
    states = {}
    for be in K.available_backends():
        with K.use_backend(be):
            run = lambda: K.rk4_final(model.kind, model.prm, lam, p0, alpha, h, ns, **rp)  # noqa: E731
            states[be] = run()  # warm-up (numba compiles here)
            out[be] = _time(run, repeat)
    if len(states) == 2:
        out["max_abs_diff"] = float(np.max(np.abs(states["numba"] - states["numpy"])))
    return out


def bench_index(model, n_points: int, repeat: int) -> dict:
    rng = np.random.default_rng(0)
    x1, x2 = rng.uniform(-20, 20, (2, n_points))
    out = {}
    vals = {}
    for be in K.available_backends():
        with K.use_backend(be):
            run = lambda: K.index_eval(model.kind, model.prm, x1, x2)  # noqa: E731
            vals[be] = np.array(run())
            out[be] = _time(run, repeat)
    if len(vals) == 2:
        out["max_abs_diff"] = float(np.max(np.abs(vals["numba"] - vals["numpy"])))
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=128)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--dt", type=float, default=1e-2)
    ap.add_argument("--points", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=1)
    args = ap.parse_args(argv)
    models = {
        "constant": im.constant(1.0),
        "saito_tilt": im.saito_tilt(10.0),
        "angular_limit": im.angular_limit(),
        "waveguide": im.waveguide(0.3),
    }
    print(f"backends: {K.available_backends()}  (default from HLAB_NUMBA: {K.get_backend()})")
    print(f"{'kernel':<28}{'numba [s]':>12}{'numpy [s]':>12}{'speed-up':>10}{'max diff':>12}")
    for name, m in models.items():
        for label, res in (
            (f"rk4_final/{name}", bench_rays(m, args.rays, args.steps, args.dt, args.repeat)),
            (f"index_eval/{name}", bench_index(m, args.points, args.repeat)),
        ):
            nb, npy = res.get("numba", np.nan), res["numpy"]
            diff = res.get("max_abs_diff", np.nan)
            print(f"{label:<28}{nb:>12.4f}{npy:>12.4f}{npy / nb:>10.1f}{diff:>12.2e}", flush=True)


if __name__ == "__main__":
    main()
