"""Compare the numba and numpy paths of the hot kernels.

Run with ``python3 benchmarks/bench_kernels.py``. Both paths are timed on the
same inputs and checked to agree before any timing is reported.
"""

import argparse
import time

import numpy as np

from viewgrasp import kernels
from viewgrasp._accel import HAS_NUMBA
from viewgrasp.cluster import SurfaceIndex
from viewgrasp.density import log_vmf_normalizer
from viewgrasp.geometry import random_quats
from viewgrasp.hand import default_hand


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t)
    return min(times), out


def mixture_case(rng, n_eval, n_kernels):
    p = rng.normal(scale=0.05, size=(n_eval, 3))
    q = random_quats(rng, n_eval)
    cp = rng.normal(scale=0.05, size=(n_kernels, 3))
    cq = random_quats(rng, n_kernels)
    logw = np.full(n_kernels, -np.log(n_kernels))
    return (p, q, cp, cq, logw, 0.005, 16.0, log_vmf_normalizer(16.0))


def penetration_case(rng, n_cand, n_points):
    hand = default_hand()
    points = rng.uniform(-0.08, 0.08, size=(n_points, 3))
    wp = rng.normal(scale=0.02, size=(n_cand, 3))
    wq = random_quats(rng, n_cand)
    hc = rng.uniform(-0.3, 0.6, size=(n_cand, hand.dof))
    LP, LQ = hand.forward_kinematics_arrays(wp, wq, hc)
    return (points, LP, LQ, *hand.primitive_arrays())


def nearest_case(rng, n_queries, n_surface):
    # points on a wavy sheet, queries scattered around it
    xy = rng.uniform(-0.05, 0.05, size=(n_surface, 2))
    sp = np.column_stack([xy, 0.01 * np.sin(40 * xy[:, 0])])
    sn = np.column_stack([-0.4 * np.cos(40 * xy[:, 0]), np.zeros(n_surface), np.ones(n_surface)])
    sn /= np.linalg.norm(sn, axis=1, keepdims=True)
    idx = SurfaceIndex(sp, sn)
    px = sp[rng.integers(n_surface, size=n_queries)] + rng.normal(scale=0.005, size=(n_queries, 3))
    nx = rng.normal(size=(n_queries, 3))
    nx /= np.linalg.norm(nx, axis=1, keepdims=True)
    radius = 0.02
    return (px, nx, sp, sn, *idx._grid(radius), radius, idx.w_lin, idx.w_ang, idx.cap(radius))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply problem sizes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    s = args.scale
    cases = {
        "pose_mixture_logpdf": mixture_case(rng, int(2000 * s), int(5000 * s)),
        "batch_max_penetration": penetration_case(rng, int(2000 * s), int(3000 * s)),
        "restricted_nearest": nearest_case(rng, int(200000 * s), int(3000 * s)),
    }
    ref, jit = kernels.numpy_reference(), kernels.jit_reference()
    if not HAS_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only")
    print(f"{'kernel':24s} {'numpy s':>10s} {'numba s':>10s} {'speed-up':>9s}")
    for name, case in cases.items():
        t_np, out_np = best_of(ref[name], case, args.repeat)
        if not HAS_NUMBA:
            print(f"{name:24s} {t_np:10.4f} {'-':>10s} {'-':>9s}")
            continue
        jit[name](*case)  # compile
        t_nb, out_nb = best_of(jit[name], case, args.repeat)
        a = out_np[0] if isinstance(out_np, tuple) else out_np
        b = out_nb[0] if isinstance(out_nb, tuple) else out_nb
        if not np.allclose(a, b, rtol=1e-9, atol=1e-12):
            raise SystemExit(f"{name}: numba and numpy paths disagree")
        print(f"{name:24s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
