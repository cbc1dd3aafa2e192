"""Compare the compiled and numpy ray-trace backends on PSF bundles.

    python benchmarks/bench_kernels.py --samples 512 --repeat 3
"""

import argparse
import time

import numpy as np

from bmisim import kernels, optics


def time_psf(presc, backend, side, depth, theta, repeat):
    best = np.inf
    grid = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        grid = optics.compute_psf(presc, depth, theta, 587.6, side * side, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, grid


def time_trace(presc, backend, side, repeat):
    """Kernel only: an on-axis bundle from 1 m, no sampling or binning."""
    obj = optics.object_point(1.0, 0.0)
    disc = optics.concentric_disc(side) * presc.entrance_semi_diameter
    d = np.column_stack([disc, np.zeros(len(disc))]) - obj
    d /= np.linalg.norm(d, axis=1)[:, None]
    o = np.broadcast_to(obj, d.shape)
    table = presc.surface_table(587.6, clip_sensor=False)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        kernels.trace_bundle(o, d, table, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lens", default="monocentric", choices=("monocentric", "double_gauss"))
    ap.add_argument("--samples", type=int, default=512, help="pupil grid side")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--depth", type=float, default=1.0)
    ap.add_argument("--theta", type=float, default=3.0)
    args = ap.parse_args(argv)

    presc = optics.builtin_prescription(args.lens)
    backends = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])
    rays = args.samples**2
    results = {}
    print(f"{args.lens}, {rays} rays, depth {args.depth} m, field {args.theta} deg")
    for b in backends:
        t, grid = time_psf(presc, b, args.samples, args.depth, args.theta, args.repeat)
        results[b] = (t, grid, time_trace(presc, b, args.samples, args.repeat))
        tk = results[b][2]
        print(f"  {b:7s} psf {t * 1e3:8.1f} ms   trace only {tk * 1e3:8.1f} ms"
              f"  {rays / tk / 1e6:6.2f} Mray/s")
    if len(results) == 2:
        (tn, gn, kn), (tc, gc, kc) = results["numpy"], results["cython"]
        diff = np.abs(gn.samples - gc.samples).sum()
        print(f"  speedup: psf {tn / tc:.2f}x, trace {kn / kc:.2f}x; PSF L1 difference {diff:.2e}")
    else:
        print("  compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
