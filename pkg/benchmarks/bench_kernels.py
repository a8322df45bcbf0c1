"""Compare the numpy and compiled kernel backends.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 5]

Times the depth-to-normals forward pass, its adjoint and batched closest-point
queries against a triangulated depth map, and checks both backends agree.
"""

import argparse
import time

import numpy as np

from depthscan import _backend
from depthscan.geometry import Camera
from depthscan.meshing import triangulate_depth
from depthscan.metrics import AabbTree
from depthscan.synth import SyntheticScene, render_depth_gt


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256, help="image side in pixels")
    ap.add_argument("--queries", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    n = args.size
    cam = Camera.centered(1.6 * n, n, n)
    front, _, _ = render_depth_gt(SyntheticScene("ellipsoid"), cam)
    z = np.ascontiguousarray(front.filled(0.0))
    m = front.mask.astype(np.uint8)
    rng = np.random.default_rng(0)
    cot = rng.normal(size=(n, n, 3))
    mesh = triangulate_depth(front, cam)
    tree = AabbTree(mesh)
    lo, hi = mesh.bounds()
    queries = rng.uniform(lo - 0.05, hi + 0.05, (args.queries, 3))

    backends = _backend.available()
    if "cython" not in backends:
        print("compiled kernels unavailable; timing the numpy backend only")
    print(f"{n}x{n} depth map, {mesh.n_triangles} triangles, {args.queries} queries, best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name in backends) + "     speedup")

    rows = {
        "delta_forward": lambda k: k.delta_forward(z, m, cam.focal_px, cam.cx, cam.cy),
        "delta_vjp": lambda k: k.delta_vjp(z, m, cam.focal_px, cam.cx, cam.cy, cot),
        "closest_points": lambda k: tree.query(queries, backend=k)[0],
    }
    for label, call in rows.items():
        timings, outputs = [], []
        for kmod in backends.values():
            t, out = best_of(lambda: call(kmod), args.repeat)
            timings.append(t)
            outputs.append(out)
        line = f"{label:<16}" + "".join(f"{1e3 * t:>10.2f}ms" for t in timings)
        if len(timings) == 2:
            diff = float(np.max(np.abs(outputs[0] - outputs[1])))
            line += f"  {timings[0] / timings[1]:>8.1f}x  (max diff {diff:.1e})"
        print(line)


if __name__ == "__main__":
    main()
