"""Compiled kernels vs the pure-Python fallback on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Prints one line per kernel with the best wall time of each backend, the
speed-up and whether the two outputs agree.
"""
import argparse
import math
import time

import numpy as np

from ssc3od import _fallback

try:
    from ssc3od import _core
except ImportError:  # pragma: no cover - benchmark needs the built extension
    raise SystemExit("compiled extension not built; run `pip install --no-build-isolation -e .` first")


def random_boxes(rng, n, spread=30.0):
    return np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(3, 6, n), rng.uniform(1.5, 2.5, n),
                            rng.uniform(-math.pi, math.pi, n)])


def best_time(fn, repeat):
    best, out = math.inf, None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(rng):
    a, b = random_boxes(rng, 200), random_boxes(rng, 200)
    dense = random_boxes(rng, 400, spread=10.0)
    scores = rng.random(len(dense))
    boxes = random_boxes(rng, 12)
    angles = np.linspace(-math.pi, math.pi, 2880, endpoint=False)
    return [
        ("iou_matrix 200x200", lambda m: m.iou_matrix(a, b), np.allclose),
        ("nms 400 boxes", lambda m: m.nms(dense, scores, 0.15), np.array_equal),
        ("raycast 2880 rays x 12 boxes", lambda m: m.raycast(0.0, 0.0, angles, boxes, 45.0)[0],
         lambda x, y: np.allclose(x, y, equal_nan=True)),
    ]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'cython':>10s} {'python':>10s} {'speed-up':>9s}  agree")
    for name, run, same in cases(rng):
        tc, oc = best_time(lambda: run(_core), args.repeat)
        tp, op = best_time(lambda: run(_fallback), args.repeat)
        print(f"{name:32s} {tc * 1e3:9.2f}ms {tp * 1e3:9.2f}ms {tp / tc:8.1f}x  {bool(same(oc, op))}")


if __name__ == "__main__":
    main()
