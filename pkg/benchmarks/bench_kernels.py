"""Time the compiled kernels against the numpy fallback on representative inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--seed 0]

Also checks that both backends return the same results on every input.
"""
import argparse
import time

import numpy as np

from liso import kernels


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _boxes(rng, n):
    return np.c_[rng.uniform(-20, 20, (n, 2)), rng.uniform(-1, 1, n), rng.uniform(1, 5, (n, 3)),
                 rng.uniform(-np.pi, np.pi, n)]


def cases(rng):
    # a frame-sized 6D clustering problem: a few objects plus scattered noise
    centres = rng.uniform(-15, 15, (8, 6))
    X = np.r_[centres[rng.integers(8, size=1500)] + rng.normal(0, 0.5, (1500, 6)), rng.uniform(-20, 20, (300, 6))]
    A, B = _boxes(rng, 60), _boxes(rng, 60)
    T = np.cumsum(rng.normal(size=(100, 100, 3)), axis=1)
    lengths = np.full(100, 100)
    return {
        "dbscan 1800 pts 6D": lambda k: k.dbscan_labels(X, 1.0, 5),
        "iou_matrix 60x60 bev": lambda k: k.iou_matrix(A, B, False),
        "iou_matrix 60x60 3d": lambda k: k.iou_matrix(A, B, True),
        "jerk_loss_grad 100x100": lambda k: k.jerk_loss_grad(T, T + 0.1, lengths, 3.0, 0.1),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(args.seed)
    names = sorted(backends)
    print(f"{'kernel':<26}" + "".join(f"{n:>12}" for n in names) + f"{'speedup':>10}  agree")
    for label, fn in cases(rng).items():
        res = {n: _best(lambda: fn(backends[n]), args.repeat) for n in names}
        row = f"{label:<26}" + "".join(f"{res[n][0] * 1e3:>10.2f}ms" for n in names)
        if "cython" in res:
            row += f"{res['python'][0] / res['cython'][0]:>9.1f}x  {_same(res['python'][1], res['cython'][1])}"
        print(row)


if __name__ == "__main__":
    main()
