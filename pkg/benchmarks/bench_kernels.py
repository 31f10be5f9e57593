"""Time the numba kernels against their numpy references, and one end-to-end PGD run per backend.

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from workbench import kernels

SHAPES = [(1, 2, 32), (64, 32, 32), (256, 64, 64), (1000, 64, 64)]

E2E = """
import time
from workbench import data, models, kernels
from workbench.attacks import ThreatModel, AttackBudget, pgd
ds = data.make_dataset("rings2d", 400, 1)
m = models.init_classifier((2, 32, 32), 2, seed=0)
pgd(m, "ce", ds.x[:4], ds.y[:4], ThreatModel("inf", 0.05), AttackBudget(iterations=1))  # compile / load cache
t = time.perf_counter()
pgd(m, "ce", ds.x, ds.y, ThreatModel("inf", 0.05), AttackBudget(iterations=50))
print(kernels.BACKEND, time.perf_counter() - t)
"""


def best(fn, repeats):
    fn()
    return min(timeit.repeat(fn, number=10, repeat=repeats)) / 10


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not available; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'shape (n,d,h)':<18}{'numba us':>12}{'numpy us':>12}")
    for n, d, h in SHAPES:
        x, W, b = rng.random((n, d)), rng.standard_normal((d, h)), rng.standard_normal(h)
        g = rng.standard_normal((n, h))
        rows = [
            ("affine", lambda: kernels.affine(x, W, b), lambda: kernels.affine_numpy(x, W, b)),
            ("affine_backward", lambda: kernels.affine_backward(g, x, W), lambda: kernels.affine_backward_numpy(g, x, W)),
            ("project_linf", lambda: kernels.project_linf(x + 0.1, x, 0.05), lambda: kernels.project_linf_numpy(x + 0.1, x, 0.05)),
            ("project_l2", lambda: kernels.project_l2(x + 0.1, x, 0.05), lambda: kernels.project_l2_numpy(x + 0.1, x, 0.05)),
        ]
        for name, nb, npy in rows:
            print(f"{name:<18}{str((n, d, h)):<18}{best(nb, args.repeats) * 1e6:>12.1f}{best(npy, args.repeats) * 1e6:>12.1f}")
    print("\nend-to-end PGD (400 points, 50 steps, 2-32-32-2 MLP), seconds:")
    for backend in ("numba", "numpy"):
        env = {**os.environ, "WORKBENCH_BACKEND": backend}
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        print("  " + out.stdout.strip())


if __name__ == "__main__":
    main()
