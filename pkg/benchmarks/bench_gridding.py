"""Compare the compiled and numpy gridding kernels.

Times ``NufftPlan.forward`` and ``NufftPlan.adjoint`` (which is where the
interpolation/spreading kernels run) with each backend, checks that both
backends agree, and prints one CSV row per case::

    python benchmarks/bench_gridding.py [--repeats 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from rigidttt import nufft

CASES = [
    # (image shape, number of samples, batch)
    ((64, 64), 1024, 4),
    ((128, 128), 4096, 4),
    ((32, 32, 32), 4096, 2),
]


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeats: int = 5, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    rows = []
    backends = ["numpy"] + (["cython"] if nufft._cy_backend is not None else [])
    for shape, m, batch in CASES:
        plan = nufft.NufftPlan(shape)
        coords = rng.uniform(-np.pi, np.pi, size=(m, len(shape)))
        img = rng.standard_normal((batch,) + shape) + 1j * rng.standard_normal((batch,) + shape)
        samples = rng.standard_normal((batch, m)) + 1j * rng.standard_normal((batch, m))
        results = {}
        for name in backends:
            prev = nufft.set_backend(name)
            try:
                fwd = plan.forward(img, coords)
                adj = plan.adjoint(samples, coords)
                t_fwd = _time(lambda: plan.forward(img, coords), repeats)
                t_adj = _time(lambda: plan.adjoint(samples, coords), repeats)
            finally:
                nufft.set_backend(prev)
            results[name] = (fwd, adj, t_fwd, t_adj)
        ref_fwd, ref_adj, np_fwd, np_adj = results["numpy"]
        for name, (fwd, adj, t_fwd, t_adj) in results.items():
            diff = max(np.linalg.norm(fwd - ref_fwd) / np.linalg.norm(ref_fwd),
                       np.linalg.norm(adj - ref_adj) / np.linalg.norm(ref_adj))
            rows.append([name, "x".join(map(str, shape)), m, batch, t_fwd, t_adj,
                         np_fwd / t_fwd, np_adj / t_adj, diff])
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    print("backend,shape,samples,batch,forward_s,adjoint_s,forward_speedup,adjoint_speedup,max_rel_diff")
    for r in run(args.repeats):
        print(f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]:.5f},{r[5]:.5f},{r[6]:.2f},{r[7]:.2f},{r[8]:.2e}")


if __name__ == "__main__":
    main()
