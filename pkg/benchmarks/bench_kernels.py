"""Wall-clock comparison of the compiled and numpy kernels on full replications.

    python benchmarks/bench_kernels.py --iters 20000 --repeat 3
"""
import argparse
import time

import numpy as np

from distgtd import backend
from distgtd.config import load_config
from distgtd.harness import build_plan, run_replication

CASES = (
    ("testchain d2-gtd2", "preset:testchain", {}),
    ("highway d1-gtd2", "preset:highway", {}),
    ("restricted d2-tdc", "preset:highway-restricted", {}),
    ("highway dropout d2-tdc", "preset:highway", {"network": "dropout", "algo": "d2-tdc", "timescales": 2,
                                                  "beta": 0.2}),
)


def best_of(cfg, plan, name, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        res = run_replication(cfg, plan=plan, backend=name)
        times.append(time.perf_counter() - t)
    return min(times), res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    names = backend.available()
    print(f"{'case':26s}" + "".join(f"{n + ' (s)':>14s}" for n in names) + f"{'speedup':>10s}")
    for label, src, over in CASES:
        _, cfg = load_config(src, iters=args.iters, log_every=max(1, args.iters // 10), **over)
        plan = build_plan(cfg)
        row, runs = [], []
        for name in names:
            dt, res = best_of(cfg, plan, name, args.repeat)
            row.append(dt)
            runs.append(res)
        if len(runs) == 2:
            # both backends must produce the same trajectory before timings mean anything
            np.testing.assert_allclose(runs[0].theta_log, runs[1].theta_log, rtol=1e-10, atol=1e-12)
        speed = f"{row[0] / row[-1]:9.1f}x" if len(row) == 2 else f"{'-':>10s}"
        print(f"{label:26s}" + "".join(f"{t:14.3f}" for t in row) + speed)


if __name__ == "__main__":
    main()
