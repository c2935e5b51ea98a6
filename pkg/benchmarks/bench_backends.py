"""Compare the numba and pure-numpy kernels on a loaded default-size world.

Usage: python benchmarks/bench_backends.py [--repeat N] [--ticks T]

Kernel timings call both implementations directly, so one process covers
both. The end-to-end row runs a short closed loop once per backend in a
subprocess with ``KDNLOOP_BACKEND`` set.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kdnloop import Scenario, parse_config
from kdnloop.kernels import (advance_numba, advance_numpy, best_subset_numba, best_subset_numpy, observe_numba,
                             observe_numpy)
from kdnloop.sim import FluidModel, step

HOT = {"flows": {"count": 30, "rate_min": 4.0, "rate_max": 12.0}, "sim": {"buffer_packets": 60}}
E2E = ("import time; from kdnloop import load_config, simulate; from kdnloop.cli import bundled_config; "
       "cfg = load_config(bundled_config('stress')); simulate(cfg, 'kdn', 1); "
       "t = time.perf_counter(); simulate(cfg, 'kdn', 2); print(time.perf_counter() - t)")


def kernel_args(seed=1, warm=15):
    w = Scenario(parse_config(HOT), seed).world()
    for _ in range(warm):
        w = step(w)
    m = FluidModel.from_world(w)
    p = m.params
    path_ptr, path_links, node_ptr, pnodes = m.csr()
    head = (m.q, m.capacity, m.link_up)
    tail = (m.base_delay, m.rates, path_ptr, path_links, node_ptr, pnodes, m.task_work, m.cpu_capacity,
            m.node_up, float(p.dt), float(p.penalty_delay), float(p.fwd_work), float(p.proc_delay))
    return head, m.queue_limit, tail


def subset_args(m=12, seed=0):
    rng = np.random.default_rng(seed)
    net = rng.normal(0.2, 1.0, m)
    conflict = np.zeros(m, dtype=np.int64)
    for i in range(m):
        for j in range(i + 1, m):
            if rng.random() < 0.2:
                conflict[i] |= 1 << j
                conflict[j] |= 1 << i
    return net, conflict, 4


def best_of(fn, repeat):
    fn()  # warm-up (numba compile or cache load)
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def end_to_end(backend):
    env = dict(os.environ, KDNLOOP_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--ticks", type=int, default=20, help="lookahead length for the advance kernel")
    ap.add_argument("--no-e2e", action="store_true", help="skip the end-to-end runs")
    args = ap.parse_args(argv)

    head, qlimit, tail = kernel_args()
    net, conflict, k = subset_args()
    cases = [
        (f"advance ({args.ticks} ticks)", lambda: advance_numba(*head, qlimit, *tail, args.ticks),
         lambda: advance_numpy(*head, qlimit, *tail, args.ticks)),
        ("observe", lambda: observe_numba(*head, *tail), lambda: observe_numpy(*head, *tail)),
        ("best_subset (m=12)", lambda: best_subset_numba(net, conflict, k),
         lambda: best_subset_numpy(net, conflict, k)),
    ]
    print(f"{'kernel':<24}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for name, fa, fb in cases:
        ta, tb = best_of(fa, args.repeat), best_of(fb, args.repeat)
        print(f"{name:<24}{ta * 1e6:>10.1f}us{tb * 1e6:>10.1f}us{tb / ta:>9.1f}x")
    if not args.no_e2e:
        ta, tb = end_to_end("numba"), end_to_end("numpy")
        print(f"{'stress run (1000 ticks)':<24}{ta:>11.2f}s{tb:>11.2f}s{tb / ta:>9.1f}x")


if __name__ == "__main__":
    main()
