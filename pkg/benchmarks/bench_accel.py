"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_accel.py [--repeat 5] [--end-to-end]

The kernel table calls both paths in one process.  ``--end-to-end`` also
times a short pretrain + one-step joint in two subprocesses, one with
IMDM_NUMBA=0, so the numbers include everything else that runs around the
kernels.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from imdm import _accel

END_TO_END = """
import time
from imdm.analysis import onestep_model_joint
from imdm.core import Rng, Schedule
from imdm.denoiser import NoiseSpec, init_params, to_imdm
from imdm.training import DatasetSpec, TrainConfig, train
t0 = time.perf_counter()
spec = NoiseSpec()
params = to_imdm(init_params(2, 2, Rng(0)), spec, Rng(1))
res = train(params, TrainConfig(iterations=300, seed=0), DatasetSpec.synthetic_pair(), Schedule(), spec)
onestep_model_joint(res.params, 20000, Rng(2), spec)
print(time.perf_counter() - t0)
"""


def best_of(fn, repeat):
    fn()  # warm-up; also triggers compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(g):
    x = g.normal(size=(256, 64, 128))
    probs = g.dirichlet(np.ones(8), size=500_000)
    u = g.random(500_000)
    factors = g.dirichlet(np.ones(4), size=(20_000, 3))
    return [
        ("gelu", lambda: _accel.gelu(x), lambda: _accel.gelu_np(x)),
        ("inverse_cdf", lambda: _accel.inverse_cdf(probs, u), lambda: _accel.inverse_cdf_np(probs, u)),
        ("product_joint", lambda: _accel.product_joint(factors), lambda: _accel.product_joint_np(factors)),
    ]


def end_to_end():
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, IMDM_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", END_TO_END], capture_output=True, text=True, env=env, check=True)
        out[flag] = float(res.stdout.strip())
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        print("numba path inactive (not installed or IMDM_NUMBA=0); both columns use numpy")

    print(f"{'kernel':<15}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, fast, ref in cases(np.random.default_rng(0)):
        a, b = best_of(fast, args.repeat), best_of(ref, args.repeat)
        print(f"{name:<15}{a:>12.4f}{b:>12.4f}{b / a:>9.1f}x")

    if args.end_to_end:
        t = end_to_end()
        print(f"{'end-to-end':<15}{t['1']:>12.2f}{t['0']:>12.2f}{t['0'] / t['1']:>9.1f}x")


if __name__ == "__main__":
    main()
