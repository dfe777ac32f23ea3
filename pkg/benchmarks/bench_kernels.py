"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 2048] [--dim 64] [--vocab 64]

Also times one training step of the default model under each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from rsnmt import _kernels_py as py

try:
    from rsnmt import _kernels as cy
except ImportError:
    cy = None

STEP = """
import time
from rsnmt.data import gen_synthetic
from rsnmt.model import ModelConfig
from rsnmt.training import TrainConfig, train_model
c = gen_synthetic("cipher_reorder", 2000, 64, (6, 16), 0)
tc = TrainConfig(total_steps=30, token_budget=2048, checkpoint_every=1000)
t = time.perf_counter()
train_model(ModelConfig(depth=2), c, tc, seed=0, average_last=1)
print((time.perf_counter() - t) / 30)
"""


def bench(fn, *args, number=50):
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=5)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--vocab", type=int, default=64)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end training step timing")
    args = ap.parse_args()
    if cy is None:
        sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    n, d, v = args.rows, args.dim, args.vocab
    x = rng.standard_normal((n, d)).astype(np.float32)
    gain, bias = np.ones(d, np.float32), np.zeros(d, np.float32)
    _, xhat, rstd = py.layer_norm_fwd(x, gain, bias, 1e-6)
    rstd = np.ascontiguousarray(rstd)
    logits = rng.standard_normal((n, v)).astype(np.float32)
    att = rng.standard_normal((n * 4, 16)).astype(np.float32)
    y = py.softmax_fwd(att)
    gold = rng.integers(0, v, n).astype(np.int64)
    ids = rng.integers(0, v, n).astype(np.int64)

    cases = [
        ("layer_norm_fwd", (x, gain, bias, 1e-6)),
        ("layer_norm_bwd", (x, xhat, rstd, gain)),
        ("softmax_fwd", (att,)),
        ("softmax_bwd", (y, att)),
        ("smoothed_ce", (logits, gold, 0.1, 0)),
        ("scatter_add_rows", (np.zeros((v, d), np.float32), ids, x)),
    ]
    print(f"kernel\tpython_us\tcython_us\tspeedup\t(rows={n} dim={d} vocab={v})")
    for name, a in cases:
        tp = bench(getattr(py, name), *a) * 1e6
        tc = bench(getattr(cy, name), *a) * 1e6
        print(f"{name}\t{tp:.1f}\t{tc:.1f}\t{tp / tc:.2f}x")

    if not args.no_step:
        times = {}
        for backend, flag in (("python", "1"), ("cython", "0")):
            env = dict(os.environ, RSNMT_PURE_PYTHON=flag)
            out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
            times[backend] = float(out.stdout.strip().splitlines()[-1])
        print(f"train_step_depth2\t{times['python'] * 1e3:.1f}ms\t{times['cython'] * 1e3:.1f}ms\t"
              f"{times['python'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
