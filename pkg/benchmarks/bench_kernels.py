"""Time the numba kernels against the numpy fallback.

Each backend runs in its own interpreter because the backend is chosen at
import time from ``METANEURON_NUMBA``.  Usage::

    python benchmarks/bench_kernels.py [--hidden 100] [--batch 100] [--T 20] [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from metaneuron import _accel
from metaneuron.datasets import LabeledDense, RateEncoded
from metaneuron.dynamics import REFERENCE_TYPES
from metaneuron.network import forward_time_major, init_network
from metaneuron.training import backward, one_hot
from metaneuron.meta import mean_shift

hidden, batch, T, repeat = (int(a) for a in sys.argv[1:5])
rng = np.random.default_rng(0)
data = LabeledDense(rng.random((batch, 784)), rng.integers(0, 10, batch), 10)
x = RateEncoded(data, T, 0).batch(np.arange(batch))
p = REFERENCE_TYPES["2nd-FS"]
model = init_network((784, hidden, 10), T, 0, hidden=p, output=p)
targets = one_hot(data.labels, 10)
pts = rng.normal(size=(2000, 2))

def best(fn):
    fn()  # warm-up (compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

from metaneuron import kernels
cur = rng.random((T, batch, hidden))
args = model.hidden.arrays()
spk, vp, vq, uq, _ = kernels.layer_forward(cur, *args, 1.0, 0.0, 1e6)
g = rng.standard_normal(cur.shape)

def kern_fwd():
    kernels.layer_forward(cur, *args, 1.0, 0.0, 1e6)

def kern_bwd():
    kernels.layer_backward(g, spk, vp, vq, uq, *args, 1.0, 0.0, 0.25)

def fwd():
    return forward_time_major(model, x)

def step():
    out, cache = forward_time_major(model, x)
    backward(model, cache, targets)

print(json.dumps({"numba": _accel.USE_NUMBA,
                  "kernel_fwd_s": best(kern_fwd),
                  "kernel_bwd_s": best(kern_bwd),
                  "forward_s": best(fwd),
                  "train_step_s": best(step),
                  "mean_shift_s": best(lambda: mean_shift(pts, 0.3))}))
"""


def run(flag, args):
    env = dict(os.environ, METANEURON_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(args.hidden), str(args.batch),
                          str(args.T), str(args.repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hidden", type=int, default=100)
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--T", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    nb, np_ = run("1", args), run("0", args)
    if not nb["numba"]:
        print("numba is not installed; both rows use the numpy path")
    print(f"784-{args.hidden}-10, batch {args.batch}, T={args.T} (best of {args.repeat})")
    print(f"{'stage':<14}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for key, name in (("kernel_fwd_s", "neuron fwd"), ("kernel_bwd_s", "neuron bwd"),
                      ("forward_s", "forward"), ("train_step_s", "train step"),
                      ("mean_shift_s", "mean-shift")):
        a, b = 1e3 * nb[key], 1e3 * np_[key]
        print(f"{name:<14}{a:>10.1f}{b:>10.1f}{b / a:>8.1f}x")


if __name__ == "__main__":
    main()
