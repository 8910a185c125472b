"""Time the hot kernels with numba and with the pure-NumPy fallback.

Each backend runs in its own interpreter because the flag is read at import.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--train-steps 50]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from metricforge import _kernels
from metricforge.encoder import EncoderConfig, TokenizerConfig
from metricforge.regression import TrainConfig, new_bundle, predict_many, train
from metricforge.toydata import toy_corpus

repeat, steps = int(sys.argv[1]), int(sys.argv[2])
bundle = new_bundle(TokenizerConfig(), EncoderConfig(), with_src=False, seed=0)
data = toy_corpus(n_sources=32, n_systems=4, seed=0)
n = bundle.params.theta.size
rng = np.random.default_rng(0)
g, m, v = rng.normal(size=n), np.zeros(n), np.zeros(n)


def best(fn):
    fn()  # warm-up, includes compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


theta = bundle.params.theta.copy()
out = {
    "numba": _kernels.USING_NUMBA,
    "items": len(data),
    "params": n,
    "predict_batch": best(lambda: predict_many(bundle, data)),
    "adam_step": best(lambda: _kernels.adam_step(theta, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)),
    "train_steps": best(lambda: train(bundle, data, TrainConfig(total_steps=steps, warmup_steps=1, batch_size=16))),
}
json.dump(out, sys.stdout)
"""


def run(disable: bool, repeat: int, steps: int) -> dict:
    env = {**os.environ, "METRICFORGE_DISABLE_NUMBA": "1" if disable else "0"}
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat), str(steps)],
                          capture_output=True, text=True, env=env, check=True)
    return json.loads(proc.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train-steps", type=int, default=50)
    args = ap.parse_args(argv)
    compiled = run(False, args.repeat, args.train_steps)
    fallback = run(True, args.repeat, args.train_steps)
    if not compiled["numba"]:
        print("numba is not importable; both columns use the NumPy path")
    print(f"{compiled['items']} segments, {compiled['params']} encoder parameters, best of {args.repeat}")
    print(f"{'kernel':<22}{'numba (s)':>12}{'numpy (s)':>12}{'speed-up':>10}")
    for key, label in (("predict_batch", "predict (all items)"), ("adam_step", "adam step"),
                       ("train_steps", f"train {args.train_steps} steps")):
        a, b = compiled[key], fallback[key]
        print(f"{label:<22}{a:>12.4f}{b:>12.4f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
