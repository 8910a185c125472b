"""The numba kernels and the pure-NumPy fallback compute the same numbers."""

import json
import os
import subprocess
import sys

import numpy as np

from metricforge import _kernels

PROBE = r"""
import json, sys
import numpy as np
from metricforge import _kernels
from metricforge.data import Segment
from metricforge.encoder import EncoderConfig, TokenizerConfig
from metricforge.regression import TrainConfig, loss_and_grad, new_bundle, predict_many, train

tok = TokenizerConfig(vocab_size=128)
enc = EncoderConfig(hidden_size=8, max_tokens_nosrc=16, max_tokens_src=24)
bundle = new_bundle(tok, enc, with_src=True, seed=3)
rng = np.random.default_rng(0)
words = [f"w{i}" for i in range(30)]
items = [Segment(f"i{k}", " ".join(rng.choice(words, 4)), " ".join(rng.choice(words, 5)),
                 src=" ".join(rng.choice(words, 3)), human_score=float(rng.normal())) for k in range(24)]
_, grad, ghead, _ = loss_and_grad(bundle, items[0], 0.5, seed=1)
res = train(bundle, items, TrainConfig(total_steps=25, warmup_steps=3, batch_size=6))
json.dump({"numba": _kernels.USING_NUMBA, "preds": predict_many(bundle, items).tolist(),
           "grad": grad.tolist(), "ghead": ghead.tolist(), "losses": res.losses.tolist(),
           "trained": predict_many(res.bundle, items).tolist()}, sys.stdout)
"""


def _probe(disable: bool) -> dict:
    env = {**os.environ, "METRICFORGE_DISABLE_NUMBA": "1" if disable else "0"}
    out = subprocess.run([sys.executable, "-c", PROBE], capture_output=True, text=True, env=env, check=True)
    return json.loads(out.stdout)


def test_fallback_matches_compiled():
    fast, slow = _probe(False), _probe(True)
    assert slow["numba"] is False
    for key in ("preds", "grad", "ghead", "losses", "trained"):
        assert np.allclose(fast[key], slow[key], rtol=1e-9, atol=1e-12), key


def test_flag_values():
    # "0", "false" and empty keep numba; anything else disables it
    env = {**os.environ, "METRICFORGE_DISABLE_NUMBA": "false"}
    code = "from metricforge import _kernels; print(_kernels.USING_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == str(_kernels.USING_NUMBA)


def test_adam_variants_agree():
    rng = np.random.default_rng(1)
    theta, grad = rng.normal(size=50), rng.normal(size=50)
    a = [theta.copy(), np.zeros(50), np.zeros(50)]
    b = [theta.copy(), np.zeros(50), np.zeros(50)]
    for t in range(1, 6):
        _kernels._adam_vectorized(a[0], grad, a[1], a[2], 1e-2, 0.9, 0.999, 1e-8, t)
        _kernels._adam_fused(b[0], grad, b[1], b[2], 1e-2, 0.9, 0.999, 1e-8, t)
    assert np.allclose(a[0], b[0], rtol=1e-13, atol=1e-15)


def test_benchmark_runs():
    script = os.path.join(os.path.dirname(__file__), "..", "benchmarks", "bench_kernels.py")
    out = subprocess.run([sys.executable, script, "--repeat", "1", "--train-steps", "2"],
                         capture_output=True, text=True, check=True)
    assert "speed-up" in out.stdout and "adam step" in out.stdout
