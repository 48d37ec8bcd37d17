"""Compare the compiled kernels against the numpy fallback.

Run from the repository root after ``pip install -e .``::

    python benchmarks/bench_kernels.py [--repeat 5]

Reports the best-of-N wall time per kernel at ML-1m-like sizes
(B=128, n=50, d=64, |V|=3416), then one full forward/backward/Adam
training step with each backend.
"""
import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np

from parec.kernels import backends


def kernel_cases(rng):
    B, n, d, V = 128, 50, 64, 3416
    logits = rng.normal(size=(B * n, V + 1))
    targets = rng.integers(1, V + 1, size=B * n).astype(np.int64)
    x_ln = rng.normal(size=(B * n, d))
    att = rng.normal(size=(B, n, n))
    scores = rng.normal(size=(1024, V + 1))
    g, b = np.ones(d), np.zeros(d)

    def xent(k):
        grad = np.empty_like(logits)
        return lambda: k.softmax_xent(logits, targets, grad, 1.0 / len(targets))

    def ln_fwd(k):
        y, xh, rs = np.empty_like(x_ln), np.empty_like(x_ln), np.empty(B * n)
        return lambda: k.layer_norm_fwd(x_ln, g, b, 1e-8, y, xh, rs)

    def ln_bwd(k):
        y, xh, rs = np.empty_like(x_ln), np.empty_like(x_ln), np.empty(B * n)
        k.layer_norm_fwd(x_ln, g, b, 1e-8, y, xh, rs)
        dx, dg, db = np.empty_like(x_ln), np.zeros(d), np.zeros(d)
        return lambda: k.layer_norm_bwd(x_ln, xh, rs, g, dx, dg, db)

    def sm_fwd(k):
        out = np.empty_like(att)
        return lambda: k.masked_softmax_fwd(att, True, out)

    def sm_bwd(k):
        y = np.empty_like(att)
        k.masked_softmax_fwd(att, True, y)
        dx = np.empty_like(att)
        return lambda: k.masked_softmax_bwd(y, att, dx)

    def ranks(k):
        t = targets[:1024].copy()
        out = np.empty(1024, dtype=np.int64)
        return lambda: k.count_greater(scores, t, out)

    return {
        "softmax_xent (6400x3417)": xent,
        "layer_norm_fwd (6400x64)": ln_fwd,
        "layer_norm_bwd (6400x64)": ln_bwd,
        "masked_softmax_fwd (128x50x50)": sm_fwd,
        "masked_softmax_bwd (128x50x50)": sm_bwd,
        "count_greater (1024x3417)": ranks,
    }


STEP_SNIPPET = """
import numpy as np, timeit
from parec.model import AttentionSpec, ModelDims, init_params, forward
from parec.dataset import SequenceBatch
from parec.training import AdamState, TrainConfig, adam_step, backward
rng = np.random.default_rng(0)
spec = AttentionSpec.from_variant("fparec", k=20)
dims = ModelDims(64, 50, 2, 3416)
params = init_params(spec, dims, 0)
seq = rng.integers(1, 3417, size=(128, 51))
batch = SequenceBatch(seq[:, :-1], seq[:, 1:], seq[:, 1:] != 0, np.arange(128))
state, cfg = AdamState.zeros_like(params), TrainConfig()
def step():
    tr = forward(params, spec, batch, training=True, dropout=0.2, record=True)
    adam_step(params, backward(tr, params), state, cfg)
print(min(timeit.repeat(step, number=1, repeat=REPEAT)))
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = backends()
    if "cython" not in impls:
        print("compiled kernels unavailable; only the numpy fallback is importable")
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    names = list(impls)
    print(f"{'kernel':34s}" + "".join(f"{n:>12s}" for n in names) + "     speedup")
    for label, make in cases.items():
        times = [min(timeit.repeat(make(impls[n]), number=1, repeat=args.repeat)) for n in names]
        speed = f"{times[0] / times[-1]:8.2f}x" if len(times) > 1 else ""
        print(f"{label:34s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times) + f"   {speed}")

    print("\nfull training step (B=128, n=50, d=64, |V|=3416, FPARec k=20):")
    for name in names:
        env = dict(os.environ, PAREC_PURE_PYTHON="1" if name == "numpy" else "0")
        code = STEP_SNIPPET.replace("REPEAT", str(args.repeat))
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.strip()
        print(f"  {name:8s} {float(out) * 1e3:9.1f} ms/step")


if __name__ == "__main__":
    importlib.import_module("parec")
    main()
