"""Compiled vs numpy kernel timings, plus a short end-to-end training run
under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--episodes 40]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cdsrnp import _kernels_py

try:
    from cdsrnp import _kernels
except ImportError:
    _kernels = None

E2E = """
import time, numpy as np
from cdsrnp import data, model as M, train as TR, kernels
rows = data.synth_generate(data.SynthConfig(users=600, seed=0))
split = data.prepare(rows, seed=0, k_u=0.75)
mcfg = M.ModelConfig(n_items_a=split.vocab.size("A"), n_items_b=split.vocab.size("B"))
tcfg = TR.TrainConfig(epochs=1, episodes_per_epoch={episodes}, validate=False)
t = time.perf_counter()
TR.train_loop(split, mcfg, tcfg)
print(kernels.BACKEND, (time.perf_counter() - t) / {episodes})
"""


def cases(rng):
    # shapes as the model sees them: batches of (T x T) attention rows and
    # embedding-gradient scatters into a (vocab x D) table
    T, D = 15, 32
    scores = rng.standard_normal((240 * T, T))
    mask = np.tril(np.ones((T, T), dtype=bool))[None].repeat(240, 0).reshape(-1, T)
    mask[:, :4] = False
    y = _kernels_py.masked_softmax_forward(scores, mask)
    g = rng.standard_normal(y.shape)
    idx = rng.integers(0, 401, size=240 * 2 * T)
    src = rng.standard_normal((idx.size, D))
    table = np.zeros((401, D))
    return {
        "masked_softmax_forward": lambda impl: impl.masked_softmax_forward(scores, mask),
        "masked_softmax_backward": lambda impl: impl.masked_softmax_backward(y, g),
        "scatter_add_rows": lambda impl: impl.scatter_add_rows(table, idx, src, True),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--episodes", type=int, default=40)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:26s} {t_py:10.3f} {'-':>12s} {'-':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:26s} {t_py:10.3f} {t_c:12.3f} {t_py / t_c:8.2f}x")

    print("\nend-to-end seconds per training episode (D=32, T=15, N_s=10, N_q=20)")
    for backend in ("python", "compiled"):
        env = dict(os.environ, CDSRNP_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", E2E.format(episodes=args.episodes)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  requested {backend:8s} -> ran {out[0]:8s} {float(out[1]):.4f}")


if __name__ == "__main__":
    main()
