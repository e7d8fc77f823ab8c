"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time for each backend and the
speedup.  Inputs are sized like a training batch (32 sequences, 50 frames,
32 hidden units) and a DTW between two 200-frame sequences.
"""
import argparse
import timeit

import numpy as np

from caplab import _pure, kernels


def cases(rng):
    B, L, H, D = 32, 50, 32, 8
    pre = rng.normal(size=(B, L, H))
    w_h = rng.normal(size=(H, H)) * 0.3
    lengths = rng.integers(10, L + 1, size=B)
    hs = _pure.rnn_forward(pre, w_h, lengths)
    d_hs = rng.normal(size=(B, L, H))
    dec = (rng.normal(size=(H, D)) * 0.3, rng.normal(size=(B, H)), w_h,
           rng.normal(size=(D, H)) * 0.3, np.zeros(D), rng.normal(size=H) * 0.1, -10.0, 100)
    cost = rng.random((200, 200))
    return {
        "rnn_forward": lambda m: m.rnn_forward(pre, w_h, lengths),
        "rnn_backward": lambda m: m.rnn_backward(hs, w_h, d_hs, lengths),
        "decode_free": lambda m: m.decode_free(*dec),
        "dtw_accumulate": lambda m: m.dtw_accumulate(cost, 1.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    compiled = kernels.compiled()
    if compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, run in cases(rng).items():
        t_pure = min(timeit.repeat(lambda: run(_pure), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<16}{t_pure:>12.3f}{'-':>12}{'-':>10}")
            continue
        t_c = min(timeit.repeat(lambda: run(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{t_pure:>12.3f}{t_c:>12.3f}{t_pure / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
