"""Time the compiled kernels against the numpy fallback.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``. Shapes match
one training mini-batch and one similarity scoring call of the default
network (9 channels, 250 samples, 120 channel combinations).
"""
import argparse
import timeit

import numpy as np

from ssvep_ensemble.kernels import available_backends


def cases(rng):
    batch, feats, nt = 64, 120, 250
    x3 = rng.standard_normal((batch, feats, nt))
    w3 = rng.standard_normal((16, feats, 2))
    x4 = rng.standard_normal((batch, 16, 125))
    w4 = rng.standard_normal((16, 16, 10))
    d3 = rng.standard_normal((batch, 16, 125))
    c = 9
    xs, ts = rng.standard_normal((c, nt)), rng.standard_normal((c, nt))
    q = np.linalg.qr(rng.standard_normal((nt, 10)))[0]
    wc = rng.standard_normal((c, 120))
    sim = (wc, xs @ xs.T, ts @ ts.T, xs @ ts.T, xs @ q)
    return {
        "conv3 forward (k=2, stride 2)": lambda m: m.conv1d_forward(x3, w3, 2, 0, 0),
        "conv3 backward": lambda m: m.conv1d_backward(d3, x3, w3, 2, 0, 0),
        "conv4 forward (k=10, same)": lambda m: m.conv1d_forward(x4, w4, 1, 4, 5),
        "conv4 backward": lambda m: m.conv1d_backward(d3, x4, w4, 1, 4, 5),
        "candidate scores (120)": lambda m: m.candidate_scores(*sim),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = available_backends()
    names = list(backends)
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in names) +
          ("     speed-up" if len(names) > 1 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        times = []
        for n in names:
            number = 20
            t = min(timeit.repeat(lambda: fn(backends[n]), number=number, repeat=args.repeat))
            times.append(t / number * 1e3)
        line = f"{label:32s}" + "".join(f"{t:10.3f}ms" for t in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:12.2f}x"
        print(line)


if __name__ == "__main__":
    main()
