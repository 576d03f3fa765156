"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The first numba call per signature compiles (or loads the on-disk cache); it
is done once as warm-up and excluded from the timings.
"""

import argparse
import json
import timeit

import numpy as np

from ihalab import kernels


def cases(rng):
    s = rng.normal(size=(32 * 8 * 132, 132))
    mask = np.ones(s.shape, bool)
    mask[:, 120:] = False
    y, _ = kernels._softmax_rows_np(s, mask)
    g = rng.normal(size=s.shape)
    hard_s = np.round(rng.normal(size=(20_000, 64)), 1)
    a = rng.normal(size=(96, 12)) @ rng.normal(size=(12, 96))
    r = rng.random((100, 100)) < 0.1
    x = rng.integers(0, 64, 400)
    return {
        "softmax_rows (33792x132)": (kernels.softmax_rows_2d, (s, mask)),
        "softmax_backward (33792x132)": (kernels.softmax_backward_2d, (y, g)),
        "hard_rows (20000x64)": (kernels.hard_rows_2d, (hard_s, np.ones(hard_s.shape, bool))),
        "row_reduce_rank (96x96)": (kernels.row_reduce_rank, (a, 1e-9)),
        "bool_compose 3-hop (100x100)": (kernels.bool_compose_kernel, (r, 3)),
        "cpm3_counts (n=400)": (kernels.cpm3_counts_kernel, (x, 10, 3)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fn, fargs) in cases(rng).items():
        t = {}
        for b in ("numba", "numpy"):
            with kernels.use_backend(b):
                fn(*fargs)
                t[b] = min(timeit.repeat(lambda: fn(*fargs), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "numba_ms": t["numba"], "numpy_ms": t["numpy"]})
        print(f"{name:32s} {t['numba']:10.2f} {t['numpy']:10.2f} {t['numpy'] / t['numba']:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
