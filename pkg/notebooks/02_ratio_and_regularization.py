"""Trend reproduction: compression ratio sweep and the effect of dropping agnostic samples.

    python3 notebooks/02_ratio_and_regularization.py path/to/base.lccm [out_dir] [--jobs N]

Prints mean probe recall per ratio and mean drift KL with and without the
context-agnostic half of the training mixture.  Both sweeps also leave tidy
CSVs under ``out_dir`` for plotting elsewhere.
"""

import argparse
from collections import defaultdict

import numpy as np

from lcc import harness as H

ap = argparse.ArgumentParser()
ap.add_argument("model")
ap.add_argument("out", nargs="?", default="notebook_sweeps")
ap.add_argument("--jobs", type=int, default=1)
args = ap.parse_args()
weights = H.load_model(args.model)


def summarize(cells, metric):
    by = defaultdict(list)
    for c in cells:
        if metric in c:
            by[c["value"]].append(c[metric])
    return {v: float(np.mean(xs)) for v, xs in by.items()}


# More buffer tokens per context token should not hurt recall (channel capacity).
ratio = H.run_sweep(weights, H.SweepSpec(axis="ratio", values=[2, 4, 8, 16, 32], seeds=[0, 1, 2, 3, 4]),
                    f"{args.out}/ratio", jobs=args.jobs)
for r, acc in summarize(ratio, "Buffer.accuracy").items():
    print(f"ratio {r:>2}x  buffer recall {acc:.3f}")

# Without agnostic samples the buffer drifts away from the model's normal behaviour.
reg = H.run_sweep(weights, H.SweepSpec(axis="n_agnostic", values=[0, 2000], seeds=[0, 1, 2]),
                  f"{args.out}/n_agnostic", jobs=args.jobs)
for n, kl in summarize(reg, "Buffer.kl").items():
    print(f"n_agnostic {n:>4}  drift KL {kl:.3f}")
