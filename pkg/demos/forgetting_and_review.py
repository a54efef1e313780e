"""One noisy client among clean ones, with and without server-side review.

Five clients share a LeNet-5 split at the first pooling layer.  Client 0
perturbs its smashed data at epsilon=2, the others send it clean.  Under
plain round-robin split learning the server drifts toward the clean
distribution and client 0's accuracy suffers; the review policy keeps a
noisy copy of every clean batch in the server's diet.

    python demos/forgetting_and_review.py [--epochs 6] [--seed 0]

The defaults finish in a couple of minutes; the acceptance suite runs the
same comparison at 15 epochs over three seeds.
"""

import argparse

import numpy as np

from sldp import experiments as ex

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=6)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

base = {"epochs": args.epochs}
settings = {
    "benchmark (all eps=2)": ex.make_config({**base, "epsilons": [2.0] * 5}),
    "conventional SL": ex.make_config(base),
    "SL + review": ex.make_config({**base, "review": {"enabled": True}}),
}

print(f"{'setting':24s} {'eps=2 client(s)':>16s} {'clean clients':>14s}")
for name, cfg in settings.items():
    rep = ex.run_one(cfg, args.seed)
    noisy = [c.accuracy for c in rep.clients if c.epsilon is not None]
    clean = [c.accuracy for c in rep.clients if c.epsilon is None]
    clean_s = f"{np.mean(clean):.4f}" if clean else "-"
    print(f"{name:24s} {np.mean(noisy):16.4f} {clean_s:>14s}   ({rep.wall_time:.0f}s)")
