"""Where to inject the noise: accuracy against reconstruction quality.

For each injection point a single client trains with epsilon=2 (and once
without noise), then an attacker with black-box query access to the client
head fits a decoder and tries to rebuild held-out digits.  SSIM near 1 means
the attacker recovers the input; near 0 means it learns little beyond the
mean image.  A few reconstructions are written as PGM files.

    python demos/inversion_attack.py [--epochs 5] [--out runs/demo_attack]
"""

import argparse

from sldp import experiments as ex

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=5)
ap.add_argument("--out", default="runs/demo_attack")
args = ap.parse_args()

cfg = ex.make_config({"epochs": args.epochs, "seeds": [0],
                      "attack": {"queries": 400, "eval": 100, "epochs": 15, "export": 4}})
rows = ex.run_tradeoff_sweep(cfg, [2.0, None], ["Input", "Conv(1)", "MaxP(1)"], out_dir=args.out)

print(f"{'point':8s} {'epsilon':>8s} {'accuracy':>9s} {'ssim':>7s}")
for r in rows:
    eps = "none" if r["epsilon"] is None else f"{r['epsilon']:g}"
    print(f"{r['injection_point']:8s} {eps:>8s} {r['accuracy']:9.4f} {r['ssim']:7.4f}")
print(f"\nreconstructions (original | reconstruction) under {args.out}/recon_seed0/")
