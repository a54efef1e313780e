"""Command-line entry point: ``sldp {train,sweep,attack,audit,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex

log = logging.getLogger("sldp")


def _config(args) -> dict:
    if args.config:
        with open(args.config) as f:
            overrides = json.load(f)
    else:
        overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out is not None:
        overrides["out"] = args.out
    return ex.make_config(overrides, full_scale=args.full_scale)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg["out"])
    reports = []
    for seed in cfg["seeds"]:
        rep, run = ex.run_one(cfg, seed, out, keep=True)
        ex.checkpoint_run(run, cfg, seed, out / "checkpoints" / f"seed{seed}.ckpt")
        accs = ", ".join(f"{c.client_id}:{c.accuracy:.4f}" for c in rep.clients)
        log.info("seed %d  accuracy %s  (%.1fs)", seed, accs, rep.wall_time)
        reports.append(rep)
    csv_path, _ = ex.report(reports, out, "train")
    print(csv_path)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = ex.run_tradeoff_sweep(cfg, out_dir=Path(cfg["out"]))
    csv_path, _ = ex.write_rows(rows, ex.SWEEP_COLUMNS, cfg["out"], "sweep", {"config": cfg})
    print(csv_path)
    return 0


def cmd_attack(args) -> int:
    cfg, seed, run = ex.restore_run(args.checkpoint)
    if args.victim is not None:
        cfg["attack"]["victim"] = args.victim
    out = Path(args.out or cfg["out"])
    summary = ex.attack_run(cfg, run, seed, out)
    victim = run.clients[cfg["attack"]["victim"]]
    row = {"seed": seed, "arch": run.spec.arch_name, "client_id": victim.id, "sigma": victim.sigma,
           "injection_point": run.spec.noise_point, **summary}
    cols = ["seed", "arch", "client_id", "sigma", "injection_point", "ssim", "dissimilarity", "mse", "psnr"]
    csv_path, _ = ex.write_rows([row], cols, out, f"attack_seed{seed}", {"config": cfg})
    print(csv_path)
    return 0


def cmd_audit(args) -> int:
    cfg = _config(args)
    rows = ex.run_comm_audit(cfg)
    csv_path, _ = ex.write_rows(rows, ex.AUDIT_COLUMNS, cfg["out"], "audit", {"config": cfg})
    print(csv_path)
    return 0


def cmd_report(args) -> int:
    out = Path(args.out or "runs")
    paths = [Path(p) for p in args.inputs]
    csvs = [p for p in paths if p.suffix == ".csv"]
    jsons = [p for p in paths if p.suffix == ".json"]
    if not csvs and not jsons:
        raise SystemExit("report: give at least one .csv or .json file")
    if csvs:
        print(ex.merge_csv(csvs, out / "merged.csv"))
    if jsons:
        merged = {"sources": [str(p) for p in jsons], "contents": [json.loads(p.read_text()) for p in jsons]}
        dest = out / "merged.json"
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(json.dumps(merged, indent=2, sort_keys=True))
        print(dest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sldp", description="Split learning with heterogeneous DP noise.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file (missing keys take defaults)")
            p.add_argument("--seed", type=int, help="run this seed only")
            p.add_argument("--full-scale", action="store_true", help="full datasets and 100 epochs")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="multi-client training, one report row per client and seed")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("sweep", help="injection point x epsilon grid with attacks")
    common(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("attack", help="inversion attack against a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--victim", type=int)
    common(p, config=False)
    p.set_defaults(func=cmd_attack)
    p = sub.add_parser("audit", help="smashed-data size audit")
    common(p)
    p.set_defaults(func=cmd_audit)
    p = sub.add_parser("report", help="merge CSV / JSON result files")
    p.add_argument("inputs", nargs="+")
    common(p, config=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"sldp: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
