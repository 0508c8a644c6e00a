#!/usr/bin/env python3
"""Train every mode over several seeds on one dataset and tabulate test metrics.

Example: python scripts/compare_modes.py --steps 150 --seeds 0 1 2 3 4
"""
from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from moc import pipeline
from moc.config import load_config
from moc.detector import MODES
from moc.synthgen import generate_dataset


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON run configuration (defaults otherwise)")
    ap.add_argument("--dataset-seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    ap.add_argument("--csv", help="write per-run rows to this file")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    ds = generate_dataset(cfg.generator, args.dataset_seed)
    bg = pipeline.train_background(ds)
    rows = []
    for mode in args.modes:
        for seed in args.seeds:
            out = pipeline.run(cfg, ds, mode, seed=seed, steps=args.steps, background=bg)
            d = out.report.as_dict()
            row = {"mode": mode, "seed": seed, "f_score": d["f_score"], "ap": d["ap"], "ami": d["ami"]}
            row.update({f"few_shot_{k}": v for k, v in d["few_shot"].items()})
            row["seconds"] = round(out.seconds, 1)
            rows.append(row)
            print(f"{mode:<11} seed {seed}  F {d['f_score']:.3f}  AMI {d['ami']:.3f}  1-shot {d['few_shot']['n1']:.2f}  ({out.seconds:.0f} s)", flush=True)

    print("\nmean over seeds")
    for mode in args.modes:
        sel = [r for r in rows if r["mode"] == mode]
        summary = "  ".join(f"{k} {np.mean([r[k] for r in sel]):.3f}" for k in ("f_score", "ami", "few_shot_n1"))
        print(f"{mode:<11} {summary}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
