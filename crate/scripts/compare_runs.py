#!/usr/bin/env python3
"""Compare finished training runs.

Each argument is a run directory written by `alignseg train`. The script reads
`metrics.txt` and `log.csv` from every run and prints one row per run, or with
--group, the median over runs that share a label given as LABEL=DIR.

    scripts/compare_runs.py base=runs/rgs_s0 base=runs/rgs_s1 fa=runs/fa_s0 --group
"""

import argparse
import csv
import statistics
import sys
from pathlib import Path


def read_metrics(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        parts = line.split()
        if len(parts) >= 2 and parts[0] in ("miou", "pixel_acc", "boundary_f"):
            out[parts[0]] = float(parts[1])
    return out


def last_loss(path: Path) -> float:
    with path.open() as f:
        rows = list(csv.DictReader(f))
    return float(rows[-1]["loss"]) if rows else float("nan")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("runs", nargs="+", help="DIR or LABEL=DIR")
    ap.add_argument("--group", action="store_true", help="report medians per label")
    args = ap.parse_args()

    rows = []
    for spec in args.runs:
        label, _, d = spec.rpartition("=")
        d = Path(d)
        metrics = d / "metrics.txt"
        if not metrics.exists():
            print(f"{d}: no metrics.txt (run unfinished?)", file=sys.stderr)
            return 1
        m = read_metrics(metrics)
        m["loss"] = last_loss(d / "log.csv")
        rows.append((label or d.name, m))

    keys = ["miou", "pixel_acc", "boundary_f", "loss"]
    if args.group:
        groups = {}
        for label, m in rows:
            groups.setdefault(label, []).append(m)
        print(f"{'label':<20} {'runs':>4} " + " ".join(f"{k:>11}" for k in keys))
        for label, ms in groups.items():
            med = [statistics.median(m[k] for m in ms) for k in keys]
            print(f"{label:<20} {len(ms):>4} " + " ".join(f"{v:>11.4f}" for v in med))
    else:
        print(f"{'run':<20} " + " ".join(f"{k:>11}" for k in keys))
        for label, m in rows:
            print(f"{label:<20} " + " ".join(f"{m[k]:>11.4f}" for k in keys))
    return 0


if __name__ == "__main__":
    sys.exit(main())
