"""Capacity of every scheduler under both SLOs on both workloads (Yi-34B class).

Runs the bundled capacity configs and merges them into one table. Each
search probes with 2048-request traces, so a full run takes tens of minutes
on one core.
"""

import argparse
import os
import sys

from servesim.cli import main as sim

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/capacity")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    merged = ["dataset,scheduler,slo,qps,infeasible"]
    code = 0
    for ds in ("openchat", "arxiv"):
        out = os.path.join(args.out, ds)
        cfg = os.path.join(ROOT, "configs", f"yi34b_capacity_{ds}.json")
        code = max(code, sim(["capacity", "--config", cfg, "--out", out, "--jobs", str(args.jobs)]))
        with open(os.path.join(out, "capacity.csv")) as f:
            merged += [f"{ds},{line}" for line in f.read().splitlines()[1:]]
    with open(os.path.join(args.out, "capacity_grid.csv"), "w") as f:
        f.write("\n".join(merged) + "\n")
    print("\n".join(merged))
    sys.exit(code)


if __name__ == "__main__":
    main()
