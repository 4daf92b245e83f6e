"""Chunked prefill and hybrid batching, alone and together, across offered load.

Yi-34B-class replica, 128 openchat-style requests, token budget 1024.
"""

import argparse
import os

from servesim.core import ReplicaConfig
from servesim.engine import simulate
from servesim.io import dumps_csv, write_csv
from servesim.metrics import latency_report
from servesim.presets import load_preset
from servesim.workload import dataset_trace

VARIANTS = {"chunked+hybrid": (True, True), "hybrid-only": (False, True), "chunked-only": (True, False)}
COLUMNS = ["qps", "variant", "tbt_p99_ms", "ttft_median_ms", "sched_delay_median_ms"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--qps", default="0.3,0.5,0.8,1.0")
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--tau", type=int, default=1024)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="out/ablation")
    args = ap.parse_args()
    yi = load_preset("yi34b")
    rows = []
    for qps in (float(q) for q in args.qps.split(",")):
        trace = dataset_trace("openchat", qps, args.n, args.seed)
        for name, (chunked, hybrid) in VARIANTS.items():
            cfg = ReplicaConfig(scheduler="SarathiStallFree", token_budget=args.tau, tp_degree=yi.tp_degree,
                                chunked_prefill=chunked, hybrid_batching=hybrid, max_num_batched_tokens=8192)
            lat = latency_report(simulate(cfg, yi.params, trace, record_events=False))
            rows.append({"qps": qps, "variant": name, "tbt_p99_ms": f"{lat.tbt_p99:.1f}",
                         "ttft_median_ms": f"{lat.ttft_median:.1f}",
                         "sched_delay_median_ms": f"{lat.sched_delay_median:.1f}"})
    write_csv(os.path.join(args.out, "ablation.csv"), COLUMNS, rows)
    print(dumps_csv(COLUMNS, rows), end="")


if __name__ == "__main__":
    main()
