"""Pipeline bubbles: the prefill/decode example on a Falcon-180B-class pipeline,
then bubble fractions of each scheduler on a LLaMA2-70B-class 2-stage pipeline."""

import argparse
import os
from collections import defaultdict

from servesim.core import ReplicaConfig, SchedulerKind, ms_to_us
from servesim.costmodel import decode_batch, iteration_time, prefill_batch
from servesim.engine import advance_pipeline, simulate
from servesim.io import write_csv
from servesim.presets import load_preset
from servesim.workload import dataset_trace

COLUMNS = ["scheduler", "qps", "bubble_fraction", "PB1_ms", "PB2_ms", "PB3_ms"]


def falcon_example():
    f = load_preset("falcon180b")
    p, tp = f.params, f.tp_degree
    a, b = prefill_batch(4096), decode_batch(32, 4096)
    ta, tb = iteration_time(a, p, tp), iteration_time(b, p, tp)
    sa, sb = ms_to_us(ta / 2), ms_to_us(tb / 2)
    _, bubbles = advance_pipeline(2, [(a, sa, None), (b, sb, None), (a, sa, 0), (b, sb, 1)], ms_to_us(p.pp_send_ms))
    print(f"prefill 4k {ta:.1f} ms, decode bs32@4k {tb:.1f} ms (full iterations)")
    for x in bubbles:
        print(f"  stage {x.stage}: {x.cls.value} {x.duration_us / 1000:.1f} ms"
              f" (x2 = {2 * x.duration_us / 1000:.1f} ms in full-iteration terms)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--qps", default="0.4,0.8")
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--seed", type=int, default=9)
    ap.add_argument("--out", default="out/bubbles")
    args = ap.parse_args()
    falcon_example()
    ll = load_preset("llama2_70b")
    rows = []
    for qps in (float(q) for q in args.qps.split(",")):
        trace = dataset_trace("openchat", qps, args.n, args.seed)
        for sched in SchedulerKind:
            cfg = ReplicaConfig(scheduler=sched, tp_degree=ll.tp_degree, pp_degree=ll.pp_degree,
                                token_budget=1536, max_num_batched_tokens=8192)
            rep = simulate(cfg, ll.params, trace, record_events=False)
            by_cls = defaultdict(int)
            for x in rep.bubbles:
                by_cls[x.cls.value] += x.duration_us
            rows.append({"scheduler": sched.value, "qps": qps, "bubble_fraction": f"{rep.bubble_fraction:.4f}",
                         **{f"{c}_ms": f"{by_cls[c] / 1000:.0f}" for c in ("PB1", "PB2", "PB3")}})
            print(f"{sched.value:>16} qps={qps:<4} bubble_fraction={rep.bubble_fraction:.4f}")
    write_csv(os.path.join(args.out, "bubbles.csv"), COLUMNS, rows)


if __name__ == "__main__":
    main()
