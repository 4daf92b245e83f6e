"""SLO thresholds, reference decode time and token budgets for every bundled preset."""

import argparse
import os

from servesim.costmodel import decode_reference_time
from servesim.io import dumps_csv, write_csv
from servesim.metrics import slo_thresholds
from servesim.presets import PRESET_NAMES, load_preset
from servesim.sched import InfeasibleSLO, compute_token_budget

COLUMNS = ["model", "tp", "pp", "decode_ref_ms", "strict_ms", "relaxed_ms", "tau_strict", "tau_relaxed"]


def rows():
    for name in PRESET_NAMES:
        pr = load_preset(name)
        strict, relaxed = slo_thresholds(pr.params, pr.tp_degree)
        taus = []
        for t in (strict, relaxed):
            try:
                taus.append(compute_token_budget(t, pr.params, pr.pp_degree, tp_degree=pr.tp_degree))
            except InfeasibleSLO:
                taus.append("")
        yield {"model": name, "tp": pr.tp_degree, "pp": pr.pp_degree,
               "decode_ref_ms": f"{decode_reference_time(pr.params, pr.tp_degree):.2f}",
               "strict_ms": f"{strict:.1f}", "relaxed_ms": f"{relaxed:.1f}",
               "tau_strict": taus[0], "tau_relaxed": taus[1]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/slo_table")
    args = ap.parse_args()
    table = list(rows())
    write_csv(os.path.join(args.out, "slo_table.csv"), COLUMNS, table)
    print(dumps_csv(COLUMNS, table), end="")


if __name__ == "__main__":
    main()
