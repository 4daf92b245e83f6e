"""Latency statistics, SLO thresholds and capacity search."""

from __future__ import annotations

import bisect
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from servesim.core import ReplicaConfig, Request, us_to_ms
from servesim.costmodel import CostModelParams, decode_reference_time
from servesim.engine import Monitor, SimReport, simulate
from servesim.sched import InfeasibleSLO
from servesim.workload import WorkloadSpec

STRICT_FACTOR = 5.0
RELAXED_FACTOR = 25.0
SCHED_DELAY_LIMIT_MS = 2000.0
WARMUP_FRAC = 0.05


def percentile(series: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: element ``ceil(p/100 * n) - 1`` of the sorted series."""
    if len(series) == 0:
        raise ValueError("percentile of an empty series")
    if not 0 <= p <= 100:
        raise ValueError("p must be within [0, 100]")
    s = sorted(series)
    k = max(0, math.ceil(p / 100 * len(s)) - 1)
    return s[k]


def _ceil_frac(n: int, num: int, den: int) -> int:
    """ceil(n * num / den) in exact integer arithmetic."""
    return -(-n * num // den)


def warmup_count(n: int, frac: float = WARMUP_FRAC) -> int:
    return int(math.floor(n * frac))


@dataclass
class LatencyReport:
    ttft_median: Optional[float]
    tbt_p99: float
    tbt_median: float
    sched_delay_median: Optional[float]
    throughput: float  # output tokens per second
    bubble_fraction: float
    makespan: float
    n_measured: int
    n_finished: int
    completed: bool = True
    tbt_series: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("tbt_series")
        return d


def latency_report(report: SimReport, warmup_frac: float = WARMUP_FRAC, keep_series: bool = False) -> LatencyReport:
    """Statistics over all requests except the first ``warmup_frac`` by arrival.

    A run with no TBT samples (every output is a single token) reports a
    TBT of zero.
    """
    reqs = report.requests
    measured = reqs[warmup_count(len(reqs), warmup_frac):]
    tbt_us = [g for r in measured for g in r.tbt_samples_us()]
    ttft = [r.ttft_us for r in measured if r.ttft_us is not None]
    delays = [r.scheduled_us - r.arrival_us for r in measured if r.scheduled_us is not None]
    finished = [r for r in reqs if r.decodes_done == r.output_tokens]
    span_s = report.makespan_us / 1e6
    tokens = sum(r.decodes_done for r in reqs)
    return LatencyReport(
        ttft_median=us_to_ms(percentile(ttft, 50)) if ttft else None,
        tbt_p99=us_to_ms(percentile(tbt_us, 99)) if tbt_us else 0.0,
        tbt_median=us_to_ms(percentile(tbt_us, 50)) if tbt_us else 0.0,
        sched_delay_median=us_to_ms(percentile(delays, 50)) if delays else None,
        throughput=tokens / span_s if span_s > 0 else 0.0,
        bubble_fraction=report.bubble_fraction,
        makespan=us_to_ms(report.makespan_us),
        n_measured=len(measured),
        n_finished=len(finished),
        completed=report.completed,
        tbt_series=[us_to_ms(g) for g in tbt_us] if keep_series else [],
    )


def slo_thresholds(params: CostModelParams, tp_degree: int = 1) -> tuple[float, float]:
    """(strict, relaxed) P99-TBT targets: 5x and 25x the reference decode iteration."""
    ref = decode_reference_time(params, tp_degree)
    return STRICT_FACTOR * ref, RELAXED_FACTOR * ref


def resolve_slo(mode, params: CostModelParams, tp_degree: int = 1) -> float:
    """``mode`` is "strict", "relaxed" or an explicit value in ms."""
    if isinstance(mode, (int, float)) and not isinstance(mode, bool):
        return float(mode)
    strict, relaxed = slo_thresholds(params, tp_degree)
    if mode == "strict":
        return strict
    if mode == "relaxed":
        return relaxed
    raise ValueError(f"slo must be 'strict', 'relaxed' or a number of ms, got {mode!r}")


def meets_slo(report: LatencyReport, slo: float, delay_limit: float = SCHED_DELAY_LIMIT_MS) -> bool:
    if not report.completed or report.sched_delay_median is None:
        return False
    return report.tbt_p99 <= slo and report.sched_delay_median <= delay_limit


class SloMonitor(Monitor):
    """Stops a probe as soon as failing the SLO is certain.

    Counts measured TBT samples above the target and measured requests
    whose scheduling delay is, or is bound to be, above the limit. Requests
    start in arrival order, so the unscheduled ones are a suffix of the
    trace.
    """

    def __init__(self, trace: Sequence[Request], slo_ms: float,
                 warmup_frac: float = WARMUP_FRAC, delay_limit_ms: float = SCHED_DELAY_LIMIT_MS):
        self.slo_ms = slo_ms
        self.delay_limit_ms = delay_limit_ms
        self.warm = warmup_count(len(trace), warmup_frac)
        self.arrivals = [r.arrival_us for r in trace]
        self.ids = {r.id: i for i, r in enumerate(trace)}
        measured = trace[self.warm:]
        n_tbt = sum(r.output_tokens - 1 for r in measured)
        self.tbt_allow = n_tbt - _ceil_frac(n_tbt, 99, 100)
        m = len(measured)
        self.delay_allow = m - _ceil_frac(m, 1, 2)
        self.tbt_violations = 0
        self.delay_violations = 0
        self.delay_limit_us = round(delay_limit_ms * 1000)

    def _measured(self, request: Request) -> bool:
        return self.ids[request.id] >= self.warm

    def on_scheduled(self, request: Request, delay_us: int) -> None:
        if us_to_ms(delay_us) > self.delay_limit_ms and self._measured(request):
            self.delay_violations += 1

    def on_token(self, request: Request, gap_us: int) -> None:
        if us_to_ms(gap_us) > self.slo_ms and self._measured(request):
            self.tbt_violations += 1

    def should_stop(self, now_us: int, n_scheduled: int) -> bool:
        if self.tbt_violations > self.tbt_allow:
            return True
        # arrivals strictly before now - limit will wait longer than the limit
        late = bisect.bisect_left(self.arrivals, now_us - self.delay_limit_us)
        waiting_late = max(0, late - max(n_scheduled, self.warm))
        return self.delay_violations + waiting_late > self.delay_allow


@dataclass
class ProbeResult:
    qps: float
    tbt_p99: float
    ttft_median: Optional[float]
    sched_delay_median: Optional[float]
    passed: bool
    aborted: bool = False

    def row(self) -> dict:
        def fmt(x):
            return "" if x is None else f"{x:.3f}"

        return {
            "qps": f"{self.qps:.6g}",
            "tbt_p99": fmt(self.tbt_p99),
            "ttft_median": fmt(self.ttft_median),
            "sched_delay_median": fmt(self.sched_delay_median),
            "pass": int(self.passed),
        }


PROBE_COLUMNS = ["qps", "tbt_p99", "ttft_median", "sched_delay_median", "pass"]


def run_probe(config: ReplicaConfig, params: CostModelParams, workload: WorkloadSpec,
              slo_ms: float, qps: float, seed: int, n_requests: int = 2048,
              early_abort: bool = True) -> ProbeResult:
    trace = workload.trace(qps, n_requests, seed)
    monitor = SloMonitor(trace, slo_ms) if early_abort else None
    rep = simulate(config, params, trace, record_events=False, monitor=monitor)
    lat = latency_report(rep)
    return ProbeResult(qps, lat.tbt_p99, lat.ttft_median, lat.sched_delay_median,
                       meets_slo(lat, slo_ms), rep.aborted)


def _probe_star(args) -> ProbeResult:
    return run_probe(*args)


@dataclass
class CapacityResult:
    qps: float
    slo_ms: float
    probes: list[ProbeResult]
    warnings: list[str] = field(default_factory=list)


def capacity_search(
    config: ReplicaConfig,
    params: CostModelParams,
    workload: WorkloadSpec,
    slo_ms: float,
    seed: int,
    *,
    n_requests: int = 2048,
    qps_low: float = 0.01,
    qps_start: Optional[float] = None,
    rel_tol: float = 0.05,
    max_qps: float = 1e4,
    jobs: int = 1,
    early_abort: bool = True,
) -> CapacityResult:
    """Highest Poisson load (queries/s) whose probe meets the SLO.

    ``qps_low`` must pass. The search then doubles from ``qps_start``
    (default ``2 * qps_low``) until a probe fails and bisects
    geometrically until ``(hi - lo) / hi <= rel_tol``. With ``jobs > 1``
    doubling probes run in parallel; the recorded probes and the result do
    not depend on ``jobs``.
    """
    probes: list[ProbeResult] = []

    def probe(q: float) -> ProbeResult:
        res = run_probe(config, params, workload, slo_ms, q, seed, n_requests, early_abort)
        probes.append(res)
        return res

    if not probe(qps_low).passed:
        raise InfeasibleSLO(f"even {qps_low} qps misses the {slo_ms:.3f} ms SLO")
    lo = qps_low
    q = qps_start if qps_start is not None else 2 * qps_low
    hi = None
    while hi is None:
        if q > max_qps:
            warnings.warn(f"capacity search reached max_qps={max_qps} without a failing probe")
            break
        if jobs > 1:
            ladder = [q * 2 ** k for k in range(jobs)]
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_probe_star, [
                    (config, params, workload, slo_ms, x, seed, n_requests, early_abort)
                    for x in ladder]))
            for res in results:
                probes.append(res)
                if not res.passed:
                    hi = res.qps
                    break
                lo = max(lo, res.qps)
            q = ladder[-1] * 2
        else:
            res = probe(q)
            if res.passed:
                lo = max(lo, q)
                q *= 2
            else:
                hi = q
    if hi is not None:
        while (hi - lo) / hi > rel_tol:
            mid = math.sqrt(lo * hi)
            if probe(mid).passed:
                lo = mid
            else:
                hi = mid
    passing = [p.qps for p in probes if p.passed]
    failing = [p.qps for p in probes if not p.passed]
    notes = []
    if failing and passing and max(passing) > min(failing):
        notes.append(
            f"non-monotone probes: {max(passing):.4g} qps passed above a failure at {min(failing):.4g} qps"
        )
        warnings.warn(notes[-1])
    return CapacityResult(max(passing), slo_ms, probes, notes)
