"""Command-line front end: ``sim simulate|capacity|sweep|calibrate``.

Exit codes: 0 ok, 1 SLO infeasible, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Optional, Sequence

from servesim.core import ReplicaConfig, SchedulerKind, us_to_ms
from servesim.costmodel import (
    Anchor,
    CalibrationError,
    CostModelParams,
    calibrate,
    chunked_prefill_time,
)
from servesim.engine import SimReport, simulate
from servesim.io import write_csv, write_json, write_jsonl
from servesim.kvcache import OutOfKvBlocks
from servesim.metrics import (
    PROBE_COLUMNS,
    capacity_search,
    latency_report,
    meets_slo,
    resolve_slo,
)
from servesim.presets import ModelPreset, load_preset, preset_from_dict
from servesim.sched import InfeasibleSLO, compute_token_budget
from servesim.workload import LengthDistribution, WorkloadSpec, dataset, load_trace

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2

SWEEP_KNOBS = ("token_budget", "qps", "max_batch_size", "slo", "chunk_size")
_KNOB_ALIASES = {"tau": "token_budget"}


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


# ------------------------------------------------------------------- schema


def _check_keys(d: dict, allowed: Sequence[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(where, "expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(where, f"unknown field(s) {unknown}; allowed: {sorted(allowed)}")


def _num(d: dict, key: str, where: str, kind=float, default=None, required=False, minimum=None):
    if key not in d:
        if required:
            raise ConfigError(f"{where}.{key}", "is required")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and int(v) != v):
        raise ConfigError(f"{where}.{key}", f"expected {'an integer' if kind is int else 'a number'}, got {v!r}")
    v = kind(v)
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}.{key}", f"must be >= {minimum}")
    return v


def _dist(d, where: str) -> LengthDistribution:
    _check_keys(d, ("median", "p90"), where)
    try:
        return LengthDistribution(_num(d, "median", where, required=True),
                                  _num(d, "p90", where, required=True))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(where, str(exc)) from None


@dataclass
class WorkloadConfig:
    seed: int
    dataset: Optional[str] = None
    prompt: Optional[dict] = None
    output: Optional[dict] = None
    max_total: Optional[int] = None
    trace: Optional[str] = None
    qps: Optional[float] = None
    n_requests: int = 512

    def spec(self) -> WorkloadSpec:
        if self.dataset is not None:
            return WorkloadSpec(dataset=self.dataset)
        return WorkloadSpec(prompt=_dist(self.prompt, "workload.prompt"),
                            output=_dist(self.output, "workload.output"),
                            max_total=self.max_total)

    @property
    def length_cap(self) -> Optional[int]:
        if self.dataset is not None:
            return dataset(self.dataset).max_total
        return self.max_total

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass
class CapacityConfig:
    schedulers: list = field(default_factory=lambda: [k.value for k in SchedulerKind])
    slo_modes: list = field(default_factory=lambda: ["strict", "relaxed"])
    n_requests: int = 2048
    qps_low: float = 0.01
    qps_start: Optional[float] = None
    rel_tol: float = 0.05

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass
class SweepConfig:
    knob: Optional[str] = None
    values: list = field(default_factory=list)
    measure: str = "simulate"
    prompt_tokens: int = 4096

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass
class ExperimentConfig:
    model: Any  # preset name or inline preset document
    workload: WorkloadConfig
    replica: dict = field(default_factory=dict)
    slo: Any = "strict"
    capacity: CapacityConfig = field(default_factory=CapacityConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: dict = field(default_factory=dict)

    # -- resolution

    def preset(self) -> ModelPreset:
        try:
            if isinstance(self.model, str):
                return load_preset(self.model)
            return preset_from_dict(self.model)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError("model", str(exc).strip("'\"")) from None

    def slo_ms(self, mode=None) -> float:
        p = self.preset()
        try:
            return resolve_slo(self.slo if mode is None else mode, p.params, p.tp_degree)
        except ValueError as exc:
            raise ConfigError("slo", str(exc)) from None

    def replica_config(self, scheduler=None, slo_mode=None, **overrides) -> ReplicaConfig:
        """ReplicaConfig from preset layout, config overrides and the SLO mode.

        ``token_budget`` may be an integer, ``"strict"``/``"relaxed"`` (the
        preset's budget for that mode) or ``"auto"`` (largest budget meeting
        the SLO); when absent it follows the SLO mode.
        """
        p = self.preset()
        mode = self.slo if slo_mode is None else slo_mode
        d = {k: v for k, v in p.replica.items() if k in _REPLICA_FIELDS}
        cap = self.workload.length_cap
        if cap is not None:
            d["max_num_batched_tokens"] = cap
        d.update(self.replica)
        d.update(overrides)
        if scheduler is not None:
            d["scheduler"] = scheduler
        tau = d.get("token_budget", mode if mode in ("strict", "relaxed") else "auto")
        if isinstance(tau, str):
            if tau in ("strict", "relaxed"):
                if tau not in p.token_budget:
                    raise ConfigError("replica.token_budget", f"preset has no {tau!r} budget")
                tau = int(p.token_budget[tau])
            elif tau == "auto":
                tau = compute_token_budget(
                    self.slo_ms(mode), p.params, int(d.get("pp_degree", 1)),
                    tp_degree=int(d.get("tp_degree", 1)),
                    chunk_align=int(d.get("chunk_align", 32)),
                    tbt_factor=d.get("pipeline_tbt_factor"),
                )
            else:
                raise ConfigError("replica.token_budget", f"expected an integer, 'strict', 'relaxed' or 'auto', got {tau!r}")
        d["token_budget"] = tau
        try:
            return ReplicaConfig(**d)
        except (ValueError, TypeError) as exc:
            raise ConfigError("replica" + (".scheduler" if "scheduler" in str(exc) else ""), str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "replica": dict(self.replica),
            "workload": self.workload.to_dict(),
            "slo": self.slo,
            "capacity": self.capacity.to_dict(),
            "sweep": self.sweep.to_dict(),
            "output": dict(self.output),
        }


_REPLICA_FIELDS = tuple(f.name for f in fields(ReplicaConfig))


def parse_config(doc: dict, seed: Optional[int] = None, base_dir: str = ".") -> ExperimentConfig:
    """Validate a config document; ``seed`` overrides ``workload.seed``."""
    _check_keys(doc, ("model", "replica", "workload", "slo", "capacity", "sweep", "output", "description"), "")
    if "model" not in doc:
        raise ConfigError("model", "is required")
    model = doc["model"]
    if not isinstance(model, (str, dict)):
        raise ConfigError("model", "expected a preset name or an inline preset object")

    replica = doc.get("replica", {})
    _check_keys(replica, _REPLICA_FIELDS, "replica")
    if "scheduler" in replica:
        try:
            SchedulerKind.parse(replica["scheduler"])
        except ValueError as exc:
            raise ConfigError("replica.scheduler", str(exc)) from None

    w = doc.get("workload")
    if w is None:
        raise ConfigError("workload", "is required")
    _check_keys(w, [f.name for f in fields(WorkloadConfig)], "workload")
    wseed = seed if seed is not None else w.get("seed")
    if wseed is None:
        raise ConfigError("workload.seed", "is required (no wall-clock entropy); set it or pass --seed")
    if isinstance(wseed, bool) or not isinstance(wseed, int) or not 0 <= wseed < 2 ** 64:
        raise ConfigError("workload.seed", f"expected an unsigned 64-bit integer, got {wseed!r}")
    sources = [k for k in ("dataset", "trace", "prompt") if k in w]
    if "dataset" in w and "prompt" in w:
        raise ConfigError("workload", "give either 'dataset' or 'prompt'/'output', not both")
    if not sources:
        raise ConfigError("workload", "needs 'dataset', 'trace' or 'prompt'/'output'")
    if "dataset" in w:
        try:
            dataset(w["dataset"])
        except KeyError as exc:
            raise ConfigError("workload.dataset", str(exc).strip("'\"")) from None
    if "prompt" in w:
        if "output" not in w:
            raise ConfigError("workload.output", "is required with 'prompt'")
        _dist(w["prompt"], "workload.prompt")
        _dist(w["output"], "workload.output")
    trace = w.get("trace")
    if trace is not None and not os.path.isabs(trace):
        trace = os.path.normpath(os.path.join(base_dir, trace))
    workload = WorkloadConfig(
        seed=wseed,
        dataset=w.get("dataset"),
        prompt=w.get("prompt"),
        output=w.get("output"),
        max_total=_num(w, "max_total", "workload", int, minimum=2),
        trace=trace,
        qps=_num(w, "qps", "workload", minimum=0.0),
        n_requests=_num(w, "n_requests", "workload", int, default=512, minimum=1),
    )
    if workload.qps is not None and workload.qps <= 0:
        raise ConfigError("workload.qps", "must be positive")

    slo = doc.get("slo", "strict")
    if not (slo in ("strict", "relaxed") or (isinstance(slo, (int, float)) and not isinstance(slo, bool) and slo > 0)):
        raise ConfigError("slo", f"expected 'strict', 'relaxed' or a positive number of ms, got {slo!r}")

    c = doc.get("capacity", {})
    _check_keys(c, [f.name for f in fields(CapacityConfig)], "capacity")
    capacity = CapacityConfig()
    if "schedulers" in c:
        for i, s in enumerate(c["schedulers"]):
            try:
                SchedulerKind.parse(s)
            except ValueError as exc:
                raise ConfigError(f"capacity.schedulers[{i}]", str(exc)) from None
        capacity.schedulers = list(c["schedulers"])
    if "slo_modes" in c:
        for i, m in enumerate(c["slo_modes"]):
            if not (m in ("strict", "relaxed") or (isinstance(m, (int, float)) and not isinstance(m, bool))):
                raise ConfigError(f"capacity.slo_modes[{i}]", f"expected 'strict', 'relaxed' or ms, got {m!r}")
        capacity.slo_modes = list(c["slo_modes"])
    capacity.n_requests = _num(c, "n_requests", "capacity", int, default=2048, minimum=1)
    capacity.qps_low = _num(c, "qps_low", "capacity", default=0.01, minimum=1e-9)
    capacity.qps_start = _num(c, "qps_start", "capacity", default=None, minimum=1e-9)
    capacity.rel_tol = _num(c, "rel_tol", "capacity", default=0.05, minimum=1e-6)

    s = doc.get("sweep", {})
    _check_keys(s, [f.name for f in fields(SweepConfig)], "sweep")
    sweep = SweepConfig(
        knob=s.get("knob"),
        values=list(s.get("values", [])),
        measure=s.get("measure", "simulate"),
        prompt_tokens=_num(s, "prompt_tokens", "sweep", int, default=4096, minimum=1),
    )
    if sweep.measure not in ("simulate", "capacity"):
        raise ConfigError("sweep.measure", f"expected 'simulate' or 'capacity', got {sweep.measure!r}")

    out = doc.get("output", {})
    _check_keys(out, ("dir",), "output")

    cfg = ExperimentConfig(model=model, workload=workload, replica=dict(replica), slo=slo,
                           capacity=capacity, sweep=sweep, output=dict(out))
    cfg.preset()
    return cfg


def load_config(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(path, exc.strerror or str(exc)) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return parse_config(doc, seed, os.path.dirname(os.path.abspath(path)))


# ------------------------------------------------------------------ helpers


def _r(x, nd=6):
    if x is None:
        return None
    if isinstance(x, float):
        if math.isnan(x) or math.isinf(x):
            return None
        return round(x, nd)
    return x


def build_trace(cfg: ExperimentConfig, qps: Optional[float] = None):
    w = cfg.workload
    if w.trace is not None:
        try:
            return load_trace(w.trace)
        except OSError as exc:
            raise ConfigError("workload.trace", f"{w.trace}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise ConfigError("workload.trace", f"{w.trace}: {exc}") from None
    q = qps if qps is not None else w.qps
    if q is None:
        raise ConfigError("workload.qps", "is required to generate a trace")
    return w.spec().trace(q, w.n_requests, w.seed)


def report_document(cfg: ExperimentConfig, replica: ReplicaConfig, rep: SimReport, slo_ms: float) -> dict:
    lat = latency_report(rep)
    by_class: dict = {}
    for b in rep.bubbles:
        by_class[b.cls.value] = by_class.get(b.cls.value, 0) + b.duration_us
    util = [u for _, u in rep.kv_utilization]
    p = cfg.preset()
    return {
        "model": p.name,
        "label": p.label,
        "replica": {f.name: (getattr(replica, f.name).value if f.name == "scheduler" else getattr(replica, f.name))
                    for f in fields(ReplicaConfig)},
        "workload": cfg.workload.to_dict(),
        "slo_ms": _r(slo_ms),
        "meets_slo": meets_slo(lat, slo_ms),
        "latency": {k: _r(v) for k, v in lat.summary().items()},
        "bubbles": {
            "count": len(rep.bubbles),
            "fraction": _r(rep.bubble_fraction),
            "ms_by_class": {k: _r(us_to_ms(v)) for k, v in sorted(by_class.items())},
        },
        "kv_utilization": {"peak": _r(max(util, default=0.0)),
                           "mean": _r(sum(util) / len(util) if util else 0.0)},
        "stage_busy_ms": [_r(us_to_ms(b)) for b in rep.stage_busy_us],
        "n_batches": len(rep.batches),
        "completed": rep.completed,
    }


REQUEST_COLUMNS = ["id", "arrival_ms", "prompt_tokens", "output_tokens", "scheduled_ms",
                   "first_token_ms", "finish_ms", "ttft_ms", "sched_delay_ms", "tbt_max_ms"]


def request_rows(rep: SimReport):
    def ms(us):
        return "" if us is None else f"{us_to_ms(us):.3f}"

    for r in rep.requests:
        gaps = r.tbt_samples_us()
        yield {
            "id": r.id,
            "arrival_ms": ms(r.arrival_us),
            "prompt_tokens": r.prompt_tokens,
            "output_tokens": r.output_tokens,
            "scheduled_ms": ms(r.scheduled_us),
            "first_token_ms": ms(r.first_token_us),
            "finish_ms": ms(r.token_emit_us[-1] if r.token_emit_us else None),
            "ttft_ms": ms(r.ttft_us),
            "sched_delay_ms": ms(None if r.scheduled_us is None else r.scheduled_us - r.arrival_us),
            "tbt_max_ms": ms(max(gaps) if gaps else None),
        }


def _out_dir(cfg: ExperimentConfig, out: Optional[str]) -> str:
    return out or cfg.output.get("dir") or "out"


# ----------------------------------------------------------------- commands


def cmd_simulate(cfg: ExperimentConfig, out: str, jobs: int = 1) -> int:
    replica = cfg.replica_config()
    slo_ms = cfg.slo_ms()
    trace = build_trace(cfg)
    try:
        rep = simulate(replica, cfg.preset().params, trace, record_events=True)
    except OutOfKvBlocks as exc:
        raise ConfigError("replica.kv_blocks", str(exc)) from None
    doc = report_document(cfg, replica, rep, slo_ms)
    write_json(os.path.join(out, "report.json"), doc)
    write_jsonl(os.path.join(out, "events.jsonl"), rep.event_dicts())
    write_csv(os.path.join(out, "requests.csv"), REQUEST_COLUMNS, request_rows(rep))
    write_json(os.path.join(out, "config.resolved.json"), cfg.to_dict())
    lat = doc["latency"]
    print(f"tbt_p99={lat['tbt_p99']:.3f}ms ttft_median={_fmt(lat['ttft_median'])}ms "
          f"bubble_fraction={doc['bubbles']['fraction']:.4f} throughput={lat['throughput']:.1f}tok/s "
          f"meets_slo={doc['meets_slo']}")
    return EXIT_OK


def _fmt(x) -> str:
    return "nan" if x is None else f"{x:.3f}"


def _slo_label(mode) -> str:
    return mode if isinstance(mode, str) else f"{float(mode):g}ms"


def _capacity_task(args):
    cfg, scheduler, mode = args
    try:
        replica = cfg.replica_config(scheduler=scheduler, slo_mode=mode)
        slo_ms = cfg.slo_ms(mode)
        c = cfg.capacity
        res = capacity_search(replica, cfg.preset().params, cfg.workload.spec(), slo_ms,
                              cfg.workload.seed, n_requests=c.n_requests, qps_low=c.qps_low,
                              qps_start=c.qps_start, rel_tol=c.rel_tol)
        return scheduler, mode, slo_ms, res.qps, False, res.probes
    except InfeasibleSLO:
        return scheduler, mode, cfg.slo_ms(mode), 0.0, True, []


CAPACITY_COLUMNS = ["scheduler", "slo", "qps", "infeasible"]


def cmd_capacity(cfg: ExperimentConfig, out: str, jobs: int = 1) -> int:
    if cfg.workload.trace is not None:
        raise ConfigError("workload.trace", "capacity search generates its own traces; use a dataset or length distributions")
    tasks = [(cfg, s, m) for s in cfg.capacity.schedulers for m in cfg.capacity.slo_modes]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_capacity_task, tasks))
    else:
        results = [_capacity_task(t) for t in tasks]
    rows, probe_rows = [], []
    for scheduler, mode, slo_ms, qps, infeasible, probes in results:
        rows.append({"scheduler": scheduler, "slo": _slo_label(mode),
                     "qps": f"{qps:.6g}", "infeasible": int(infeasible)})
        for p in probes:
            probe_rows.append({"scheduler": scheduler, "slo": _slo_label(mode), **p.row()})
        print(f"{scheduler:>16} {_slo_label(mode):>8} slo={slo_ms:.1f}ms "
              + ("infeasible" if infeasible else f"capacity={qps:.4g} qps"))
    write_csv(os.path.join(out, "capacity.csv"), CAPACITY_COLUMNS, rows)
    write_csv(os.path.join(out, "probes.csv"), ["scheduler", "slo", *PROBE_COLUMNS], probe_rows)
    return EXIT_INFEASIBLE if any(r[4] for r in results) else EXIT_OK


SWEEP_COLUMNS = ["knob", "value", "metric", "result"]


def _sweep_point(args):
    cfg, knob, value = args
    measure = cfg.sweep.measure
    overrides, slo_mode, qps = {}, None, None
    if knob == "token_budget":
        overrides["token_budget"] = int(value)
    elif knob == "max_batch_size":
        overrides["max_batch_size"] = int(value)
    elif knob == "qps":
        qps = float(value)
    elif knob == "slo":
        slo_mode = value
    if knob == "chunk_size":
        p = cfg.preset()
        P = cfg.sweep.prompt_tokens
        base = chunked_prefill_time(P, P, p.params, p.tp_degree)
        t = chunked_prefill_time(P, int(value), p.params, p.tp_degree)
        return [("prefill_ms", t), ("prefill_overhead", t / base)]
    replica = cfg.replica_config(slo_mode=slo_mode, **overrides)
    slo_ms = cfg.slo_ms(slo_mode)
    if measure == "capacity":
        c = cfg.capacity
        try:
            res = capacity_search(replica, cfg.preset().params, cfg.workload.spec(), slo_ms,
                                  cfg.workload.seed, n_requests=c.n_requests, qps_low=c.qps_low,
                                  qps_start=c.qps_start, rel_tol=c.rel_tol)
            return [("capacity_qps", res.qps), ("infeasible", 0)]
        except InfeasibleSLO:
            return [("capacity_qps", 0.0), ("infeasible", 1)]
    trace = build_trace(cfg, qps)
    rep = simulate(replica, cfg.preset().params, trace, record_events=False)
    lat = latency_report(rep)
    return [("tbt_p99", lat.tbt_p99), ("tbt_median", lat.tbt_median), ("ttft_median", lat.ttft_median),
            ("sched_delay_median", lat.sched_delay_median), ("throughput", lat.throughput),
            ("bubble_fraction", lat.bubble_fraction), ("meets_slo", int(meets_slo(lat, slo_ms)))]


def cmd_sweep(cfg: ExperimentConfig, out: str, jobs: int = 1) -> int:
    knob = _KNOB_ALIASES.get(cfg.sweep.knob, cfg.sweep.knob)
    if knob not in SWEEP_KNOBS:
        raise UsageError(f"unknown sweep knob {cfg.sweep.knob!r}; expected one of {', '.join(SWEEP_KNOBS)}")
    if not cfg.sweep.values:
        raise UsageError("sweep needs at least one value")
    tasks = [(cfg, knob, v) for v in cfg.sweep.values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = []
    for v, res in zip(cfg.sweep.values, results):
        for metric, val in res:
            rows.append({"knob": knob, "value": v, "metric": metric,
                         "result": "" if val is None else (f"{val:.6g}" if isinstance(val, float) else val)})
    write_csv(os.path.join(out, "sweep.csv"), SWEEP_COLUMNS, rows)
    print(f"sweep {knob}: {len(cfg.sweep.values)} values, {len(rows)} rows -> {os.path.join(out, 'sweep.csv')}")
    return EXIT_OK


def cmd_calibrate(path: str, out: str) -> int:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(path, exc.strerror or str(exc)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    _check_keys(doc, ("anchors", "base", "name", "description"), "")
    if "anchors" not in doc or not isinstance(doc["anchors"], list):
        raise ConfigError("anchors", "expected a list of anchors")
    anchors = []
    for i, a in enumerate(doc["anchors"]):
        try:
            anchors.append(Anchor.from_dict(a))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"anchors[{i}]", str(exc)) from None
    base = doc.get("base")
    try:
        base_params = None
        if isinstance(base, str):
            base_params = load_preset(base).params
        elif isinstance(base, dict):
            base_params = CostModelParams.from_dict(base)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("base", str(exc).strip("'\"")) from None
    try:
        res = calibrate(anchors, base_params, doc.get("name"))
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        if exc.unconstrained:
            print(f"unconstrained: {', '.join(exc.unconstrained)}", file=sys.stderr)
        return EXIT_CONFIG
    for a, r in zip(anchors, res.residuals):
        print(f"{a.label or '-':>24} observed={a.observed_ms:.3f}ms residual={r:+.4%}")
    if res.unconstrained:
        print(f"unconstrained (kept base values): {', '.join(res.unconstrained)}")
    if res.max_rel_error > 0.15:
        print(f"warning: max relative error {res.max_rel_error:.2%} exceeds 15%", file=sys.stderr)
    write_json(os.path.join(out, "params.json"), {
        "params": res.params.to_dict(),
        "residuals": [_r(r) for r in res.residuals],
        "unconstrained": res.unconstrained,
    })
    return EXIT_OK


# --------------------------------------------------------------------- main


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sim", description="LLM inference serving simulator")
    ap.add_argument("command", choices=["simulate", "capacity", "sweep", "calibrate"])
    ap.add_argument("--config", required=True, help="experiment config (JSON); anchors file for calibrate")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides workload.seed")
    ap.add_argument("--jobs", type=int, default=1, help="parallel simulations")
    ap.add_argument("--knob", default=None, help="sweep: knob to vary")
    ap.add_argument("--values", default=None, help="sweep: comma-separated values")
    return ap


def _parse_value(s: str):
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "calibrate":
            return cmd_calibrate(args.config, args.out or "out")
        cfg = load_config(args.config, args.seed)
        if args.knob is not None:
            cfg.sweep.knob = args.knob
        if args.values is not None:
            cfg.sweep.values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
        out = _out_dir(cfg, args.out)
        cmd = {"simulate": cmd_simulate, "capacity": cmd_capacity, "sweep": cmd_sweep}[args.command]
        return cmd(cfg, out, max(1, args.jobs))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleSLO as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
