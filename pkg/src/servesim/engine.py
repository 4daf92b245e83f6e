"""Discrete-event replica simulation with an in-order pipeline.

The scheduler is consulted whenever the first pipeline stage is free and
fewer than ``pp_degree`` micro-batches are in flight. A micro-batch holds a
stage for ``iteration_time / pp_degree`` and hops to the next stage after
``pp_send_ms``. Tokens are emitted when a micro-batch leaves the last stage.

Event-log order is canonical: ``(time, kind rank, stage, micro-batch,
request)``, so two simulations agree byte-for-byte whenever their
schedules agree.
"""

from __future__ import annotations

import enum
import heapq
import time as _wall
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from servesim.core import (
    Batch,
    BatchEntry,
    EntryKind,
    ReplicaConfig,
    Request,
    RequestState,
    apply_iteration_result,
    ms_to_us,
    us_to_ms,
)
from servesim.costmodel import CostModelParams, decode_only_time, iteration_time
from servesim.kvcache import KvCache, OutOfKvBlocks
from servesim.sched import SchedulerState, next_batch


class EventKind(enum.Enum):
    STAGE_END = "StageEnd"
    TOKEN_EMIT = "TokenEmit"
    REQUEST_FINISH = "RequestFinish"
    ARRIVAL = "Arrival"
    BUBBLE = "Bubble"
    BATCH_START = "BatchStart"
    STAGE_START = "StageStart"


_RANK = {k: i for i, k in enumerate(EventKind)}


class BubbleClass(enum.Enum):
    PB1 = "PB1"  # prefill token counts differ between consecutive micro-batches
    PB2 = "PB2"  # prefill-carrying micro-batch next to a decode-only one
    PB3 = "PB3"  # decode-only micro-batches with different attention cost


@dataclass(frozen=True, slots=True)
class SimEvent:
    time_us: int
    kind: EventKind
    stage: int = -1
    mb: int = -1
    request_id: int = -1
    detail: Optional[tuple] = None

    def sort_key(self) -> tuple:
        return (self.time_us, _RANK[self.kind], self.stage, self.mb, self.request_id)

    @property
    def time_ms(self) -> float:
        return us_to_ms(self.time_us)

    def to_dict(self) -> dict:
        d = {"t_us": self.time_us, "kind": self.kind.value}
        if self.stage >= 0:
            d["stage"] = self.stage
        if self.mb >= 0:
            d["mb"] = self.mb
        if self.request_id >= 0:
            d["request"] = self.request_id
        if self.detail is not None:
            d["detail"] = _detail_to_json(self.kind, self.detail)
        return d


def _detail_to_json(kind: EventKind, detail: tuple):
    if kind is EventKind.BATCH_START:
        return [[rid, k, c, p] for rid, k, c, p in detail]
    if kind is EventKind.BUBBLE:
        cls, end_us = detail
        return {"class": cls, "end_us": end_us}
    return list(detail)


@dataclass(frozen=True, slots=True)
class BubbleRecord:
    stage: int
    start_us: int
    end_us: int
    cls: BubbleClass
    prev_mb: int = -1
    next_mb: int = -1

    def __post_init__(self) -> None:
        if self.end_us <= self.start_us:
            raise ValueError("bubble must have positive duration")

    @property
    def duration_us(self) -> int:
        return self.end_us - self.start_us

    @property
    def start(self) -> float:
        return us_to_ms(self.start_us)

    @property
    def end(self) -> float:
        return us_to_ms(self.end_us)


@dataclass(slots=True)
class MicroBatch:
    index: int
    batch: Batch
    stage_us: int
    submit_us: int
    stage_start: list[int] = field(default_factory=list)
    stage_end: list[int] = field(default_factory=list)
    iter_ms: float = 0.0

    @property
    def done_us(self) -> int:
        return self.stage_end[-1]


def classify_bubble(prev: Batch, nxt: Batch, start_us: int = 0, end_us: int = 1, stage: int = 0) -> BubbleRecord:
    """Attribute an idle interval between two micro-batches on one stage."""
    if prev.has_prefill != nxt.has_prefill:
        cls = BubbleClass.PB2
    elif prev.has_prefill:
        cls = BubbleClass.PB1
    else:
        cls = BubbleClass.PB3
    return BubbleRecord(stage, start_us, end_us, cls)


def _overlaps(a: int, b: int, windows: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Maximal sub-intervals of [a, b) covered by the union of ``windows``."""
    pieces = sorted((max(a, s), min(b, e)) for s, e in windows if s < b and e > a)
    merged: list[tuple[int, int]] = []
    for s, e in pieces:
        if merged and s <= merged[-1][1]:
            if e > merged[-1][1]:
                merged[-1] = (merged[-1][0], e)
        else:
            merged.append((s, e))
    return merged


class Pipeline:
    """In-order pipeline of ``pp_degree`` stages.

    Stage timings of a micro-batch are fixed at submission: in an in-order
    pipeline, later micro-batches cannot delay earlier ones.
    """

    def __init__(self, pp_degree: int, send_us: int = 0):
        if pp_degree < 1:
            raise ValueError("pp_degree must be >= 1")
        self.pp = pp_degree
        self.send_us = send_us
        self.stage_free = [0] * pp_degree
        self.last_on_stage: list[Optional[MicroBatch]] = [None] * pp_degree
        self.busy_us = [0] * pp_degree
        self._windows: list[tuple[int, int]] = []
        self.bubbles: list[BubbleRecord] = []

    def submit(self, mb: MicroBatch) -> list[BubbleRecord]:
        t = mb.submit_us
        new_bubbles = []
        floor = min(self.stage_free)
        self._windows = [w for w in self._windows if w[1] > floor]
        for s in range(self.pp):
            ready = t if s == 0 else mb.stage_end[s - 1] + self.send_us
            start = max(ready, self.stage_free[s])
            prev = self.last_on_stage[s]
            if prev is not None and start > self.stage_free[s]:
                # the incoming micro-batch counts as in flight from submission
                for a, b in _overlaps(self.stage_free[s], start, self._windows + [(t, start)]):
                    rec = classify_bubble(prev.batch, mb.batch, a, b, s)
                    rec = BubbleRecord(s, a, b, rec.cls, prev.index, mb.index)
                    new_bubbles.append(rec)
            end = start + mb.stage_us
            mb.stage_start.append(start)
            mb.stage_end.append(end)
            self.stage_free[s] = end
            self.last_on_stage[s] = mb
            self.busy_us[s] += mb.stage_us
        self._windows.append((t, mb.done_us))
        self.bubbles.extend(new_bubbles)
        return new_bubbles


def advance_pipeline(
    pp_degree: int,
    micro_batches: Sequence[tuple[Batch, int, Optional[int]]],
    send_us: int = 0,
) -> tuple[list[MicroBatch], list[BubbleRecord]]:
    """Push a fixed sequence of micro-batches through a pipeline.

    Each item is ``(batch, stage_us, depends_on)``; a micro-batch is
    submitted once the first stage is free, fewer than ``pp_degree``
    micro-batches are in flight, and micro-batch ``depends_on`` (if any) has
    left the last stage.
    """
    pipe = Pipeline(pp_degree, send_us)
    done: list[MicroBatch] = []
    for i, (batch, stage_us, dep) in enumerate(micro_batches):
        t = pipe.stage_free[0]
        if dep is not None:
            t = max(t, done[dep].done_us)
        in_flight = sorted(m.done_us for m in done if m.done_us > t)
        if len(in_flight) >= pp_degree:
            t = max(t, in_flight[len(in_flight) - pp_degree])
        mb = MicroBatch(i, batch, stage_us, t)
        pipe.submit(mb)
        done.append(mb)
    return done, pipe.bubbles


# ----------------------------------------------------------------- simulation


class SimulationTimeout(RuntimeError):
    pass


@dataclass(slots=True)
class BatchRecord:
    index: int
    start_us: int
    done_us: int
    iter_ms: float
    total_tokens: int
    num_decodes: int
    prefill_tokens: int
    entries: Optional[tuple] = None


@dataclass
class SimReport:
    config: ReplicaConfig
    params: CostModelParams
    requests: list[Request]
    events: list[SimEvent]
    batches: list[BatchRecord]
    bubbles: list[BubbleRecord]
    kv_utilization: list[tuple[int, float]]
    stage_busy_us: list[int]
    start_us: int
    end_us: int
    completed: bool = True
    aborted: bool = False

    @property
    def makespan_us(self) -> int:
        return max(0, self.end_us - self.start_us)

    @property
    def bubble_us(self) -> int:
        return sum(b.duration_us for b in self.bubbles)

    @property
    def bubble_fraction(self) -> float:
        span = self.makespan_us * self.config.pp_degree
        return self.bubble_us / span if span else 0.0

    def event_dicts(self) -> list[dict]:
        return [e.to_dict() for e in self.events]


class Monitor:
    """Hook for early termination; the default never stops the run."""

    def on_scheduled(self, request: Request, delay_us: int) -> None:
        pass

    def on_token(self, request: Request, gap_us: int) -> None:
        pass

    def should_stop(self, now_us: int, n_scheduled: int) -> bool:
        return False


_COMPLETE, _ARRIVAL, _WAKE = 0, 1, 2


def simulate(
    config: ReplicaConfig,
    params: CostModelParams,
    trace: Sequence[Request],
    *,
    record_events: bool = True,
    monitor: Optional[Monitor] = None,
    horizon_ms: Optional[float] = None,
    wall_clock_limit_s: Optional[float] = None,
    fast_forward: bool = True,
) -> SimReport:
    """Run ``trace`` through one replica until every request finishes.

    ``trace`` is not mutated; each request is copied with a fresh lifecycle.

    With ``fast_forward``, stretches where the queue is empty and every
    running request is decoding (pp_degree 1, no horizon) are stepped in a
    tight loop instead of through the event heap. Results are identical;
    only the monitor may see token gaps slightly earlier.
    """
    reqs = [r.fresh_copy() for r in trace]
    for a, b in zip(reqs, reqs[1:]):
        if b.arrival_us < a.arrival_us:
            raise ValueError("trace must be sorted by arrival time")
    by_id = {r.id: r for r in reqs}
    if len(by_id) != len(reqs):
        raise ValueError("request ids must be unique")

    pp = config.pp_degree
    tp = config.tp_degree
    kv = KvCache(config.kv_blocks, config.kv_block_size, config.watermark_blocks)
    state = SchedulerState(token_budget=config.token_budget)
    pipe = Pipeline(pp, ms_to_us(params.pp_send_ms))
    monitor = monitor or Monitor()
    horizon_us = None if horizon_ms is None else ms_to_us(horizon_ms)
    deadline = None if wall_clock_limit_s is None else _wall.monotonic() + wall_clock_limit_s

    events: list[SimEvent] = []
    batches: list[BatchRecord] = []
    kv_util: list[tuple[int, float]] = []
    in_flight: dict[int, MicroBatch] = {}
    heap: list[tuple[int, int, int]] = []
    for r in reqs:
        heap.append((r.arrival_us, _ARRIVAL, r.id))
    heapq.heapify(heap)
    n_finished = 0
    n_scheduled = 0
    mb_count = 0
    now = reqs[0].arrival_us if reqs else 0
    start_us = now
    end_us = now
    aborted = False
    completed = True
    log = events.append

    def form_batch(t: int) -> None:
        nonlocal mb_count, n_scheduled
        if pipe.stage_free[0] > t or len(in_flight) >= pp:
            return
        batch = next_batch(state, kv, config)
        if batch.is_empty:
            return
        idx = mb_count
        mb_count += 1
        for e in batch.entries:
            try:
                kv.grow(e.request_id, e.prefix_tokens + e.chunk_tokens, t)
            except OutOfKvBlocks as exc:
                raise OutOfKvBlocks(f"at t={us_to_ms(t):.3f} ms: {exc}", t) from None
            r = by_id[e.request_id]
            state.in_flight.add(r.id)
            if r.scheduled_us is None:
                r.scheduled_us = t
                n_scheduled += 1
                monitor.on_scheduled(r, t - r.arrival_us)
        iter_ms = iteration_time(batch, params, tp)
        stage_us = max(1, ms_to_us(iter_ms / pp))
        mb = MicroBatch(idx, batch, stage_us, t, iter_ms=iter_ms)
        new_bubbles = pipe.submit(mb)
        in_flight[idx] = mb
        heapq.heappush(heap, (mb.done_us, _COMPLETE, idx))
        heapq.heappush(heap, (mb.stage_end[0], _WAKE, idx))
        kv_util.append((t, kv.utilization))
        batches.append(BatchRecord(
            idx, t, mb.done_us, iter_ms, batch.total_tokens, batch.num_decodes,
            batch.prefill_tokens,
            tuple((e.request_id, e.kind.value, e.chunk_tokens, e.prefix_tokens) for e in batch.entries)
            if record_events else None,
        ))
        if record_events:
            log(SimEvent(t, EventKind.BATCH_START, -1, idx, -1, batches[-1].entries))
            for s in range(pp):
                log(SimEvent(mb.stage_start[s], EventKind.STAGE_START, s, idx))
                log(SimEvent(mb.stage_end[s], EventKind.STAGE_END, s, idx))
            for b in new_bubbles:
                log(SimEvent(b.start_us, EventKind.BUBBLE, b.stage, idx, -1, (b.cls.value, b.end_us)))

    def complete(idx: int, t: int) -> None:
        nonlocal n_finished
        mb = in_flight.pop(idx)
        for e in mb.batch.entries:
            r = by_id[e.request_id]
            before = len(r.token_emit_us)
            apply_iteration_result(r, e, t)
            state.in_flight.discard(r.id)
            if len(r.token_emit_us) > before:
                if before:
                    monitor.on_token(r, t - r.token_emit_us[-2])
                if record_events:
                    log(SimEvent(t, EventKind.TOKEN_EMIT, -1, -1, r.id))
            if r.state is RequestState.FINISHED:
                kv.release(r.id)
                n_finished += 1
                if record_events:
                    log(SimEvent(t, EventKind.REQUEST_FINISH, -1, -1, r.id))
        state.drop_finished()

    fast_forward = fast_forward and pp == 1 and horizon_us is None
    stop_requested = False

    def fast_ok(t: int) -> bool:
        if in_flight or state.wait_queue or not state.running or pipe.stage_free[0] > t:
            return False
        return all(r.state is RequestState.DECODING for r in state.running)

    def fast_decode(s: int) -> int:
        """Step decode-only iterations from ``s`` until an event is due."""
        nonlocal mb_count, n_finished, stop_requested
        running = state.running
        last_ids: list = []
        last_prefixes: list = []
        stage_us = 0
        idx = -1
        while True:
            kv_read = 0
            prefixes = []
            for r in running:
                prefix = r.prompt_tokens + r.decodes_done - 1
                prefixes.append(prefix)
                kv_read += prefix + 1
            n = len(running)
            iter_ms = decode_only_time(n, kv_read, params, tp)
            stage_us = max(1, ms_to_us(iter_ms / pp))
            e = s + stage_us
            idx = mb_count
            mb_count += 1
            for r, prefix in zip(running, prefixes):
                kv.grow(r.id, prefix + 1, s)
            kv_util.append((s, kv.utilization))
            last_ids = [r.id for r in running]
            last_prefixes = prefixes
            batches.append(BatchRecord(idx, s, e, iter_ms, n, n, 0, None))
            if record_events:
                entries = tuple((rid, "Decode", 1, pfx) for rid, pfx in zip(last_ids, prefixes))
                batches[-1].entries = entries
                log(SimEvent(s, EventKind.BATCH_START, -1, idx, -1, entries))
                log(SimEvent(s, EventKind.STAGE_START, 0, idx))
                log(SimEvent(e, EventKind.STAGE_END, 0, idx))
            finished = False
            for r in running:
                r.decodes_done += 1
                monitor.on_token(r, e - r.token_emit_us[-1])
                r.token_emit_us.append(e)
                if record_events:
                    log(SimEvent(e, EventKind.TOKEN_EMIT, -1, -1, r.id))
                if r.decodes_done == r.output_tokens:
                    r.state = RequestState.FINISHED
                    kv.release(r.id)
                    n_finished += 1
                    finished = True
                    if record_events:
                        log(SimEvent(e, EventKind.REQUEST_FINISH, -1, -1, r.id))
            pipe.busy_us[0] += stage_us
            s = e
            if finished:
                state.drop_finished()
                running = state.running
            if not running or (heap and heap[0][0] <= s):
                break
            if monitor.should_stop(s, n_scheduled):
                stop_requested = True
                break
            if deadline is not None and _wall.monotonic() > deadline:
                break
        state.n_t = len(last_ids)
        state.last_was_prefill = False
        last = Batch(tuple(BatchEntry(rid, EntryKind.DECODE, 1, pfx)
                           for rid, pfx in zip(last_ids, last_prefixes)))
        mb = MicroBatch(idx, last, stage_us, s - stage_us, [s - stage_us], [s], 0.0)
        pipe.stage_free[0] = s
        pipe.last_on_stage[0] = mb
        pipe._windows = [(s - stage_us, s)]
        if running or heap:
            heapq.heappush(heap, (s, _WAKE, -1))
        return s

    while heap:
        t = heap[0][0]
        if horizon_us is not None and t > horizon_us:
            completed = False
            break
        while heap and heap[0][0] == t:
            _, kind, key = heapq.heappop(heap)
            if kind == _COMPLETE:
                complete(key, t)
                end_us = t
            elif kind == _ARRIVAL:
                r = by_id[key]
                state.wait_queue.append(r)
                if record_events:
                    log(SimEvent(t, EventKind.ARRIVAL, -1, -1, r.id))
        if fast_forward and fast_ok(t):
            end_us = fast_decode(t)
            if stop_requested:
                aborted = True
                completed = False
                break
        else:
            form_batch(t)
        if monitor.should_stop(t, n_scheduled):
            aborted = True
            completed = False
            break
        if deadline is not None and _wall.monotonic() > deadline:
            raise SimulationTimeout(
                f"wall-clock limit of {wall_clock_limit_s} s hit at simulated t={us_to_ms(t):.1f} ms"
            )
    if completed and n_finished != len(reqs):
        completed = False

    if record_events:
        events.sort(key=SimEvent.sort_key)
    return SimReport(
        config=config,
        params=params,
        requests=reqs,
        events=events,
        batches=batches,
        bubbles=list(pipe.bubbles),
        kv_utilization=kv_util,
        stage_busy_us=list(pipe.busy_us),
        start_us=start_us,
        end_us=end_us,
        completed=completed,
        aborted=aborted,
    )
