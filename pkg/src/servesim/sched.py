"""Batching policies.

Every policy forms the next batch from the replica's queue and running set.
Requests with a micro-batch still in the pipeline are skipped: a request
never has more than one iteration in flight.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from servesim.core import (
    Batch,
    BatchEntry,
    EntryKind,
    ReplicaConfig,
    Request,
    RequestState,
    SchedulerKind,
)
from servesim.costmodel import (
    REFERENCE_CONTEXT,
    REFERENCE_DECODE_BATCH,
    CostModelParams,
    decode_batch,
    iteration_time,
)
from servesim.kvcache import KvCache


class InfeasibleSLO(ValueError):
    """No configuration meets the requested latency target."""


@dataclass
class SchedulerState:
    token_budget: int = 512
    wait_queue: deque = field(default_factory=deque)
    running: list = field(default_factory=list)
    in_flight: set = field(default_factory=set)
    n_t: int = 0
    # Kind of the last batch, used to alternate when hybrid batching is off.
    last_was_prefill: bool = False

    def available(self) -> list[Request]:
        busy = self.in_flight
        return [r for r in self.running if r.id not in busy]

    def drop_finished(self) -> list[Request]:
        done = [r for r in self.running if r.state is RequestState.FINISHED]
        if done:
            self.running = [r for r in self.running if r.state is not RequestState.FINISHED]
        return done


def get_next_chunk_size(request: Request, token_budget: int, n_t: int, chunk_align: int = 32) -> int:
    """Prefill tokens to take from ``request`` given ``n_t`` tokens already packed.

    The final chunk of a prompt is taken whole if it fits; other chunks are
    rounded down to a multiple of ``chunk_align``.
    """
    room = token_budget - n_t
    if room <= 0:
        return 0
    rem = request.prompt_tokens - request.prefill_done
    if rem <= room:
        return rem
    return (room // chunk_align) * chunk_align


def _reserve(request: Request, config: ReplicaConfig) -> int:
    return request.output_tokens if config.reserve_output else 0


def _can_admit(request: Request, kv: KvCache, config: ReplicaConfig) -> bool:
    return kv.can_allocate_request(request, _reserve(request, config))


def _admit(state: SchedulerState, kv: KvCache, config: ReplicaConfig) -> Request:
    r = state.wait_queue.popleft()
    kv.admit(r.id, r.prompt_tokens + _reserve(r, config))
    r.state = RequestState.PREFILLING
    state.running.append(r)
    return r


def request_level_next_batch(state: SchedulerState, kv: KvCache, config: ReplicaConfig) -> Batch:
    if state.running:
        entries = [BatchEntry.decode(r) for r in state.available()]
        state.n_t = len(entries)
        return Batch(tuple(entries))
    entries = []
    q = state.wait_queue
    while q and len(entries) < config.max_batch_size and _can_admit(q[0], kv, config):
        r = _admit(state, kv, config)
        entries.append(BatchEntry.prefill(r, r.prompt_tokens))
    state.n_t = sum(e.chunk_tokens for e in entries)
    return Batch(tuple(entries))


def vllm_next_batch(state: SchedulerState, kv: KvCache, config: ReplicaConfig) -> Batch:
    q = state.wait_queue
    cap = config.max_num_batched_tokens
    entries = []
    tokens = 0
    while q and len(state.running) < config.max_batch_size and _can_admit(q[0], kv, config):
        p = q[0].prompt_tokens
        if tokens + p > cap:
            # An oversized prompt runs alone, and only once nothing is running.
            if not (entries or state.running) and p > cap:
                r = _admit(state, kv, config)
                entries.append(BatchEntry.prefill(r, p))
            break
        r = _admit(state, kv, config)
        entries.append(BatchEntry.prefill(r, p))
        tokens += p
    if not entries:
        entries = [BatchEntry.decode(r) for r in state.available()
                   if r.state is RequestState.DECODING]
    state.n_t = sum(e.chunk_tokens for e in entries)
    return Batch(tuple(entries))


def orca_next_batch(state: SchedulerState, kv: KvCache, config: ReplicaConfig) -> Batch:
    entries = [BatchEntry.decode(r) for r in state.available()
               if r.state is RequestState.DECODING]
    q = state.wait_queue
    cap = config.orca_max_batch_size
    while q and len(state.running) < cap and _can_admit(q[0], kv, config):
        r = _admit(state, kv, config)
        entries.append(BatchEntry.prefill(r, r.prompt_tokens))
    state.n_t = sum(e.chunk_tokens for e in entries)
    return Batch(tuple(entries))


def _pack_prefills(
    state: SchedulerState,
    kv: KvCache,
    config: ReplicaConfig,
    avail: list[Request],
    entries: list[BatchEntry],
    n_t: int,
) -> int:
    tau = state.token_budget
    align = config.chunk_align
    chunked = config.chunked_prefill
    for r in avail:
        if r.state is RequestState.PREFILLING:
            c = get_next_chunk_size(r, tau, n_t, align) if chunked else r.prefill_remaining
            if c > 0:
                entries.append(BatchEntry.prefill(r, c))
                n_t += c
    q = state.wait_queue
    while (q and n_t < tau and len(state.running) < config.max_batch_size
           and _can_admit(q[0], kv, config)):
        head = q[0]
        c = get_next_chunk_size(head, tau, n_t, align) if chunked else head.prompt_tokens
        if c <= 0:
            break
        r = _admit(state, kv, config)
        entries.append(BatchEntry.prefill(r, c))
        n_t += c
    return n_t


def sarathi_next_batch(state: SchedulerState, kv: KvCache, config: ReplicaConfig) -> Batch:
    """Stall-free batching: all runnable decodes first, then prefill chunks within the budget.

    With ``config.hybrid_batching`` off, decode-only and prefill-only batches
    alternate while both kinds of work are pending. With
    ``config.chunked_prefill`` off, prompts are taken whole.
    """
    avail = state.available()
    decodes = [BatchEntry.decode(r) for r in avail if r.state is RequestState.DECODING]
    if config.hybrid_batching:
        entries = decodes
        n_t = _pack_prefills(state, kv, config, avail, entries, len(decodes))
    else:
        want_prefill = not decodes or not state.last_was_prefill
        entries = []
        n_t = 0
        if want_prefill:
            n_t = _pack_prefills(state, kv, config, avail, entries, 0)
        if not entries:
            entries = decodes
            n_t = len(decodes)
        state.last_was_prefill = bool(entries) and entries[0].kind is EntryKind.PREFILL_CHUNK
    state.n_t = n_t
    return Batch(tuple(entries))


_POLICIES = {
    SchedulerKind.REQUEST_LEVEL: request_level_next_batch,
    SchedulerKind.VLLM_EAGER: vllm_next_batch,
    SchedulerKind.ORCA_HYBRID: orca_next_batch,
    SchedulerKind.SARATHI_STALL_FREE: sarathi_next_batch,
}


def next_batch(state: SchedulerState, kv: KvCache, config: ReplicaConfig) -> Batch:
    return _POLICIES[config.scheduler](state, kv, config)


def compute_token_budget(
    t_max_ms: float,
    params: CostModelParams,
    pp_degree: int = 1,
    decodes: Optional[Batch] = None,
    tp_degree: int = 1,
    chunk_align: int = 32,
    max_budget: int = 8192,
    tbt_factor: Optional[float] = None,
    chunk_prefix: int = 0,
) -> int:
    """Largest budget whose hybrid iteration keeps TBT within ``t_max_ms``.

    The probe batch is ``decodes`` (default: 32 decodes at 4k context) plus
    one prefill chunk topping the batch up to the candidate budget. A token
    can wait for a whole pipeline round, so the iteration time is scaled by
    ``tbt_factor`` (default ``pp_degree``).
    """
    if decodes is None:
        decodes = decode_batch(REFERENCE_DECODE_BATCH, REFERENCE_CONTEXT)
    factor = float(pp_degree) if tbt_factor is None else tbt_factor
    n_dec = len(decodes)
    best = None
    for tau in range(chunk_align, max_budget + 1, chunk_align):
        chunk = tau - n_dec
        if chunk < 1:
            continue
        probe = decodes.entries + (BatchEntry(-1, EntryKind.PREFILL_CHUNK, chunk, chunk_prefix),)
        if iteration_time(probe, params, tp_degree) * factor <= t_max_ms:
            best = tau
    if best is None:
        raise InfeasibleSLO(
            f"no token budget up to {max_budget} meets a {t_max_ms:.3f} ms TBT target"
        )
    return best
