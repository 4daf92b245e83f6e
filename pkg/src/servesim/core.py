"""Domain types shared by every module: requests, batches and replica config.

All timestamps are integer microseconds. The ``*_time`` properties expose
them in milliseconds for reporting.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional


class ContractViolation(RuntimeError):
    """An operation was called on a value that breaks its preconditions."""


class RequestState(enum.Enum):
    QUEUED = "Queued"
    PREFILLING = "Prefilling"
    DECODING = "Decoding"
    FINISHED = "Finished"


class EntryKind(enum.Enum):
    DECODE = "Decode"
    PREFILL_CHUNK = "PrefillChunk"


class SchedulerKind(enum.Enum):
    REQUEST_LEVEL = "RequestLevel"
    VLLM_EAGER = "VllmEager"
    ORCA_HYBRID = "OrcaHybrid"
    SARATHI_STALL_FREE = "SarathiStallFree"

    @classmethod
    def parse(cls, name: str) -> "SchedulerKind":
        for kind in cls:
            if kind.value == name:
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown scheduler {name!r}; expected one of: {valid}")


def us_to_ms(us: int) -> float:
    return us / 1000.0


def ms_to_us(ms: float) -> int:
    return int(round(ms * 1000.0))


@dataclass(slots=True)
class Request:
    id: int
    arrival_us: int
    prompt_tokens: int
    output_tokens: int
    prefill_done: int = 0
    decodes_done: int = 0
    first_token_us: Optional[int] = None
    token_emit_us: list[int] = field(default_factory=list)
    state: RequestState = RequestState.QUEUED
    # Start of the first batch that included this request.
    scheduled_us: Optional[int] = None

    def __post_init__(self) -> None:
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ContractViolation(
                f"request {self.id}: prompt_tokens and output_tokens must be >= 1"
            )

    @property
    def arrival_time(self) -> float:
        return us_to_ms(self.arrival_us)

    @property
    def first_token_time(self) -> Optional[float]:
        return None if self.first_token_us is None else us_to_ms(self.first_token_us)

    @property
    def token_emit_times(self) -> list[float]:
        return [us_to_ms(t) for t in self.token_emit_us]

    @property
    def prefill_remaining(self) -> int:
        return self.prompt_tokens - self.prefill_done

    @property
    def kv_tokens(self) -> int:
        """Tokens whose keys/values are already cached."""
        if self.state is RequestState.DECODING or self.state is RequestState.FINISHED:
            # the newest token's KV is written by the next decode iteration
            return self.prompt_tokens + self.decodes_done - 1
        return self.prefill_done

    @property
    def ttft_us(self) -> Optional[int]:
        if self.first_token_us is None:
            return None
        return self.first_token_us - self.arrival_us

    def tbt_samples_us(self) -> list[int]:
        t = self.token_emit_us
        return [t[i] - t[i - 1] for i in range(1, len(t))]

    def fresh_copy(self) -> "Request":
        """Same identity and lengths, lifecycle reset to Queued."""
        return Request(self.id, self.arrival_us, self.prompt_tokens, self.output_tokens)


@dataclass(frozen=True, slots=True)
class BatchEntry:
    request_id: int
    kind: EntryKind
    chunk_tokens: int
    prefix_tokens: int

    @classmethod
    def decode(cls, request: Request) -> "BatchEntry":
        return cls(request.id, EntryKind.DECODE, 1, request.kv_tokens)

    @classmethod
    def prefill(cls, request: Request, chunk: int) -> "BatchEntry":
        return cls(request.id, EntryKind.PREFILL_CHUNK, chunk, request.prefill_done)

    @property
    def is_decode(self) -> bool:
        return self.kind is EntryKind.DECODE

    @property
    def kv_after(self) -> int:
        """Cached tokens for this request once the iteration completes."""
        return self.prefix_tokens + self.chunk_tokens


@dataclass(frozen=True, slots=True)
class Batch:
    entries: tuple[BatchEntry, ...] = ()

    def __post_init__(self) -> None:
        seen = set()
        for e in self.entries:
            if e.kind is EntryKind.DECODE and e.chunk_tokens != 1:
                raise ContractViolation("decode entries carry exactly one token")
            if e.kind is EntryKind.PREFILL_CHUNK:
                if e.chunk_tokens < 1:
                    raise ContractViolation("prefill chunk must have >= 1 token")
                if e.request_id in seen:
                    raise ContractViolation(
                        f"request {e.request_id} has two prefill chunks in one batch"
                    )
                seen.add(e.request_id)

    @property
    def total_tokens(self) -> int:
        return sum(e.chunk_tokens for e in self.entries)

    @property
    def prefill_tokens(self) -> int:
        return sum(e.chunk_tokens for e in self.entries if e.kind is EntryKind.PREFILL_CHUNK)

    @property
    def num_decodes(self) -> int:
        return sum(1 for e in self.entries if e.kind is EntryKind.DECODE)

    @property
    def has_prefill(self) -> bool:
        return any(e.kind is EntryKind.PREFILL_CHUNK for e in self.entries)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class ReplicaConfig:
    scheduler: SchedulerKind = SchedulerKind.SARATHI_STALL_FREE
    token_budget: int = 512
    max_batch_size: int = 128
    max_num_batched_tokens: int = 4096
    tp_degree: int = 1
    pp_degree: int = 1
    kv_blocks: int = 65536
    kv_block_size: int = 16
    tile_size: int = 256
    chunk_align: int = 32
    # Orca's batch cap as a fraction of max_batch_size.
    orca_batch_ratio: float = 0.25
    watermark_frac: float = 0.1
    # Reserve KV for the full output at admission, so decode growth cannot fail.
    reserve_output: bool = True
    # Stall-free scheduler ablation switches.
    chunked_prefill: bool = True
    hybrid_batching: bool = True
    pipeline_tbt_factor: Optional[float] = None

    def __post_init__(self) -> None:
        if not isinstance(self.scheduler, SchedulerKind):
            object.__setattr__(self, "scheduler", SchedulerKind.parse(self.scheduler))
        if self.tp_degree < 1 or self.pp_degree < 1:
            raise ValueError("tp_degree and pp_degree must be >= 1")
        if self.kv_block_size < 1:
            raise ValueError("kv_block_size must be >= 1")
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")
        if self.chunk_align < 1:
            raise ValueError("chunk_align must be >= 1")
        if self.scheduler is SchedulerKind.SARATHI_STALL_FREE and self.token_budget < self.tile_size:
            raise ValueError(
                f"token_budget {self.token_budget} is below tile_size {self.tile_size}"
            )

    @property
    def orca_max_batch_size(self) -> int:
        return max(1, int(self.max_batch_size * self.orca_batch_ratio))

    @property
    def tbt_factor(self) -> float:
        if self.pipeline_tbt_factor is not None:
            return self.pipeline_tbt_factor
        return float(self.pp_degree)

    @property
    def watermark_blocks(self) -> int:
        return int(self.kv_blocks * self.watermark_frac)


def apply_iteration_result(request: Request, entry: BatchEntry, completion_us: int) -> Request:
    """Advance ``request`` by one executed batch entry, in place.

    The iteration that finishes the last prefill chunk also produces the
    first output token.
    """
    if entry.request_id != request.id:
        raise ContractViolation(
            f"entry for request {entry.request_id} applied to request {request.id}"
        )
    if entry.kind is EntryKind.PREFILL_CHUNK:
        if request.state not in (RequestState.QUEUED, RequestState.PREFILLING):
            raise ContractViolation(
                f"request {request.id}: prefill chunk while {request.state.value}"
            )
        if entry.chunk_tokens > request.prefill_remaining:
            raise ContractViolation(
                f"request {request.id}: chunk of {entry.chunk_tokens} exceeds "
                f"{request.prefill_remaining} remaining prompt tokens"
            )
        request.prefill_done += entry.chunk_tokens
        if request.prefill_done < request.prompt_tokens:
            request.state = RequestState.PREFILLING
            return request
        request.first_token_us = completion_us
        request.token_emit_us.append(completion_us)
        request.decodes_done = 1
    else:
        if request.state is not RequestState.DECODING:
            raise ContractViolation(
                f"request {request.id}: decode entry while {request.state.value}"
            )
        if request.token_emit_us and completion_us <= request.token_emit_us[-1]:
            raise ContractViolation(f"request {request.id}: token times must increase")
        request.token_emit_us.append(completion_us)
        request.decodes_done += 1
    if request.decodes_done >= request.output_tokens:
        request.state = RequestState.FINISHED
    else:
        request.state = RequestState.DECODING
    return request
