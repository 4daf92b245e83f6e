"""Paged KV-cache accounting.

Only block counts are tracked: no block tables, sharing or swapping. A
request's blocks grow as its prefill chunks and decodes are scheduled and
are returned when it finishes.
"""

from __future__ import annotations

from typing import Optional

from servesim.core import ContractViolation, Request


class OutOfKvBlocks(RuntimeError):
    def __init__(self, message: str, time_us: Optional[int] = None):
        super().__init__(message)
        self.time_us = time_us


def blocks_needed(tokens: int, block_size: int) -> int:
    if tokens <= 0:
        return 0
    return -(-tokens // block_size)


def kv_cache_bytes(hidden: int, tokens: int, layers: int = 1, bytes_per_value: int = 2) -> int:
    """Bytes for keys and values of ``tokens`` tokens: 2 * h * t per layer."""
    return 2 * hidden * tokens * layers * bytes_per_value


class KvCache:
    """Block pool for one replica.

    Besides the blocks actually held, admitted requests may carry a
    reservation for the blocks they will need later. Admission checks count
    outstanding reservations and a watermark as unavailable.
    """

    def __init__(self, total_blocks: int, block_size: int = 16, watermark_blocks: int = 0):
        if total_blocks < 0 or block_size < 1:
            raise ValueError("total_blocks must be >= 0 and block_size >= 1")
        self.total_blocks = total_blocks
        self.block_size = block_size
        self.watermark_blocks = watermark_blocks
        self.free_blocks = total_blocks
        self.allocated: dict[int, int] = {}
        self._tokens: dict[int, int] = {}
        self._reserved: dict[int, int] = {}
        self._outstanding = 0

    # -- queries

    def tokens_in_cache(self, request_id: int) -> int:
        return self._tokens[request_id]

    @property
    def used_blocks(self) -> int:
        return self.total_blocks - self.free_blocks

    @property
    def utilization(self) -> float:
        return self.used_blocks / self.total_blocks if self.total_blocks else 0.0

    @property
    def available_blocks(self) -> int:
        return self.free_blocks - self._outstanding - self.watermark_blocks

    def can_allocate_request(self, request: Request, reserve_decode_tokens: int = 0) -> bool:
        needed = blocks_needed(request.prompt_tokens + reserve_decode_tokens, self.block_size)
        return self.available_blocks >= needed

    # -- mutation

    def admit(self, request_id: int, reserve_tokens: int = 0) -> None:
        """Register a request holding no blocks yet, reserving ``reserve_tokens``."""
        if request_id in self.allocated:
            raise ValueError(f"request {request_id} already admitted")
        self.allocated[request_id] = 0
        self._tokens[request_id] = 0
        reserve = blocks_needed(reserve_tokens, self.block_size)
        self._reserved[request_id] = reserve
        self._outstanding += reserve

    def grow(self, request_id: int, new_total_tokens: int, time_us: Optional[int] = None) -> None:
        if request_id not in self.allocated:
            raise ContractViolation(f"request {request_id} is not live in the KV cache")
        current = self._tokens[request_id]
        if new_total_tokens < current:
            raise ValueError(
                f"request {request_id}: cannot shrink from {current} to {new_total_tokens} tokens"
            )
        held = self.allocated[request_id]
        want = blocks_needed(new_total_tokens, self.block_size)
        extra = want - held
        if extra > self.free_blocks:
            raise OutOfKvBlocks(
                f"request {request_id} needs {extra} more blocks, {self.free_blocks} free",
                time_us,
            )
        if extra > 0:
            self.free_blocks -= extra
            self.allocated[request_id] = want
            covered = min(extra, self._reserved[request_id])
            self._reserved[request_id] -= covered
            self._outstanding -= covered
        self._tokens[request_id] = new_total_tokens

    def release(self, request_id: int) -> None:
        if request_id not in self.allocated:
            raise ContractViolation(f"request {request_id} is not live in the KV cache")
        self.free_blocks += self.allocated.pop(request_id)
        del self._tokens[request_id]
        self._outstanding -= self._reserved.pop(request_id)

    def check_conservation(self) -> bool:
        return self.free_blocks + sum(self.allocated.values()) == self.total_blocks
