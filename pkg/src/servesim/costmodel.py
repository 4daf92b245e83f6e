"""Analytical iteration-time model.

An iteration costs a fixed launch overhead, a linear-layer term that is
flat while memory-bound and linear in tokens once compute-bound, and
attention: quadratic within a prefill chunk, a cross term for reading the
KV of earlier chunks, and a per-KV-token term for each decode.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import lsq_linear

from servesim.core import Batch, BatchEntry, EntryKind

# Reference decode batch used for SLO derivation.
REFERENCE_DECODE_BATCH = 32
REFERENCE_CONTEXT = 4096


@dataclass(frozen=True)
class CostModelParams:
    name: str
    per_token_linear_ms: float
    saturation_tokens: int
    h: int = 0
    h2: int = 0
    attn_prefill_quad_ms: float = 0.0
    attn_kv_read_ms: float = 0.0
    attn_decode_per_kv_ms: float = 0.0
    fixed_overhead_ms: float = 0.0
    tp_comm_ms: float = 0.0
    pp_send_ms: float = 0.0
    tile_size: int = 256
    tile_penalty_frac: float = 0.32

    def __post_init__(self) -> None:
        if self.saturation_tokens < 1:
            raise ValueError("saturation_tokens must be >= 1")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and (v < 0 or not math.isfinite(v)):
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v}")

    @property
    def mem_floor_ms(self) -> float:
        # Kept derived so the two regimes always meet at saturation_tokens.
        return self.per_token_linear_ms * self.saturation_tokens

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mem_floor_ms"] = self.mem_floor_ms
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostModelParams":
        d = dict(d)
        floor = d.pop("mem_floor_ms", None)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown cost-model fields: {sorted(unknown)}")
        p = cls(**d)
        if floor is not None and not math.isclose(floor, p.mem_floor_ms, rel_tol=1e-6, abs_tol=1e-9):
            raise ValueError(
                f"mem_floor_ms={floor} disagrees with per_token_linear_ms x saturation_tokens"
                f" = {p.mem_floor_ms}"
            )
        return p

    def replace(self, **changes) -> "CostModelParams":
        return dataclasses.replace(self, **changes)


def tile_penalty(tokens: int, params: CostModelParams) -> float:
    """Multiplier for the compute-bound linear branch.

    Batches of at most one tile, or whole tiles, pay nothing. A partial
    trailing tile costs as if a fixed fraction of its empty slots were
    computed; the fraction is set so that ``tile_size + 1`` tokens cost
    ``1 + tile_penalty_frac`` times as much. The multiplier times
    ``tokens`` is non-decreasing in ``tokens``.
    """
    tile = params.tile_size
    if tokens <= tile or tokens % tile == 0:
        return 1.0
    if tile == 1:
        return 1.0
    waste_weight = params.tile_penalty_frac * (tile + 1) / (tile - 1)
    padded = -(-tokens // tile) * tile
    return 1.0 + waste_weight * (padded - tokens) / tokens


def linear_time(tokens: int, params: CostModelParams, tp_degree: int = 1) -> float:
    """Linear-layer time: max(memory floor, compute time) with tile effects."""
    if tokens <= 0:
        return 0.0
    compute = params.per_token_linear_ms * tokens * tile_penalty(tokens, params)
    return max(params.mem_floor_ms, compute) / tp_degree


def attn_prefill_chunk_time(chunk: int, prefix: int, params: CostModelParams) -> float:
    return params.attn_prefill_quad_ms * chunk * chunk + params.attn_kv_read_ms * chunk * prefix


def attn_decode_time(kv_lengths: Iterable[int], params: CostModelParams) -> float:
    return params.attn_decode_per_kv_ms * sum(kv_lengths)


def _attention_ms(entries: Sequence[BatchEntry], params: CostModelParams) -> float:
    quad = params.attn_prefill_quad_ms
    kv = params.attn_kv_read_ms
    decode_kv = 0
    prefill = 0.0
    for e in entries:
        if e.kind is EntryKind.DECODE:
            decode_kv += e.prefix_tokens + 1
        else:
            c = e.chunk_tokens
            prefill += quad * c * c + kv * c * e.prefix_tokens
    return prefill + params.attn_decode_per_kv_ms * decode_kv


def iteration_time(
    batch: Batch | Sequence[BatchEntry],
    params: CostModelParams,
    tp_degree: int = 1,
    pp_degree: int = 1,
) -> float:
    """Full-model time in ms for one iteration of ``batch``.

    Decode entries attend over ``prefix_tokens + 1`` keys. Each of the
    ``pp_degree`` stages runs for ``stage_time = iteration_time / pp_degree``;
    ``pp_degree`` is accepted here only to keep call sites symmetric.
    """
    entries = batch.entries if isinstance(batch, Batch) else batch
    if not entries:
        return 0.0
    total = 0
    for e in entries:
        total += e.chunk_tokens
    t = params.fixed_overhead_ms + linear_time(total, params, tp_degree)
    t += _attention_ms(entries, params)
    if tp_degree > 1:
        t += params.tp_comm_ms
    return t


def decode_only_time(
    num_decodes: int, kv_read_tokens: int, params: CostModelParams, tp_degree: int = 1
) -> float:
    """``iteration_time`` of a decode-only batch from its aggregates.

    ``kv_read_tokens`` is the sum of ``prefix_tokens + 1`` over entries. The
    arithmetic mirrors ``iteration_time`` operation for operation, so both
    give bit-identical floats.
    """
    if num_decodes <= 0:
        return 0.0
    t = params.fixed_overhead_ms + linear_time(num_decodes, params, tp_degree)
    t += 0.0 + params.attn_decode_per_kv_ms * kv_read_tokens
    if tp_degree > 1:
        t += params.tp_comm_ms
    return t


def stage_time(
    batch: Batch | Sequence[BatchEntry],
    params: CostModelParams,
    tp_degree: int = 1,
    pp_degree: int = 1,
) -> float:
    """Per-stage time: layers are split evenly across pipeline stages."""
    return iteration_time(batch, params, tp_degree, pp_degree) / pp_degree


def decode_batch(batch_size: int, context: int) -> Batch:
    """Decode-only batch of ``batch_size`` requests each holding ``context`` tokens."""
    return Batch(tuple(
        BatchEntry(i, EntryKind.DECODE, 1, context - 1) for i in range(batch_size)
    ))


def prefill_batch(*prompts: int) -> Batch:
    return Batch(tuple(
        BatchEntry(i, EntryKind.PREFILL_CHUNK, p, 0) for i, p in enumerate(prompts)
    ))


def decode_reference_time(params: CostModelParams, tp_degree: int = 1) -> float:
    """Decode-only iteration of 32 requests at 4k context."""
    return iteration_time(
        decode_batch(REFERENCE_DECODE_BATCH, REFERENCE_CONTEXT), params, tp_degree
    )


def chunked_prefill_time(
    prompt: int, chunk: int, params: CostModelParams, tp_degree: int = 1
) -> float:
    """Total time to prefill ``prompt`` alone, ``chunk`` tokens per iteration."""
    done = 0
    total = 0.0
    while done < prompt:
        c = min(chunk, prompt - done)
        total += iteration_time(
            (BatchEntry(0, EntryKind.PREFILL_CHUNK, c, done),), params, tp_degree
        )
        done += c
    return total


# ---------------------------------------------------------------- calibration


class CalibrationError(ValueError):
    def __init__(self, message: str, unconstrained: Sequence[str] = ()):
        super().__init__(message)
        self.unconstrained = list(unconstrained)


@dataclass(frozen=True)
class Anchor:
    """An observed full-iteration time for a batch at a given TP degree."""

    batch: Batch
    observed_ms: float
    tp_degree: int = 1
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "observed_ms": self.observed_ms,
            "tp_degree": self.tp_degree,
            "entries": [
                {"kind": e.kind.value, "chunk_tokens": e.chunk_tokens, "prefix_tokens": e.prefix_tokens}
                for e in self.batch.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Anchor":
        if "entries" in d:
            entries = tuple(
                BatchEntry(i, EntryKind(e["kind"]), int(e["chunk_tokens"]), int(e.get("prefix_tokens", 0)))
                for i, e in enumerate(d["entries"])
            )
            batch = Batch(entries)
        elif "prefill" in d:
            batch = prefill_batch(*[int(p) for p in d["prefill"]])
        elif "decode" in d:
            batch = decode_batch(int(d["decode"]["batch_size"]), int(d["decode"]["context"]))
        else:
            raise ValueError("anchor needs one of 'entries', 'prefill' or 'decode'")
        return cls(batch, float(d["observed_ms"]), int(d.get("tp_degree", 1)), d.get("label", ""))


FIT_NAMES = (
    "fixed_overhead_ms",
    "mem_floor_ms",
    "per_token_linear_ms",
    "attn_prefill_quad_ms",
    "attn_kv_read_ms",
    "attn_decode_per_kv_ms",
)


@dataclass
class CalibrationResult:
    params: CostModelParams
    residuals: list[float]  # relative, (model - observed) / observed
    unconstrained: list[str]

    @property
    def max_rel_error(self) -> float:
        return max((abs(r) for r in self.residuals), default=0.0)


def _features(anchor: Anchor, params: CostModelParams) -> tuple[np.ndarray, float, float]:
    """Feature row for each fitted constant plus the eff-token count and fixed offset."""
    entries = anchor.batch.entries
    tp = anchor.tp_degree
    total = sum(e.chunk_tokens for e in entries)
    eff = total * tile_penalty(total, params)
    quad = sum(e.chunk_tokens ** 2 for e in entries if e.kind is EntryKind.PREFILL_CHUNK)
    cross = sum(e.chunk_tokens * e.prefix_tokens for e in entries if e.kind is EntryKind.PREFILL_CHUNK)
    kv = sum(e.prefix_tokens + 1 for e in entries if e.kind is EntryKind.DECODE)
    row = np.array([1.0, 1.0 / tp, eff / tp, quad, cross, kv])
    offset = params.tp_comm_ms if tp > 1 else 0.0
    return row, eff, offset


def calibrate(
    anchors: Sequence[Anchor],
    base: Optional[CostModelParams] = None,
    name: Optional[str] = None,
) -> CalibrationResult:
    """Fit timing constants to observed iteration times.

    The memory/compute regime of each anchor is unknown, so every split of
    the anchors (sorted by effective token count) into a memory-bound
    prefix and compute-bound suffix is tried. Each split is a bounded
    linear least-squares problem on relative error; the best split whose
    solution agrees with its assumed regimes wins. Constants that no
    anchor exercises keep their ``base`` value.
    """
    if base is None:
        base = CostModelParams(name=name or "calibrated", per_token_linear_ms=0.0, saturation_tokens=1)
    if len(anchors) < 4:
        raise CalibrationError(
            f"need at least 4 anchors, got {len(anchors)}", unconstrained=list(FIT_NAMES)
        )
    rows, effs, offsets, obs = [], [], [], []
    for a in anchors:
        if a.observed_ms <= 0:
            raise CalibrationError(f"anchor {a.label!r} has non-positive observed time")
        r, eff, off = _features(a, base)
        rows.append(r)
        effs.append(eff)
        offsets.append(off)
        obs.append(a.observed_ms)
    X = np.array(rows)
    y = np.array(obs) - np.array(offsets)
    w = 1.0 / np.array(obs)
    order = np.argsort(effs, kind="stable")

    has_decode = any(a.batch.num_decodes > 0 and not a.batch.has_prefill for a in anchors)
    has_prefill = any(a.batch.has_prefill for a in anchors)
    missing = []
    if not has_decode:
        missing.append("mem_floor_ms")
    if not has_prefill:
        missing.append("per_token_linear_ms")
    if missing:
        raise CalibrationError(
            "anchors must span both regimes (a decode-only batch and a prefill batch)",
            unconstrained=missing,
        )

    base_vals = np.array([
        base.fixed_overhead_ms,
        base.mem_floor_ms,
        base.per_token_linear_ms,
        base.attn_prefill_quad_ms,
        base.attn_kv_read_ms,
        base.attn_decode_per_kv_ms,
    ])

    best = None
    n = len(anchors)
    for k in range(1, n):  # first k (by eff tokens) are memory-bound
        mem = np.zeros(n, dtype=bool)
        mem[order[:k]] = True
        A = X.copy()
        A[mem, 2] = 0.0
        A[~mem, 1] = 0.0
        active = np.abs(A).sum(axis=0) > 0
        # Rank-deficient sets still solve; lsq_linear returns one minimiser.
        Aw = A[:, active] * w[:, None]
        rhs = (y - A[:, ~active] @ base_vals[~active]) * w
        sol = lsq_linear(Aw, rhs, bounds=(0.0, np.inf), method="bvls", tol=1e-14)
        theta = base_vals.copy()
        theta[active] = sol.x
        floor, slope = theta[1], theta[2]
        tol = 1e-6 * max(floor, 1e-9)
        consistent = all(
            slope * effs[i] <= floor + tol if mem[i] else slope * effs[i] >= floor - tol
            for i in range(n)
        )
        cost = float(np.sum((A @ theta - y) ** 2 * w ** 2))
        key = (not consistent, cost)
        if best is None or key < best[0]:
            best = (key, theta, active)

    _, theta, active = best
    fixed, floor, slope, quad, kvr, dec = (float(v) for v in theta)
    if slope <= 0:
        raise CalibrationError("fit produced a zero compute slope", unconstrained=["per_token_linear_ms"])
    sat = max(1, int(round(floor / slope)))
    params = base.replace(
        name=name or base.name,
        fixed_overhead_ms=fixed,
        per_token_linear_ms=slope,
        saturation_tokens=sat,
        attn_prefill_quad_ms=quad,
        attn_kv_read_ms=kvr,
        attn_decode_per_kv_ms=dec,
    )
    residuals = [
        (iteration_time(a.batch, params, a.tp_degree) - a.observed_ms) / a.observed_ms
        for a in anchors
    ]
    unconstrained = [FIT_NAMES[i] for i in range(len(FIT_NAMES)) if not active[i]]
    return CalibrationResult(params, residuals, unconstrained)
