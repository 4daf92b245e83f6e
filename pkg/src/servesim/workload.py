"""Synthetic request traces.

Prompt and output lengths are log-normal, fixed by a (median, P90) pair.
Requests whose total length exceeds a cap are rejected and redrawn. The
bundled datasets store log-normal parameters chosen so that the
*post-rejection* median and P90 of prompts land on the dataset's summary
statistics; rejecting without that correction drags both quantiles down.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats

from servesim.core import Request, ms_to_us
from servesim.io import atomic_write_text

Z90 = 1.2816  # standard normal 90th percentile, as used for the fit


class TraceParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LengthDistribution:
    median: float
    p90: float
    max_total: Optional[int] = None

    def __post_init__(self) -> None:
        if not (self.median > 0 and self.p90 >= self.median):
            raise ValueError("need p90 >= median > 0")

    @property
    def mu(self) -> float:
        return math.log(self.median)

    @property
    def sigma(self) -> float:
        return (math.log(self.p90) - math.log(self.median)) / Z90

    def draw(self, rng: np.random.Generator, size: Optional[int] = None):
        if self.sigma == 0:
            z = np.zeros(size) if size is not None else 0.0  # degenerate: every draw is the median
        else:
            z = rng.standard_normal(size)
        return np.maximum(1, np.rint(np.exp(self.mu + self.sigma * z))).astype(np.int64)


@dataclass(frozen=True)
class Dataset:
    name: str
    prompt: LengthDistribution
    output: LengthDistribution
    max_total: int
    # Summary statistics the sampler should reproduce after rejection.
    target_prompt: tuple[float, float]
    target_output: tuple[float, float]


# (prompt median, P90), (output median, P90), total-length cap
_TABLE = {
    "openchat": ((1730, 5696), (415, 834), 8192),
    "arxiv": ((7059, 12985), (208, 371), 16384),
}


def _filtered_quantiles(prompt: LengthDistribution, output: LengthDistribution, cap: int) -> tuple[float, float]:
    """Median and P90 of the prompt length conditional on prompt + output <= cap."""
    grid = np.linspace(0.0, math.log(cap), 4000)[1:]
    x = np.exp(grid)
    pdf = stats.norm.pdf(grid, prompt.mu, prompt.sigma) if prompt.sigma > 0 else np.zeros_like(x)
    keep = stats.norm.cdf(np.log(np.maximum(cap - x, 1e-9)), output.mu, output.sigma)
    w = pdf * keep
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return float(np.interp(0.5, cdf, x)), float(np.interp(0.9, cdf, x))


def fit_prefilter(
    target_prompt: tuple[float, float], output: LengthDistribution, cap: int
) -> LengthDistribution:
    """Log-normal prompt distribution whose capped quantiles hit ``target_prompt``."""
    tm, tp = target_prompt

    def resid(v):
        m, p = math.exp(v[0]), math.exp(v[0]) + math.exp(v[1])
        qm, qp = _filtered_quantiles(LengthDistribution(m, p), output, cap)
        return [math.log(qm / tm), math.log(qp / tp)]

    x0 = [math.log(tm), math.log(tp - tm)]
    sol = optimize.root(resid, x0, method="hybr")
    m, p = math.exp(sol.x[0]), math.exp(sol.x[0]) + math.exp(sol.x[1])
    return LengthDistribution(m, p, cap)


@lru_cache(maxsize=None)
def dataset(name: str) -> Dataset:
    if name not in _TABLE:
        raise KeyError(f"unknown dataset {name!r}; expected one of {', '.join(_TABLE)}")
    (pm, pp), (om, op), cap = _TABLE[name]
    output = LengthDistribution(om, op, cap)
    prompt = fit_prefilter((pm, pp), output, cap)
    return Dataset(name, prompt, output, cap, (pm, pp), (om, op))


def sample_request(
    prompt_dist: LengthDistribution,
    output_dist: LengthDistribution,
    rng: np.random.Generator,
    max_total: Optional[int] = None,
) -> tuple[int, int]:
    cap = max_total or prompt_dist.max_total or output_dist.max_total
    while True:
        p = int(prompt_dist.draw(rng))
        o = int(output_dist.draw(rng))
        if cap is None or p + o <= cap:
            return p, o


def sample_lengths(
    prompt_dist: LengthDistribution,
    output_dist: LengthDistribution,
    n: int,
    rng: np.random.Generator,
    max_total: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    out = [sample_request(prompt_dist, output_dist, rng, max_total) for _ in range(n)]
    if not out:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    a = np.array(out, dtype=np.int64)
    return a[:, 0], a[:, 1]


def poisson_arrivals(qps: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Arrival times in ms: cumulative sum of exponential gaps with mean 1000/qps."""
    if qps <= 0:
        raise ValueError("qps must be positive")
    return np.cumsum(rng.standard_exponential(n) * (1000.0 / qps))


def make_trace(
    prompt_dist: LengthDistribution,
    output_dist: LengthDistribution,
    qps: float,
    n: int,
    seed: int,
    max_total: Optional[int] = None,
) -> list[Request]:
    """Seeded trace. Lengths and arrivals use separate streams, so for a
    fixed seed, changing ``qps`` only rescales the arrival times."""
    len_rng, arr_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    prompts, outputs = sample_lengths(prompt_dist, output_dist, n, len_rng, max_total)
    arrivals = poisson_arrivals(qps, n, arr_rng)
    return [
        Request(i, ms_to_us(float(arrivals[i])), int(prompts[i]), int(outputs[i]))
        for i in range(n)
    ]


def dataset_trace(name: str, qps: float, n: int, seed: int) -> list[Request]:
    ds = dataset(name)
    return make_trace(ds.prompt, ds.output, qps, n, seed, ds.max_total)


# ------------------------------------------------------------------ trace I/O

TRACE_HEADER = ["arrival_ms", "prompt_tokens", "output_tokens"]


def format_ms(us: int) -> str:
    return f"{us // 1000}.{us % 1000:03d}"


def dumps_trace(trace: Sequence[Request]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in trace:
        w.writerow([format_ms(r.arrival_us), r.prompt_tokens, r.output_tokens])
    return buf.getvalue()


def loads_trace(text: str) -> list[Request]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    if [c.strip() for c in rows[0]] != TRACE_HEADER:
        raise TraceParseError(f"expected header {','.join(TRACE_HEADER)}", 1)
    trace = []
    last = None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise TraceParseError(f"expected 3 fields, got {len(row)}", lineno)
        try:
            arrival = ms_to_us(float(row[0]))
            prompt = int(row[1])
            output = int(row[2])
        except ValueError as exc:
            raise TraceParseError(str(exc), lineno) from None
        if prompt < 1 or output < 1:
            raise TraceParseError("prompt_tokens and output_tokens must be >= 1", lineno)
        if arrival < 0 or (last is not None and arrival < last):
            raise TraceParseError("arrival_ms must be non-negative and non-decreasing", lineno)
        last = arrival
        trace.append(Request(len(trace), arrival, prompt, output))
    return trace


def save_trace(trace: Sequence[Request], path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_trace(trace))


def load_trace(path: str | os.PathLike) -> list[Request]:
    with open(path, encoding="utf-8", newline="") as f:
        return loads_trace(f.read())


@dataclass(frozen=True)
class WorkloadSpec:
    """Where probe traces come from: a bundled dataset or explicit distributions."""

    dataset: Optional[str] = None
    prompt: Optional[LengthDistribution] = None
    output: Optional[LengthDistribution] = None
    max_total: Optional[int] = None

    def __post_init__(self) -> None:
        if self.dataset is None and (self.prompt is None or self.output is None):
            raise ValueError("workload needs a dataset name or both length distributions")

    def trace(self, qps: float, n: int, seed: int) -> list[Request]:
        if self.dataset is not None:
            return dataset_trace(self.dataset, qps, n, seed)
        return make_trace(self.prompt, self.output, qps, n, seed, self.max_total)

    @property
    def label(self) -> str:
        if self.dataset is not None:
            return self.dataset
        return f"custom(p={self.prompt.median:g}/{self.prompt.p90:g},o={self.output.median:g}/{self.output.p90:g})"
