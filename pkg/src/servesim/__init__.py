"""Deterministic simulator for LLM inference serving schedulers."""

from servesim.core import (
    Batch,
    BatchEntry,
    ContractViolation,
    EntryKind,
    ReplicaConfig,
    Request,
    RequestState,
    SchedulerKind,
    apply_iteration_result,
)
from servesim.costmodel import CostModelParams, iteration_time

__all__ = [
    "Batch",
    "BatchEntry",
    "ContractViolation",
    "CostModelParams",
    "EntryKind",
    "ReplicaConfig",
    "Request",
    "RequestState",
    "SchedulerKind",
    "apply_iteration_result",
    "iteration_time",
]

__version__ = "0.1.0"
