"""Bundled model presets.

Each preset pairs cost-model constants with the parallelism layout they
were fitted for. The constants are synthetic: chosen to reproduce published
anchor timings and SLO thresholds, not measured on hardware.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from servesim.costmodel import CostModelParams

PRESET_NAMES = ("mistral7b", "yi34b", "llama2_70b", "falcon180b")


@dataclass(frozen=True)
class ModelPreset:
    name: str
    params: CostModelParams
    replica: dict
    token_budget: dict
    label: str
    description: str = ""

    @property
    def tp_degree(self) -> int:
        return int(self.replica.get("tp_degree", 1))

    @property
    def pp_degree(self) -> int:
        return int(self.replica.get("pp_degree", 1))


def preset_from_dict(d: dict, name: Optional[str] = None) -> ModelPreset:
    params = CostModelParams.from_dict(d["params"])
    return ModelPreset(
        name=name or params.name,
        params=params,
        replica=dict(d.get("replica", {})),
        token_budget=dict(d.get("token_budget", {})),
        label=d.get("label", ""),
        description=d.get("description", ""),
    )


def load_preset(name: str) -> ModelPreset:
    if name not in PRESET_NAMES:
        raise KeyError(f"unknown model preset {name!r}; expected one of {', '.join(PRESET_NAMES)}")
    text = resources.files(__name__).joinpath(f"{name}.json").read_text(encoding="utf-8")
    return preset_from_dict(json.loads(text), name)
