"""Experiment configuration: a JSON file, overridden by command-line flags."""

from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .lattice import LatticeSpec, make_box, rect_box


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    d: int = Field(2, ge=1)
    radius: int = Field(1, ge=0)
    shape: list[int] | None = None
    gamma: float = Field(1.0, ge=0, allow_inf_nan=False)
    gamma_list: list[float] | None = None

    @model_validator(mode="after")
    def _gammas(self):
        if self.gamma_list is not None and any(g < 0 for g in self.gamma_list):
            raise ValueError("gamma_list entries must be >= 0")
        if self.shape is not None:
            if len(self.shape) != self.d or any(s < 1 for s in self.shape):
                raise ValueError("shape needs d positive side lengths")
        return self

    def spec(self) -> LatticeSpec:
        if self.shape is not None:
            return rect_box(self.shape, self.gamma)
        return make_box(self.d, self.radius, self.gamma)


class SamplerSection(_Strict):
    seed: int = Field(0, ge=0)
    streams: int = Field(1, ge=1)
    samples: int = Field(1000, ge=1)
    kind: Literal["nu", "m", "tree"] = "nu"


class DynamicsSection(_Strict):
    rates: Literal["constant", "exponential", "power"] = "constant"
    rate: float = Field(1.0, gt=0)
    scale: float = Field(1.0, gt=0)
    t_max: float = Field(50.0, ge=0)
    burn_in: float = Field(0.0, ge=0)
    checkpoints: list[float] = []


class AnalysisSection(_Strict):
    observables: list[Literal["max_height"]] = ["max_height"]
    distances: list[int] | None = None
    batches: int = Field(20, ge=2)
    fixed_configs: int = Field(100, ge=1)


class OutputSection(_Strict):
    dir: str | None = None
    formats: list[Literal["csv", "json"]] = ["csv"]


class ExperimentConfig(_Strict):
    model: ModelSection = ModelSection()
    sampler: SamplerSection = SamplerSection()
    dynamics: DynamicsSection = DynamicsSection()
    analysis: AnalysisSection = AnalysisSection()
    output: OutputSection = OutputSection()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def merge(base: dict, overrides: dict) -> dict:
    """Nested dict update; ``None`` override values are ignored."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                out.setdefault(section, {})[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """Defaults, then the file, then flags."""
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    return ExperimentConfig.model_validate(merge(data, overrides))
