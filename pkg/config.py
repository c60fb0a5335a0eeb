"""Experiment configuration: one JSON document, one section per module."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from baselines import BaselineConfig
from cluster import ClusterSpec
from errors import ConfigError
from optimizer import BALANCED, SearchBudget, Weights
from sustain import EnvironmentState
from workload import TraceConfig

logger = logging.getLogger(__name__)

EIGHT_HOURS_S = 8 * 3600.0


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    trace: TraceConfig = Field(default_factory=TraceConfig)
    cluster: ClusterSpec = Field(default_factory=ClusterSpec)
    env: EnvironmentState = Field(default_factory=EnvironmentState)
    budget: SearchBudget = Field(default_factory=SearchBudget)
    # weights of the balanced optimizer variant
    weights: Weights = BALANCED
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)
    horizon_s: float = Field(EIGHT_HOURS_S, gt=0)

    @property
    def epoch_length_s(self) -> float:
        return self.trace.epoch_length_s

    def with_overrides(
        self,
        seed: Optional[int] = None,
        epochs: Optional[int] = None,
        functions: Optional[int] = None,
    ) -> ExperimentConfig:
        """Apply command-line overrides; `seed` drives both the trace and the search."""
        trace, budget, horizon_s = self.trace, self.budget, self.horizon_s
        if seed is not None:
            trace = trace.model_copy(update={"seed": seed})
            budget = budget.model_copy(update={"seed": seed})
        if epochs is not None:
            if epochs < 1:
                raise ConfigError(f"--epochs must be >= 1, got {epochs}")
            trace = trace.model_copy(update={"epochs": epochs})
            horizon_s = epochs * trace.epoch_length_s
        if functions is not None:
            if functions < 1:
                raise ConfigError(f"--functions must be >= 1, got {functions}")
            trace = trace.model_copy(update={"n_function_ids": functions})
        return self.model_copy(update={"trace": trace, "budget": budget, "horizon_s": horizon_s})


def load_config(path: Optional[str | Path]) -> ExperimentConfig:
    """Read a config file; no path gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"Could not read config {path}: {exc}") from exc
    try:
        config = ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config {path}:\n{exc}") from exc
    logger.debug("Loaded config %s", path)
    return config
