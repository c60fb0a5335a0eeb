"""
Objective evaluation of a plan: SLO violation rate, operational carbon and
wastewater. Energy follows a linear idle-to-peak node power model, cooling a
COP surrogate with a cluster-wide hotspot penalty, water a WUE + EWIF split and
carbon the grid intensity plus the carbon of producing and treating the water.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from cluster import (
    ClusterSpec,
    ContainerAlloc,
    OverheadSpec,
    Plan,
    diff_new_containers,
    feasible,
    retired_containers,
    spec_of,
)
from errors import ConfigError, EvaluationError
from workload import EpochWorkload, FunctionSpec

logger = logging.getLogger(__name__)

J_PER_KWH = 3.6e6
OBJECTIVE_AXES = ("slo", "carbon", "water")


class EnvironmentState(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    carbon_intensity_g_per_kwh: float = Field(400.0, ge=0)
    wue_l_per_kwh: float = Field(1.8, ge=0)
    ewif_l_per_kwh: float = Field(0.4, ge=0)
    carbon_per_liter_water_g: float = Field(1.2, ge=0)
    cop_base: float = Field(4.0, gt=0)
    hotspot_util_threshold: float = Field(0.9, gt=0, le=1)
    hotspot_cop_penalty: float = Field(0.5, gt=0, le=1)
    # Per-epoch grid intensity; overrides carbon_intensity_g_per_kwh when set.
    carbon_intensity_schedule: Optional[tuple[float, ...]] = None

    @field_validator("carbon_intensity_schedule")
    @classmethod
    def _non_negative(cls, v):
        if v is not None and any(x < 0 for x in v):
            raise ValueError("carbon_intensity_schedule entries must be >= 0")
        return v

    def for_epoch(self, epoch_index: int) -> EnvironmentState:
        if not self.carbon_intensity_schedule:
            return self
        if epoch_index >= len(self.carbon_intensity_schedule):
            raise ConfigError(
                f"carbon_intensity_schedule has {len(self.carbon_intensity_schedule)} "
                f"entries, epoch {epoch_index} requested"
            )
        return self.model_copy(
            update={
                "carbon_intensity_g_per_kwh": self.carbon_intensity_schedule[epoch_index],
                "carbon_intensity_schedule": None,
            }
        )


@dataclass(frozen=True)
class ObjectiveVector:
    slo_violation_rate: float
    carbon_g: float
    water_l: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in self.as_tuple()):
            raise ValueError(f"non-finite objective vector {self.as_tuple()}")
        if not 0.0 <= self.slo_violation_rate <= 1.0:
            raise ValueError(f"slo_violation_rate {self.slo_violation_rate} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.slo_violation_rate, self.carbon_g, self.water_l)

    def axis(self, name: str) -> float:
        try:
            return self.as_tuple()[OBJECTIVE_AXES.index(name)]
        except ValueError:
            raise ConfigError(
                f"Unknown objective axis '{name}'. Supported: {list(OBJECTIVE_AXES)}"
            ) from None

    def __str__(self) -> str:
        return (
            f"slo={self.slo_violation_rate:.4f} carbon={self.carbon_g:.2f}g "
            f"water={self.water_l:.3f}L"
        )


@dataclass(frozen=True)
class EnergyBreakdown:
    it_energy_kwh_per_node: tuple[float, ...]
    utilization: tuple[float, ...]
    it_energy_kwh: float
    cooling_energy_kwh: float
    startup_energy_kwh: float
    total_kwh: float
    hotspot: bool = False


@dataclass(frozen=True)
class SloResult:
    slo_violation_rate: float
    violations: int
    arrivals: int
    # Completion times per container, in plan order.
    completions: tuple[np.ndarray, ...] = ()


@dataclass(frozen=True)
class Assessment:
    objectives: ObjectiveVector
    violations: int
    arrivals: int
    energy: EnergyBreakdown
    water_l: float
    plan: Plan


def completion_times(n_requests: int, slots: int, runtime_s: float, cold_s: float) -> np.ndarray:
    """FIFO batches: request i (1-based) completes at cold + ceil(i / slots) * runtime."""
    i = np.arange(1, n_requests + 1)
    return cold_s + ((i + slots - 1) // slots) * runtime_s


def _batches_within(cold_s: float, runtime_s: float, limit_s: float, max_batches: int) -> int:
    """Count of batches b in [1, max_batches] with cold + b * runtime <= limit."""
    if max_batches <= 0 or limit_s < cold_s:
        return 0
    b = min(max(math.floor((limit_s - cold_s) / runtime_s), 0), max_batches)
    # settle floating error of the division against the exact per-batch test
    while b < max_batches and cold_s + (b + 1) * runtime_s <= limit_s:
        b += 1
    while b > 0 and cold_s + b * runtime_s > limit_s:
        b -= 1
    return b


def _container_profile(
    alloc: ContainerAlloc, spec: FunctionSpec, cold_start_s: float, epoch_length_s: float
) -> tuple[int, float]:
    """(violations, busy core-seconds) of one container over the epoch."""
    n = alloc.assigned_requests
    base_core_s = spec.cpu_base_cores * epoch_length_s
    if n == 0:
        return 0, min(base_core_s, alloc.cores * epoch_length_s)

    k = alloc.slots(spec)
    r = spec.runtime_s
    cold = cold_start_s if alloc.is_new else 0.0
    n_batches = -(-n // k)

    on_time = _batches_within(cold, r, min(spec.deadline_s, epoch_length_s), n_batches)
    violations = n - min(n, on_time * k)

    full = _batches_within(cold, r, epoch_length_s, n_batches)
    in_flight_s = min(n, full * k) * r
    if full < n_batches:
        start = cold + full * r
        if start < epoch_length_s:
            in_flight_s += min(k, n - full * k) * (epoch_length_s - start)
    busy = base_core_s + spec.cpu_per_request_cores * in_flight_s
    return violations, min(busy, alloc.cores * epoch_length_s)


def _profiles(
    plan: Plan,
    specs: Mapping[str, FunctionSpec],
    overhead: OverheadSpec,
    epoch_length_s: float,
) -> list[tuple[int, float]]:
    return [
        _container_profile(
            alloc, spec_of(specs, alloc.function_id), overhead.cold_start_s, epoch_length_s
        )
        for alloc in plan.allocations
    ]


def eval_slo(
    plan: Plan,
    specs: Mapping[str, FunctionSpec],
    workload: EpochWorkload,
    overhead: OverheadSpec,
    epoch_length_s: float,
) -> SloResult:
    """
    Violation rate per request. A request violates when it completes after its
    deadline or after the epoch end. Zero arrivals give rate 0.
    """
    violations = sum(v for v, _ in _profiles(plan, specs, overhead, epoch_length_s))
    completions = tuple(
        completion_times(
            a.assigned_requests,
            max(1, a.slots(spec_of(specs, a.function_id))),
            spec_of(specs, a.function_id).runtime_s,
            overhead.cold_start_s if a.is_new else 0.0,
        )
        for a in plan.allocations
    )
    arrivals = workload.total_requests
    rate = violations / arrivals if arrivals else 0.0
    return SloResult(rate, violations, arrivals, completions)


def _energy_from_busy(
    busy_core_s: np.ndarray,
    n_new: int,
    cluster: ClusterSpec,
    env: EnvironmentState,
    epoch_length_s: float,
) -> EnergyBreakdown:
    node = cluster.node
    capacity = node.cores * epoch_length_s
    util = np.minimum(busy_core_s, capacity) / capacity
    it_j = (node.p_idle_w + (node.p_max_w - node.p_idle_w) * util) * epoch_length_s
    it_kwh = it_j / J_PER_KWH

    hotspot = bool(np.any(util > env.hotspot_util_threshold))
    cop = env.cop_base * env.hotspot_cop_penalty if hotspot else env.cop_base
    it_total = float(it_kwh.sum())
    cooling = it_total / cop
    startup = cluster.overhead.startup_energy_j * n_new / J_PER_KWH
    return EnergyBreakdown(
        it_energy_kwh_per_node=tuple(float(x) for x in it_kwh),
        utilization=tuple(float(x) for x in util),
        it_energy_kwh=it_total,
        cooling_energy_kwh=cooling,
        startup_energy_kwh=startup,
        total_kwh=it_total + cooling + startup,
        hotspot=hotspot,
    )


def _busy_per_node(
    plan: Plan,
    busy: Sequence[float],
    retired: Sequence[ContainerAlloc],
    specs: Mapping[str, FunctionSpec],
    cluster: ClusterSpec,
    epoch_length_s: float,
) -> np.ndarray:
    per_node = np.zeros(cluster.n_nodes)
    for alloc, core_s in zip(plan.allocations, busy):
        per_node[alloc.node_id] += core_s
    residual_s = min(cluster.overhead.shutdown_s, epoch_length_s)
    for alloc in retired:
        if 0 <= alloc.node_id < cluster.n_nodes and alloc.function_id in specs:
            per_node[alloc.node_id] += specs[alloc.function_id].cpu_base_cores * residual_s
    return per_node


def eval_energy(
    plan: Plan,
    specs: Mapping[str, FunctionSpec],
    workload: EpochWorkload,
    cluster: ClusterSpec,
    env: EnvironmentState,
    epoch_length_s: float,
    retired: Sequence[ContainerAlloc] = (),
) -> EnergyBreakdown:
    """
    Node IT energy from utilisation (base cores over the container lifetime plus
    per-request cores while in flight), cooling via the effective COP, and a
    fixed startup energy per new container. `retired` containers occupy their
    base cores for the shutdown residual at the start of the epoch.
    """
    busy = [b for _, b in _profiles(plan, specs, cluster.overhead, epoch_length_s)]
    per_node = _busy_per_node(plan, busy, retired, specs, cluster, epoch_length_s)
    n_new = sum(1 for a in plan.allocations if a.is_new)
    return _energy_from_busy(per_node, n_new, cluster, env, epoch_length_s)


def eval_water(energy: EnergyBreakdown, env: EnvironmentState) -> float:
    return env.wue_l_per_kwh * energy.it_energy_kwh + env.ewif_l_per_kwh * energy.total_kwh


def eval_carbon(energy: EnergyBreakdown, water_l: float, env: EnvironmentState) -> float:
    return (
        env.carbon_intensity_g_per_kwh * energy.total_kwh
        + env.carbon_per_liter_water_g * water_l
    )


def assess(
    plan: Plan,
    specs: Mapping[str, FunctionSpec],
    workload: EpochWorkload,
    cluster: ClusterSpec,
    env: EnvironmentState,
    epoch_length_s: float,
    previous_plan: Optional[Plan] = None,
) -> Assessment:
    """Full evaluation of a plan; `evaluate` keeps only the objective vector."""
    marked = diff_new_containers(plan, previous_plan)
    report = feasible(marked, cluster, workload, specs)
    if not report:
        raise EvaluationError(f"Refusing to evaluate an infeasible plan, {report}")

    profiles = _profiles(marked, specs, cluster.overhead, epoch_length_s)
    violations = sum(v for v, _ in profiles)
    arrivals = workload.total_requests

    per_node = _busy_per_node(
        marked,
        [b for _, b in profiles],
        retired_containers(marked, previous_plan),
        specs,
        cluster,
        epoch_length_s,
    )
    n_new = sum(1 for a in marked.allocations if a.is_new)
    energy = _energy_from_busy(per_node, n_new, cluster, env, epoch_length_s)
    water = eval_water(energy, env)
    carbon = eval_carbon(energy, water, env)
    objectives = ObjectiveVector(violations / arrivals if arrivals else 0.0, carbon, water)
    return Assessment(objectives, violations, arrivals, energy, water, marked)


def evaluate(
    plan: Plan,
    specs: Mapping[str, FunctionSpec],
    workload: EpochWorkload,
    cluster: ClusterSpec,
    env: EnvironmentState,
    epoch_length_s: float,
    previous_plan: Optional[Plan] = None,
) -> ObjectiveVector:
    return assess(
        plan, specs, workload, cluster, env, epoch_length_s, previous_plan
    ).objectives
