"""Cluster description, container allocations and the scheduling + autoscaling Plan."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator

from errors import CapacityError, ConfigError
from workload import EpochWorkload, FunctionSpec

logger = logging.getLogger(__name__)

# Slack for floor/ceil on fractional core counts (0.25-core steps are exact,
# other profiles may carry representation error).
SLOT_EPS = 1e-9
MAX_RANDOM_CONTAINERS = 8
MAX_RANDOM_BATCHES = 4


class NodeSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    cores: int = Field(128, ge=1)
    mem_mb: int = Field(262144, ge=1)
    p_idle_w: float = Field(100.0, gt=0)
    p_max_w: float = Field(500.0, gt=0)

    @model_validator(mode="after")
    def _check_power(self) -> NodeSpec:
        if not self.p_idle_w < self.p_max_w:
            raise ValueError(
                f"p_idle_w={self.p_idle_w} must be below p_max_w={self.p_max_w}"
            )
        return self


class OverheadSpec(BaseModel):
    """Container lifecycle costs; idle usage is cpu_base_cores of the function."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    cold_start_s: float = Field(2.0, ge=0)
    shutdown_s: float = Field(0.0, ge=0)
    startup_energy_j: float = Field(500.0, ge=0)


class ClusterSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_nodes: int = Field(50, ge=1)
    node: NodeSpec = Field(default_factory=NodeSpec)
    overhead: OverheadSpec = Field(default_factory=OverheadSpec)


def slots_for(spec: FunctionSpec, cores: int) -> int:
    """Number of requests a container of `cores` cores serves in parallel."""
    return max(
        0,
        math.floor(
            (cores - spec.cpu_base_cores) / spec.cpu_per_request_cores + SLOT_EPS
        ),
    )


def cores_for_slots(spec: FunctionSpec, slots: int) -> int:
    """Smallest integer core count giving at least `slots` parallel slots."""
    return max(
        1,
        math.ceil(spec.cpu_base_cores + slots * spec.cpu_per_request_cores - SLOT_EPS),
    )


def split_evenly(total: int, parts: int) -> list[int]:
    """Split `total` into `parts` counts differing by at most one, larger first."""
    q, r = divmod(total, parts)
    return [q + 1] * r + [q] * (parts - r)


@dataclass(frozen=True)
class ContainerAlloc:
    function_id: str
    node_id: int
    cores: int
    mem_mb: int
    assigned_requests: int = 0
    is_new: bool = True

    def slots(self, spec: FunctionSpec) -> int:
        return slots_for(spec, self.cores)


@dataclass(frozen=True)
class Plan:
    """
    One scheduling + autoscaling decision. Constructors in this repo keep the
    allocations grouped by function id in sorted order.
    """

    allocations: tuple[ContainerAlloc, ...] = ()

    @classmethod
    def from_groups(cls, groups: Mapping[str, Iterable[ContainerAlloc]]) -> Plan:
        return cls(tuple(a for fid in sorted(groups) for a in groups[fid]))

    def groups(self) -> dict[str, list[ContainerAlloc]]:
        out: dict[str, list[ContainerAlloc]] = {}
        for alloc in self.allocations:
            out.setdefault(alloc.function_id, []).append(alloc)
        return out

    def group(self, function_id: str) -> list[ContainerAlloc]:
        return [a for a in self.allocations if a.function_id == function_id]

    def with_group(self, function_id: str, allocs: Iterable[ContainerAlloc]) -> Plan:
        groups = self.groups()
        groups[function_id] = list(allocs)
        if not groups[function_id]:
            del groups[function_id]
        return Plan.from_groups(groups)

    def usage(self, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
        """Allocated (cores, mem_mb) per node."""
        cores = np.zeros(n_nodes, dtype=np.int64)
        mem = np.zeros(n_nodes, dtype=np.int64)
        for alloc in self.allocations:
            cores[alloc.node_id] += alloc.cores
            mem[alloc.node_id] += alloc.mem_mb
        return cores, mem

    def free_capacity(self, cluster: ClusterSpec) -> tuple[np.ndarray, np.ndarray]:
        cores, mem = self.usage(cluster.n_nodes)
        return cluster.node.cores - cores, cluster.node.mem_mb - mem

    def __len__(self) -> int:
        return len(self.allocations)


@dataclass(frozen=True)
class FeasibilityReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "feasible"
        return "infeasible:\n  " + "\n  ".join(self.violations)


def spec_of(specs: Mapping[str, FunctionSpec], function_id: str) -> FunctionSpec:
    try:
        return specs[function_id]
    except KeyError:
        raise ConfigError(f"No function profile for id '{function_id}'") from None


def feasible(
    plan: Plan,
    cluster: ClusterSpec,
    workload: EpochWorkload,
    specs: Optional[Mapping[str, FunctionSpec]] = None,
) -> FeasibilityReport:
    """
    Check every Plan invariant and report each violated constraint.

    Container sizing (at least one slot, memory equal to the profile) is only
    checked when `specs` is given.
    """
    violations: list[str] = []
    n = cluster.n_nodes
    cores = np.zeros(n, dtype=np.int64)
    mem = np.zeros(n, dtype=np.int64)
    assigned: Counter[str] = Counter()

    for alloc in plan.allocations:
        where = f"container of {alloc.function_id} on node {alloc.node_id}"
        if not 0 <= alloc.node_id < n:
            violations.append(f"{where}: node index outside [0, {n})")
            continue
        if alloc.cores < 1:
            violations.append(f"{where}: {alloc.cores} cores allocated")
        if alloc.assigned_requests < 0:
            violations.append(f"{where}: negative request count {alloc.assigned_requests}")
        cores[alloc.node_id] += alloc.cores
        mem[alloc.node_id] += alloc.mem_mb
        assigned[alloc.function_id] += alloc.assigned_requests

        if specs is None:
            continue
        spec = specs.get(alloc.function_id)
        if spec is None:
            violations.append(f"{where}: function has no profile")
            continue
        if alloc.slots(spec) < 1:
            violations.append(f"{where}: {alloc.cores} cores leave no request slot")
        if alloc.mem_mb != spec.mem_mb:
            violations.append(f"{where}: mem_mb {alloc.mem_mb} != profile {spec.mem_mb}")

    for node in np.flatnonzero(cores > cluster.node.cores):
        violations.append(
            f"node {node}: {cores[node]} cores allocated, capacity {cluster.node.cores}"
        )
    for node in np.flatnonzero(mem > cluster.node.mem_mb):
        violations.append(
            f"node {node}: {mem[node]} MB allocated, capacity {cluster.node.mem_mb}"
        )
    for fid in sorted(set(workload.arrivals) | set(assigned)):
        want, got = workload.count(fid), assigned.get(fid, 0)
        if want != got:
            violations.append(f"function {fid}: {got} of {want} requests assigned")

    return FeasibilityReport(tuple(violations))


def rebalance(group: list[ContainerAlloc], total: int) -> list[ContainerAlloc]:
    """Spread `total` requests evenly over the group, earliest containers first."""
    return [
        replace(alloc, assigned_requests=share)
        for alloc, share in zip(group, split_evenly(total, len(group)))
    ]


def first_fit(
    spec: FunctionSpec,
    cores: int,
    order: Iterable[int],
    free_cores: np.ndarray,
    free_mem: np.ndarray,
) -> Optional[int]:
    """First node in `order` with room for the container; reserves it there."""
    for node in order:
        if free_cores[node] >= cores and free_mem[node] >= spec.mem_mb:
            free_cores[node] -= cores
            free_mem[node] -= spec.mem_mb
            return int(node)
    return None


def _random_group(
    spec: FunctionSpec,
    n_requests: int,
    rng: np.random.Generator,
    order: np.ndarray,
    free_cores: np.ndarray,
    free_mem: np.ndarray,
) -> list[ContainerAlloc]:
    count = int(rng.integers(1, min(n_requests, MAX_RANDOM_CONTAINERS) + 1))
    batches = int(rng.integers(1, MAX_RANDOM_BATCHES + 1))
    group = []
    for share in split_evenly(n_requests, count):
        cores = cores_for_slots(spec, max(1, math.ceil(share / batches)))
        node = first_fit(spec, cores, order, free_cores, free_mem)
        if node is None:
            # fall back to a one-slot container before giving up
            cores = cores_for_slots(spec, 1)
            node = first_fit(spec, cores, order, free_cores, free_mem)
        if node is None:
            raise CapacityError(
                f"Cannot place a container of {spec.id} "
                f"({cores_for_slots(spec, 1)} cores, {spec.mem_mb} MB) on any node"
            )
        group.append(ContainerAlloc(spec.id, node, cores, spec.mem_mb, share))
    return group


def random_plan(
    cluster: ClusterSpec,
    specs: Mapping[str, FunctionSpec],
    workload: EpochWorkload,
    seed: int | np.random.Generator,
) -> Plan:
    """
    Random feasible plan. Per function: container count uniform in
    [1, min(arrivals, 8)], even request split, each container sized for
    ceil(share / b) slots with b uniform in [1, 4]; first-fit placement over
    one random node permutation.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(cluster.n_nodes)
    free_cores = np.full(cluster.n_nodes, cluster.node.cores, dtype=np.int64)
    free_mem = np.full(cluster.n_nodes, cluster.node.mem_mb, dtype=np.int64)
    groups = {
        fid: _random_group(
            spec_of(specs, fid), workload.count(fid), rng, order, free_cores, free_mem
        )
        for fid in workload.function_ids
    }
    return Plan.from_groups(groups)


def retarget_plan(
    plan: Plan,
    workload: EpochWorkload,
    specs: Mapping[str, FunctionSpec],
    cluster: ClusterSpec,
    seed: int | np.random.Generator,
    keep_absent: bool = False,
) -> Plan:
    """
    Fit an existing plan onto another epoch's arrivals: surviving functions keep
    their containers with requests re-split evenly, functions without containers
    get a random group placed first-fit.
    """
    rng = np.random.default_rng(seed)
    groups = {}
    for fid, group in plan.groups().items():
        if fid in workload.arrivals:
            groups[fid] = rebalance(group, workload.count(fid))
        elif keep_absent:
            groups[fid] = rebalance(group, 0)

    kept = Plan.from_groups(groups)
    free_cores, free_mem = kept.free_capacity(cluster)
    order = rng.permutation(cluster.n_nodes)
    for fid in workload.function_ids:
        if fid not in groups:
            groups[fid] = _random_group(
                spec_of(specs, fid), workload.count(fid), rng, order, free_cores, free_mem
            )
    return Plan.from_groups(groups)


def diff_new_containers(plan: Plan, previous: Optional[Plan]) -> Plan:
    """
    Mark containers without a counterpart in `previous` as new. Counterparts are
    matched per (function_id, node_id) with multiplicity; within a group the
    earliest containers inherit the warm state.
    """
    if previous is None:
        return Plan(tuple(replace(a, is_new=True) for a in plan.allocations))

    carried = Counter((a.function_id, a.node_id) for a in previous.allocations)
    marked = []
    for alloc in plan.allocations:
        key = (alloc.function_id, alloc.node_id)
        if carried[key] > 0:
            carried[key] -= 1
            marked.append(replace(alloc, is_new=False))
        else:
            marked.append(replace(alloc, is_new=True))
    return Plan(tuple(marked))


def retired_containers(plan: Plan, previous: Optional[Plan]) -> list[ContainerAlloc]:
    """Containers of `previous` that have no counterpart in `plan` (shut down)."""
    if previous is None:
        return []
    remaining = Counter((a.function_id, a.node_id) for a in plan.allocations)
    retired = []
    for alloc in previous.allocations:
        key = (alloc.function_id, alloc.node_id)
        if remaining[key] > 0:
            remaining[key] -= 1
        else:
            retired.append(alloc)
    return retired


_PLAN_ADAPTER = TypeAdapter(Plan)


def plan_to_json(plan: Plan) -> str:
    return _PLAN_ADAPTER.dump_json(plan, indent=2).decode()


def plan_from_json(text: str | bytes) -> Plan:
    return _PLAN_ADAPTER.validate_json(text)


def dump_plan(plan: Plan, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(plan_to_json(plan) + "\n")


def load_plan(path: str | Path) -> Plan:
    return plan_from_json(Path(path).read_text())
