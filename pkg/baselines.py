"""
Reference schedulers. SCORE autoscales every function to a fixed batch target
and places containers on the least-allocated node. HYBRID keeps a persistent,
always-warm pool for long-running functions and schedules short ones like SCORE.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from typing import Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from cluster import ClusterSpec, ContainerAlloc, NodeSpec, Plan, cores_for_slots, rebalance, spec_of
from errors import CapacityError
from workload import SHORT_RUNTIME_S, EpochWorkload, FunctionSpec

logger = logging.getLogger(__name__)


class BaselineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    target_batch: int = Field(4, ge=1)
    runtime_threshold_s: float = Field(SHORT_RUNTIME_S, gt=0)


def least_allocated_node(
    cores: int,
    mem_mb: int,
    free_cores: np.ndarray,
    free_mem: np.ndarray,
    node: NodeSpec,
) -> Optional[int]:
    """
    Node with the highest 0.5 * free core fraction + 0.5 * free memory fraction
    among those that fit the container; lowest index on ties.
    """
    fits = (free_cores >= cores) & (free_mem >= mem_mb)
    if not fits.any():
        return None
    score = 0.5 * free_cores / node.cores + 0.5 * free_mem / node.mem_mb
    return int(np.argmax(np.where(fits, score, -np.inf)))


class _Placer:
    def __init__(self, cluster: ClusterSpec, occupied: Optional[Plan] = None):
        self.cluster = cluster
        if occupied is None:
            occupied = Plan()
        self.free_cores, self.free_mem = occupied.free_capacity(cluster)

    def place(self, spec: FunctionSpec, cores: int) -> ContainerAlloc:
        node = least_allocated_node(
            cores, spec.mem_mb, self.free_cores, self.free_mem, self.cluster.node
        )
        if node is None:
            raise CapacityError(
                f"No node has room for a {cores}-core, {spec.mem_mb} MB container of {spec.id}"
            )
        self.free_cores[node] -= cores
        self.free_mem[node] -= spec.mem_mb
        return ContainerAlloc(spec.id, node, cores, spec.mem_mb)

    def scaled_group(self, spec: FunctionSpec, n_requests: int, target_batch: int) -> list[ContainerAlloc]:
        count = math.ceil(n_requests / target_batch)
        cores = cores_for_slots(spec, target_batch)
        return rebalance([self.place(spec, cores) for _ in range(count)], n_requests)


def score_schedule(
    workload: EpochWorkload,
    specs: Mapping[str, FunctionSpec],
    cluster: ClusterSpec,
    previous_plan: Optional[Plan] = None,
    config: BaselineConfig = BaselineConfig(),
) -> Plan:
    """
    ceil(arrivals / target_batch) containers of target_batch slots per function,
    requests split evenly, each placed by least-allocated scoring in sorted
    function order. Containers never outlive their epoch, so `previous_plan`
    only matters to evaluation (warm matches by node).
    """
    placer = _Placer(cluster)
    groups = {
        fid: placer.scaled_group(spec_of(specs, fid), workload.count(fid), config.target_batch)
        for fid in workload.function_ids
    }
    return Plan.from_groups(groups)


def persistent_allocations(
    plan: Optional[Plan], specs: Mapping[str, FunctionSpec], runtime_threshold_s: float
) -> Plan:
    """The long-function containers of a plan: HYBRID's never-stopping pool."""
    if plan is None:
        return Plan()
    return Plan(
        tuple(
            a
            for a in plan.allocations
            if spec_of(specs, a.function_id).runtime_s >= runtime_threshold_s
        )
    )


def hybrid_schedule(
    workload: EpochWorkload,
    specs: Mapping[str, FunctionSpec],
    cluster: ClusterSpec,
    previous_plan: Optional[Plan],
    runtime_threshold_s: Optional[float] = None,
    config: BaselineConfig = BaselineConfig(),
) -> Plan:
    """
    Long functions (runtime >= threshold) keep every container of the previous
    pool, idle or not, and grow the pool when their arrivals need more than it
    holds. Short functions get fresh SCORE-style containers each epoch.
    """
    threshold = config.runtime_threshold_s if runtime_threshold_s is None else runtime_threshold_s
    pool = persistent_allocations(previous_plan, specs, threshold)
    pool_groups = pool.groups()
    placer = _Placer(cluster, occupied=pool)

    groups: dict[str, list[ContainerAlloc]] = {}
    for fid in sorted(set(pool_groups) | set(workload.function_ids)):
        spec = spec_of(specs, fid)
        n = workload.count(fid)
        if spec.runtime_s < threshold:
            groups[fid] = placer.scaled_group(spec, n, config.target_batch)
            continue
        group = [replace(a, assigned_requests=0) for a in pool_groups.get(fid, [])]
        missing = math.ceil(n / config.target_batch) - len(group)
        if missing > 0:
            cores = cores_for_slots(spec, config.target_batch)
            group += [placer.place(spec, cores) for _ in range(missing)]
            logger.debug("Persistent pool of %s grows by %d containers", fid, missing)
        groups[fid] = rebalance(group, n)
    return Plan.from_groups(groups)
