"""
Brute-force references: per-request FIFO simulation and exhaustive plan
enumeration on tiny instances.
"""

import itertools
import math

from cluster import ClusterSpec, ContainerAlloc, Plan, cores_for_slots, feasible, slots_for, split_evenly
from sustain import EnvironmentState, ObjectiveVector, evaluate
from workload import EpochWorkload, FunctionSpec

from builders import make_cluster, make_spec

# Two nodes of five cores. fa needs 3 cores for one request slot and 5 for
# two, so two fa containers never share a node. A one-slot fa container still
# has its second request in flight when the epoch ends: one SLO violation for
# less energy, which gives the instance a two-point front.
ORACLE_EPOCH_S = 20.0


def oracle_instance() -> tuple[dict[str, FunctionSpec], EpochWorkload, ClusterSpec]:
    functions = [
        make_spec("fa", runtime_s=10.0, deadline_s=30.0, cpu_per_request_cores=2.0),
        make_spec("fb", runtime_s=4.0, deadline_s=12.0, cpu_base_cores=0.25, cpu_per_request_cores=0.25),
        make_spec("fc", runtime_s=6.0, deadline_s=18.0, cpu_base_cores=0.25, cpu_per_request_cores=0.25),
    ]
    specs = {f.id: f for f in functions}
    workload = EpochWorkload(0, {"fa": 2, "fb": 1, "fc": 1})
    return specs, workload, make_cluster(n_nodes=2, cores=5, mem_mb=4096)


def brute_force_violations(
    plan: Plan, specs: dict[str, FunctionSpec], cold_start_s: float, epoch_length_s: float
) -> int:
    violations = 0
    for a in plan.allocations:
        spec = specs[a.function_id]
        k = slots_for(spec, a.cores)
        cold = cold_start_s if a.is_new else 0.0
        for i in range(1, a.assigned_requests + 1):
            done = cold + math.ceil(i / k) * spec.runtime_s
            if done > spec.deadline_s or done > epoch_length_s:
                violations += 1
    return violations


def _group_options(
    spec: FunctionSpec, n_requests: int, cluster: ClusterSpec, max_containers: int
) -> list[list[ContainerAlloc]]:
    options = []
    for count in range(1, max_containers + 1):
        shares = split_evenly(n_requests, count)
        per_container = [
            [
                (node, cores_for_slots(spec, level), share)
                for node in range(cluster.n_nodes)
                for level in range(1, max(1, share) + 1)
                if cores_for_slots(spec, level) <= cluster.node.cores
            ]
            for share in shares
        ]
        for layout in itertools.product(*per_container):
            options.append(
                [ContainerAlloc(spec.id, node, cores, spec.mem_mb, share) for node, cores, share in layout]
            )
    return options


def enumerate_plans(
    specs: dict[str, FunctionSpec],
    workload: EpochWorkload,
    cluster: ClusterSpec,
    max_containers: int = 3,
) -> list[Plan]:
    """
    Every feasible plan with even request splits and up to `max_containers`
    per function, up to objective equivalence: each container takes the
    smallest core count of each slot level from one up to its share. Extra
    cores change no objective (busy time never reaches the allocation) and
    cannot make an infeasible layout feasible.
    """
    per_function = [
        _group_options(specs[fid], workload.count(fid), cluster, max_containers)
        for fid in workload.function_ids
    ]
    plans = []
    for combo in itertools.product(*per_function):
        plan = Plan.from_groups({group[0].function_id: group for group in combo})
        if feasible(plan, cluster, workload, specs):
            plans.append(plan)
    return plans


def rounded(v: ObjectiveVector, digits: int = 9) -> tuple[float, float, float]:
    """Objective vector with float summation noise rounded away."""
    return tuple(round(x, digits) for x in v.as_tuple())


def front_of(points: set[tuple[float, ...]]) -> set[tuple[float, ...]]:
    return {
        p
        for p in points
        if not any(all(x <= y for x, y in zip(q, p)) and q != p for q in points)
    }


def true_front(
    specs: dict[str, FunctionSpec],
    workload: EpochWorkload,
    cluster: ClusterSpec,
    env: EnvironmentState,
    epoch_length_s: float = ORACLE_EPOCH_S,
) -> tuple[set[tuple[float, float, float]], list[ObjectiveVector]]:
    """(rounded non-dominated vectors, all evaluated vectors) of the instance."""
    vectors = [
        evaluate(p, specs, workload, cluster, env, epoch_length_s)
        for p in enumerate_plans(specs, workload, cluster)
    ]
    return front_of({rounded(v) for v in vectors}), vectors


def reference_assessment(
    plan: Plan,
    specs: dict[str, FunctionSpec],
    workload: EpochWorkload,
    cluster: ClusterSpec,
    env: EnvironmentState,
    epoch_length_s: float,
    previous: Plan | None = None,
) -> tuple[ObjectiveVector, int, list[float]]:
    """
    (objectives, violations, node utilisations) of a plan, walked request by
    request: batch b of a container runs from cold + (b - 1) * runtime to
    cold + b * runtime and holds its per-request cores until then or the
    epoch end.
    """
    E = epoch_length_s
    unmatched = [(a.function_id, a.node_id) for a in previous.allocations] if previous else []
    busy = [0.0] * cluster.n_nodes
    violations = 0
    n_new = 0
    for a in plan.allocations:
        spec = specs[a.function_id]
        key = (a.function_id, a.node_id)
        if key in unmatched:
            unmatched.remove(key)
            cold = 0.0
        else:
            n_new += 1
            cold = cluster.overhead.cold_start_s
        k = slots_for(spec, a.cores)
        core_s = spec.cpu_base_cores * E
        for i in range(1, a.assigned_requests + 1):
            batch = (i - 1) // k + 1
            start = cold + (batch - 1) * spec.runtime_s
            end = cold + batch * spec.runtime_s
            if end > spec.deadline_s or end > E:
                violations += 1
            core_s += spec.cpu_per_request_cores * max(0.0, min(end, E) - start)
        busy[a.node_id] += min(core_s, a.cores * E)
    for fid, node in unmatched:
        busy[node] += specs[fid].cpu_base_cores * min(cluster.overhead.shutdown_s, E)

    capacity = cluster.node.cores * E
    swing = cluster.node.p_max_w - cluster.node.p_idle_w
    utilisation = [min(b, capacity) / capacity for b in busy]
    it_kwh = sum((cluster.node.p_idle_w + swing * u) * E for u in utilisation) / 3.6e6
    cop = env.cop_base
    if any(u > env.hotspot_util_threshold for u in utilisation):
        cop *= env.hotspot_cop_penalty
    total_kwh = it_kwh + it_kwh / cop + cluster.overhead.startup_energy_j * n_new / 3.6e6
    water = env.wue_l_per_kwh * it_kwh + env.ewif_l_per_kwh * total_kwh
    carbon = env.carbon_intensity_g_per_kwh * total_kwh + env.carbon_per_liter_water_g * water
    arrivals = workload.total_requests
    rate = violations / arrivals if arrivals else 0.0
    return ObjectiveVector(rate, carbon, water), violations, utilisation
