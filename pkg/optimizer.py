"""
Population-based plan search: history-guided local search on a weighted-sum
scalarisation, interleaved with an evolutionary round that breeds offspring
from searched and unsearched members and lets them replace dominated ones.
Every evaluated plan is offered to an external Pareto archive, from which the
per-variant plans are finally selected.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cluster import (
    ClusterSpec,
    ContainerAlloc,
    Plan,
    cores_for_slots,
    random_plan,
    rebalance,
    retarget_plan,
    spec_of,
    split_evenly,
)
from errors import ConfigError
from sustain import EnvironmentState, ObjectiveVector, evaluate
from workload import EpochWorkload, FunctionSpec

logger = logging.getLogger(__name__)

NORM_EPSILON = 1e-9
MOVES = ("add", "remove", "shuffle")


class Weights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    w_slo: float = Field(1.0, ge=0)
    w_carbon: float = Field(1.0, ge=0)
    w_water: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _one_positive(self) -> Weights:
        if not (self.w_slo > 0 or self.w_carbon > 0 or self.w_water > 0):
            raise ValueError("at least one weight must be > 0")
        return self

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_slo, self.w_carbon, self.w_water)


VARIANT_WEIGHTS: dict[str, Weights] = {
    "slo": Weights(w_slo=1.0, w_carbon=0.0, w_water=0.0),
    "carbon": Weights(w_slo=0.0, w_carbon=1.0, w_water=0.0),
    "water": Weights(w_slo=0.0, w_carbon=0.0, w_water=1.0),
    "balance": Weights(w_slo=1.0, w_carbon=1.0, w_water=1.0),
}
BALANCED = VARIANT_WEIGHTS["balance"]


class SearchBudget(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    population_size: int = Field(5, ge=1)
    rounds: int = Field(40, ge=0)
    local_steps_per_round: int = Field(50, ge=0)
    ls_fraction: float = Field(0.4, gt=0, le=1)
    seed: int = 7
    warm_start: bool = False
    workers: int = Field(1, ge=1)

    @property
    def start_points(self) -> int:
        return max(1, math.floor(self.ls_fraction * self.population_size + 0.5))


@dataclass(frozen=True)
class PopulationMember:
    plan: Plan
    objectives: ObjectiveVector
    history_count: int = 0


@dataclass(frozen=True)
class ArchiveEntry:
    objectives: ObjectiveVector
    plan: Plan


@dataclass(frozen=True)
class EvalContext:
    """Everything `evaluate` needs besides the plan."""

    specs: Mapping[str, FunctionSpec]
    workload: EpochWorkload
    cluster: ClusterSpec
    env: EnvironmentState
    epoch_length_s: float
    previous_plan: Optional[Plan] = None
    workers: int = 1

    def evaluate(self, plan: Plan) -> ObjectiveVector:
        return evaluate(
            plan,
            self.specs,
            self.workload,
            self.cluster,
            self.env,
            self.epoch_length_s,
            self.previous_plan,
        )

    def evaluate_many(self, plans: Sequence[Plan]) -> list[ObjectiveVector]:
        if self.workers > 1 and len(plans) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(self.evaluate, plans))
        return [self.evaluate(p) for p in plans]


def dominates(a: ObjectiveVector, b: ObjectiveVector) -> bool:
    """a <= b on every objective and a < b on at least one (minimisation)."""
    ta, tb = a.as_tuple(), b.as_tuple()
    return all(x <= y for x, y in zip(ta, tb)) and ta != tb


def safe_norms(norms: ObjectiveVector) -> ObjectiveVector:
    """Replace zero components by a small epsilon so they can divide."""
    return ObjectiveVector(*(x if x > 0 else NORM_EPSILON for x in norms.as_tuple()))


def weighted_sum(obj: ObjectiveVector, weights: Weights, norms: ObjectiveVector) -> float:
    """Normalised weighted sum of the objectives; lower is better."""
    n = norms.as_tuple()
    if min(n) <= 0:
        raise ConfigError(f"Normalisation divisors must be > 0, got {n}")
    return sum(w * (x / d) for w, x, d in zip(weights.as_tuple(), obj.as_tuple(), n))


class ParetoArchive:
    """
    Non-dominated set of every evaluated point, in insertion order. Duplicate
    objective vectors are kept once (first plan wins).
    """

    def __init__(self) -> None:
        self._entries: list[ArchiveEntry] = []

    def add(self, objectives: ObjectiveVector, plan: Plan) -> bool:
        for entry in self._entries:
            if entry.objectives == objectives or dominates(entry.objectives, objectives):
                return False
        self._entries = [e for e in self._entries if not dominates(objectives, e.objectives)]
        self._entries.append(ArchiveEntry(objectives, plan))
        return True

    def objectives(self) -> list[ObjectiveVector]:
        return [e.objectives for e in self._entries]

    def __iter__(self) -> Iterator[ArchiveEntry]:
        return iter(list(self._entries))

    def __len__(self) -> int:
        return len(self._entries)


def _add_container(
    plan: Plan,
    spec: FunctionSpec,
    n_requests: int,
    cluster: ClusterSpec,
    rng: np.random.Generator,
) -> Optional[Plan]:
    group = plan.group(spec.id)
    free_cores, free_mem = plan.free_capacity(cluster)
    nodes = np.flatnonzero(
        (free_cores >= cores_for_slots(spec, 1)) & (free_mem >= spec.mem_mb)
    )
    if nodes.size == 0:
        return None
    node = int(rng.choice(nodes))
    share = split_evenly(n_requests, len(group) + 1)[-1]
    cores = min(cores_for_slots(spec, max(1, share)), int(free_cores[node]))
    added = ContainerAlloc(spec.id, node, cores, spec.mem_mb)
    return plan.with_group(spec.id, rebalance(group + [added], n_requests))


def _remove_container(
    plan: Plan,
    spec: FunctionSpec,
    n_requests: int,
    cluster: ClusterSpec,
    rng: np.random.Generator,
) -> Optional[Plan]:
    group = plan.group(spec.id)
    if len(group) < 2:
        return None
    victim = int(rng.integers(len(group)))
    siblings = group[:victim] + group[victim + 1 :]
    free_cores, _ = plan.with_group(spec.id, siblings).free_capacity(cluster)

    grown = []
    for alloc, share in zip(siblings, split_evenly(n_requests, len(siblings))):
        # grow each sibling toward its pre-move batch count, within node capacity
        batches = max(1, math.ceil(alloc.assigned_requests / max(1, alloc.slots(spec))))
        want = cores_for_slots(spec, math.ceil(share / batches))
        extra = min(max(0, want - alloc.cores), int(free_cores[alloc.node_id]))
        free_cores[alloc.node_id] -= extra
        grown.append(replace(alloc, cores=alloc.cores + extra, assigned_requests=share))
    return plan.with_group(spec.id, grown)


def _shuffle_container(
    plan: Plan,
    spec: FunctionSpec,
    n_requests: int,
    cluster: ClusterSpec,
    rng: np.random.Generator,
) -> Optional[Plan]:
    group = plan.group(spec.id)
    if not group:
        return None
    idx = int(rng.integers(len(group)))
    alloc = group[idx]
    free_cores, free_mem = plan.free_capacity(cluster)
    fits = (free_cores >= alloc.cores) & (free_mem >= alloc.mem_mb)
    fits[alloc.node_id] = False
    nodes = np.flatnonzero(fits)
    if nodes.size == 0:
        return None
    group[idx] = replace(alloc, node_id=int(rng.choice(nodes)))
    return plan.with_group(spec.id, group)


_MOVE_IMPLS = {
    "add": _add_container,
    "remove": _remove_container,
    "shuffle": _shuffle_container,
}


def local_move(
    plan: Plan,
    specs: Mapping[str, FunctionSpec],
    workload: EpochWorkload,
    cluster: ClusterSpec,
    rng: np.random.Generator,
) -> Plan:
    """
    One random neighbour of a feasible plan. Draws a function id, then a move
    type; a move that cannot produce a feasible neighbour falls through to the
    next type in add -> remove -> shuffle order (cyclic). Returns `plan` itself
    when no move applies.
    """
    fids = workload.function_ids
    if not fids:
        return plan
    fid = fids[int(rng.integers(len(fids)))]
    spec = spec_of(specs, fid)
    first = int(rng.integers(len(MOVES)))
    for offset in range(len(MOVES)):
        move = MOVES[(first + offset) % len(MOVES)]
        neighbour = _MOVE_IMPLS[move](plan, spec, workload.count(fid), cluster, rng)
        if neighbour is not None:
            return neighbour
    return plan


def local_search(
    member: PopulationMember,
    steps: int,
    weights: Weights,
    norms: ObjectiveVector,
    ctx: EvalContext,
    rng: np.random.Generator,
    visited: Optional[list[ArchiveEntry]] = None,
) -> PopulationMember:
    """
    Greedy descent: a neighbour replaces the current member only when its
    weighted sum is strictly lower, and each acceptance bumps history_count.
    Evaluated neighbours are appended to `visited` when given.
    """
    current = member
    score = weighted_sum(current.objectives, weights, norms)
    for _ in range(steps):
        neighbour = local_move(current.plan, ctx.specs, ctx.workload, ctx.cluster, rng)
        if neighbour is current.plan:
            continue
        objectives = ctx.evaluate(neighbour)
        if visited is not None:
            visited.append(ArchiveEntry(objectives, neighbour))
        candidate = weighted_sum(objectives, weights, norms)
        if candidate < score:
            score = candidate
            current = PopulationMember(neighbour, objectives, current.history_count + 1)
    return current


def select_start_points(population: Sequence[PopulationMember], k: int) -> list[int]:
    """Indices of the k members with the highest history_count, in index order."""
    ranked = sorted(range(len(population)), key=lambda i: (-population[i].history_count, i))
    return sorted(ranked[:k])


def crossover(
    parent_a: Plan,
    parent_b: Plan,
    workload: EpochWorkload,
    cluster: ClusterSpec,
    rng: np.random.Generator,
) -> Optional[Plan]:
    """
    Inherit each function's whole container group from either parent (one coin
    per function id, sorted order). Containers overflowing their node are
    moved first-fit to the lowest-indexed node with room; None when that fails.
    """
    groups_a, groups_b = parent_a.groups(), parent_b.groups()
    chosen = {
        fid: list((groups_a if rng.random() < 0.5 else groups_b)[fid])
        for fid in workload.function_ids
    }

    free_cores = np.full(cluster.n_nodes, cluster.node.cores, dtype=np.int64)
    free_mem = np.full(cluster.n_nodes, cluster.node.mem_mb, dtype=np.int64)
    overflow = []
    for fid in sorted(chosen):
        for i, alloc in enumerate(chosen[fid]):
            node = alloc.node_id
            if free_cores[node] >= alloc.cores and free_mem[node] >= alloc.mem_mb:
                free_cores[node] -= alloc.cores
                free_mem[node] -= alloc.mem_mb
            else:
                overflow.append((fid, i))

    for fid, i in overflow:
        alloc = chosen[fid][i]
        nodes = np.flatnonzero((free_cores >= alloc.cores) & (free_mem >= alloc.mem_mb))
        if nodes.size == 0:
            logger.debug("Offspring discarded: no node fits a %d-core container of %s", alloc.cores, fid)
            return None
        node = int(nodes[0])
        free_cores[node] -= alloc.cores
        free_mem[node] -= alloc.mem_mb
        chosen[fid][i] = replace(alloc, node_id=node)
    return Plan.from_groups(chosen)


def ea_round(
    population: Sequence[PopulationMember],
    searched: Sequence[int],
    rng: np.random.Generator,
    ctx: EvalContext,
    archive: Optional[ParetoArchive] = None,
) -> tuple[list[PopulationMember], list[int]]:
    """
    Pair every searched member with a uniformly drawn unsearched one and breed
    an offspring. An offspring replaces the first member (index order) it
    dominates, resetting that slot's history; otherwise it is dropped.
    Returns the new population and the replaced indices.
    """
    population = list(population)
    unsearched = [i for i in range(len(population)) if i not in searched]
    if not unsearched or not searched:
        return population, []

    # all draws happen before any offspring is evaluated
    partners = rng.choice(unsearched, size=len(searched))
    children = rng.spawn(len(searched))
    offspring = [
        crossover(population[s].plan, population[int(p)].plan, ctx.workload, ctx.cluster, child)
        for s, p, child in zip(searched, partners, children)
    ]
    bred = [plan for plan in offspring if plan is not None]
    scored = ctx.evaluate_many(bred)

    replaced = []
    for plan, objectives in zip(bred, scored):
        if archive is not None:
            archive.add(objectives, plan)
        for i, member in enumerate(population):
            if dominates(objectives, member.objectives):
                population[i] = PopulationMember(plan, objectives, 0)
                replaced.append(i)
                break
    return population, replaced


def select_variants(
    archive: ParetoArchive,
    weights_set: Mapping[str, Weights],
    norms: ObjectiveVector,
) -> dict[str, ArchiveEntry]:
    """
    Archive member minimising each variant's weighted sum. Ties go to the lower
    balanced score, then to archive order.
    """
    candidates = list(archive)
    if not candidates:
        return {}
    selected = {}
    for name, weights in weights_set.items():
        best = min(
            range(len(candidates)),
            key=lambda i: (
                weighted_sum(candidates[i].objectives, weights, norms),
                weighted_sum(candidates[i].objectives, BALANCED, norms),
                i,
            ),
        )
        selected[name] = candidates[best]
    return selected


@dataclass(frozen=True)
class EpochOptimization:
    archive: ParetoArchive
    selections: dict[str, ArchiveEntry]
    population: tuple[PopulationMember, ...]
    norms: ObjectiveVector


def _local_search_all(
    population: Sequence[PopulationMember],
    searched: Sequence[int],
    budget: SearchBudget,
    weights: Weights,
    norms: ObjectiveVector,
    ctx: EvalContext,
    rng: np.random.Generator,
) -> list[tuple[PopulationMember, list[ArchiveEntry]]]:
    children = rng.spawn(len(searched))

    def run(job: tuple[int, np.random.Generator]) -> tuple[PopulationMember, list[ArchiveEntry]]:
        index, child = job
        visited: list[ArchiveEntry] = []
        found = local_search(
            population[index], budget.local_steps_per_round, weights, norms, ctx, child, visited
        )
        return found, visited

    jobs = list(zip(searched, children))
    if budget.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=budget.workers) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


def optimize_epoch(
    workload: EpochWorkload,
    specs: Mapping[str, FunctionSpec],
    cluster: ClusterSpec,
    env: EnvironmentState,
    budget: SearchBudget,
    weights_set: Mapping[str, Weights],
    previous_plan: Optional[Plan],
    epoch_length_s: float,
    norms: Optional[ObjectiveVector] = None,
    search_weights: Weights = BALANCED,
    start_plan: Optional[Plan] = None,
) -> EpochOptimization:
    """
    Search one epoch. The population starts from random plans (slot 0 from
    `start_plan` retargeted to this workload when warm starting) and runs
    `budget.rounds` of local search on the most updated members followed by an
    evolutionary round. Without `norms` the component-wise maximum of the
    initial population normalises the weighted sums.
    """
    rng = np.random.default_rng([budget.seed, workload.epoch_index])
    ctx = EvalContext(
        specs, workload, cluster, env, epoch_length_s, previous_plan, budget.workers
    )

    children = rng.spawn(budget.population_size)
    plans = [random_plan(cluster, specs, workload, child) for child in children]
    if budget.warm_start and start_plan is not None:
        plans[0] = retarget_plan(start_plan, workload, specs, cluster, children[0])
    scores = ctx.evaluate_many(plans)
    population = [PopulationMember(p, o) for p, o in zip(plans, scores)]
    archive = ParetoArchive()
    for member in population:
        archive.add(member.objectives, member.plan)

    if norms is None:
        norms = ObjectiveVector(
            *(max(axis) for axis in zip(*(m.objectives.as_tuple() for m in population)))
        )
    norms = safe_norms(norms)

    k = min(budget.start_points, len(population))
    for round_index in range(budget.rounds):
        searched = select_start_points(population, k)
        for index, (found, visited) in zip(
            searched,
            _local_search_all(population, searched, budget, search_weights, norms, ctx, rng),
        ):
            population[index] = found
            for entry in visited:
                archive.add(entry.objectives, entry.plan)

        before = len(archive)
        population, replaced = ea_round(population, searched, rng, ctx, archive)
        logger.debug(
            "epoch %d round %d: best score %.6f, archive %d (+%d from offspring), replaced %s",
            workload.epoch_index,
            round_index,
            min(weighted_sum(m.objectives, search_weights, norms) for m in population),
            len(archive),
            len(archive) - before,
            replaced,
        )

    selections = select_variants(archive, weights_set, norms)
    logger.info(
        "epoch %d: archive of %d plans after %d rounds",
        workload.epoch_index,
        len(archive),
        budget.rounds,
    )
    return EpochOptimization(archive, selections, tuple(population), norms)
