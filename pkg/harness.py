"""
Epoch-by-epoch horizon simulation. Each policy plans every epoch from its own
carried state, the plan is evaluated against the actual arrivals and the
per-epoch objectives are recorded, aggregated and written out as CSV.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from baselines import BaselineConfig, hybrid_schedule, persistent_allocations, score_schedule
from cluster import ClusterSpec, Plan, dump_plan, retarget_plan
from errors import CapacityError, ConfigError, UsageError
from optimizer import (
    BALANCED,
    VARIANT_WEIGHTS,
    SearchBudget,
    Weights,
    dominates,
    optimize_epoch,
    weighted_sum,
)
from sustain import OBJECTIVE_AXES, Assessment, EnvironmentState, ObjectiveVector, assess
from workload import EpochWorkload, FunctionSpec, perturb_arrivals

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ["epoch", "policy", "slo_rate", "carbon_g", "water_l"]
AGGREGATE_COLUMNS = ["policy", "agg_slo", "agg_carbon_g", "agg_water_l"]
ARCHIVE_COLUMNS = ["plan_id", "slo_rate", "carbon_g", "water_l", "weighted_balance"]


@dataclass(frozen=True)
class EpochContext:
    """What a policy sees when it plans one epoch."""

    workload: EpochWorkload
    specs: Mapping[str, FunctionSpec]
    cluster: ClusterSpec
    env: EnvironmentState
    epoch_length_s: float
    previous_plan: Optional[Plan] = None


@dataclass(frozen=True)
class Decision:
    plan: Plan
    archive: tuple[ObjectiveVector, ...] = ()
    norms: Optional[ObjectiveVector] = None


class Policy:
    name = "policy"

    def reset(self) -> None:
        """Forget state kept across epochs."""

    def decide(self, ctx: EpochContext) -> Decision:
        raise NotImplementedError

    def carry(self, plan: Plan, ctx: EpochContext) -> Optional[Plan]:
        """Containers of `plan` that stay alive into the next epoch."""
        return plan


class ScorePolicy(Policy):
    name = "score"

    def __init__(self, config: BaselineConfig = BaselineConfig()):
        self.config = config

    def decide(self, ctx: EpochContext) -> Decision:
        return Decision(
            score_schedule(ctx.workload, ctx.specs, ctx.cluster, ctx.previous_plan, self.config)
        )


class HybridPolicy(Policy):
    name = "hybrid"

    def __init__(self, config: BaselineConfig = BaselineConfig()):
        self.config = config

    def decide(self, ctx: EpochContext) -> Decision:
        return Decision(
            hybrid_schedule(
                ctx.workload, ctx.specs, ctx.cluster, ctx.previous_plan, config=self.config
            )
        )

    def carry(self, plan: Plan, ctx: EpochContext) -> Optional[Plan]:
        return persistent_allocations(plan, ctx.specs, self.config.runtime_threshold_s)


class SfcmPolicy(Policy):
    """
    Optimizer-backed policy for one weighting variant. A private HYBRID run
    supplies the normalisation of every epoch.
    """

    def __init__(
        self,
        variant: str,
        budget: SearchBudget = SearchBudget(),
        baselines: BaselineConfig = BaselineConfig(),
        balance_weights: Weights = BALANCED,
    ):
        if variant not in VARIANT_WEIGHTS:
            raise UsageError(
                f"Unknown optimizer variant '{variant}'. Supported: {list(VARIANT_WEIGHTS)}"
            )
        self.variant = variant
        self.name = f"sfcm-{variant}"
        self.budget = budget
        self.weights = balance_weights if variant == "balance" else VARIANT_WEIGHTS[variant]
        self.shadow = HybridPolicy(baselines)
        self._shadow_previous: Optional[Plan] = None

    def reset(self) -> None:
        self._shadow_previous = None

    def _hybrid_objectives(self, ctx: EpochContext) -> Optional[ObjectiveVector]:
        previous = self._shadow_previous
        shadow_ctx = replace_previous(ctx, previous)
        try:
            plan = self.shadow.decide(shadow_ctx).plan
        except CapacityError as exc:
            logger.warning(
                "%s: normalising HYBRID run failed in epoch %d: %s",
                self.name,
                ctx.workload.epoch_index,
                exc,
            )
            self._shadow_previous = None
            return None
        self._shadow_previous = self.shadow.carry(plan, shadow_ctx)
        return assess(
            plan, ctx.specs, ctx.workload, ctx.cluster, ctx.env, ctx.epoch_length_s, previous
        ).objectives

    def decide(self, ctx: EpochContext) -> Decision:
        norms = self._hybrid_objectives(ctx)
        weights = self.weights
        result = optimize_epoch(
            ctx.workload,
            ctx.specs,
            ctx.cluster,
            ctx.env,
            self.budget,
            {self.variant: weights},
            ctx.previous_plan,
            ctx.epoch_length_s,
            norms=norms,
            search_weights=weights,
            start_plan=ctx.previous_plan,
        )
        chosen = result.selections[self.variant]
        return Decision(chosen.plan, tuple(result.archive.objectives()), result.norms)


def replace_previous(ctx: EpochContext, previous: Optional[Plan]) -> EpochContext:
    return EpochContext(
        ctx.workload, ctx.specs, ctx.cluster, ctx.env, ctx.epoch_length_s, previous
    )


POLICY_NAMES = ("score", "hybrid", "sfcm-slo", "sfcm-carbon", "sfcm-water", "sfcm-balance")


def make_policy(
    name: str,
    budget: SearchBudget = SearchBudget(),
    baselines: BaselineConfig = BaselineConfig(),
    balance_weights: Weights = BALANCED,
) -> Policy:
    if name == "score":
        return ScorePolicy(baselines)
    if name == "hybrid":
        return HybridPolicy(baselines)
    if name.startswith("sfcm-") and name.removeprefix("sfcm-") in VARIANT_WEIGHTS:
        return SfcmPolicy(name.removeprefix("sfcm-"), budget, baselines, balance_weights)
    raise UsageError(f"Unknown policy '{name}'. Supported: {list(POLICY_NAMES)}")


def parse_policies(
    text: str,
    budget: SearchBudget = SearchBudget(),
    baselines: BaselineConfig = BaselineConfig(),
    balance_weights: Weights = BALANCED,
) -> list[Policy]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    if not names:
        raise UsageError("No policy given")
    if len(set(names)) != len(names):
        raise UsageError(f"Duplicate policy in '{text}'")
    return [make_policy(n, budget, baselines, balance_weights) for n in names]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    policy: str
    objectives: ObjectiveVector
    violations: int
    arrivals: int
    failed: bool = False
    plan: Optional[Plan] = None
    archive: tuple[ObjectiveVector, ...] = ()
    norms: Optional[ObjectiveVector] = None


@dataclass(frozen=True)
class PolicyAggregate:
    policy: str
    slo_rate: float
    carbon_g: float
    water_l: float
    violations: int
    arrivals: int
    failed_epochs: int

    @property
    def objectives(self) -> ObjectiveVector:
        return ObjectiveVector(self.slo_rate, self.carbon_g, self.water_l)


@dataclass(frozen=True)
class HorizonResult:
    records: tuple[EpochRecord, ...] = field(default_factory=tuple)

    def policies(self) -> list[str]:
        return list(dict.fromkeys(r.policy for r in self.records))

    def epochs(self, policy: str) -> list[EpochRecord]:
        return [r for r in self.records if r.policy == policy]

    def aggregate(self, policy: str) -> PolicyAggregate:
        """Request-weighted SLO rate, summed carbon and water."""
        records = self.epochs(policy)
        violations = sum(r.violations for r in records)
        arrivals = sum(r.arrivals for r in records)
        return PolicyAggregate(
            policy=policy,
            slo_rate=violations / arrivals if arrivals else 0.0,
            carbon_g=math.fsum(r.objectives.carbon_g for r in records),
            water_l=math.fsum(r.objectives.water_l for r in records),
            violations=violations,
            arrivals=arrivals,
            failed_epochs=sum(r.failed for r in records),
        )

    def aggregates(self) -> list[PolicyAggregate]:
        return [self.aggregate(p) for p in self.policies()]


def _env_schedule(
    env: EnvironmentState | Sequence[EnvironmentState], n_epochs: int
) -> list[EnvironmentState]:
    if isinstance(env, EnvironmentState):
        return [env.for_epoch(e) for e in range(n_epochs)]
    if len(env) < n_epochs:
        raise ConfigError(f"Environment schedule covers {len(env)} epochs, {n_epochs} needed")
    return list(env[:n_epochs])


def horizon_epochs(horizon_s: float, epoch_length_s: float) -> int:
    n = math.floor(horizon_s / epoch_length_s)
    tail = horizon_s - n * epoch_length_s
    if tail > 0:
        logger.warning("Ignoring the last %.1f s of the horizon (shorter than one epoch)", tail)
    return n


def _failed_epoch(
    epoch: EpochWorkload,
    policy: str,
    specs: Mapping[str, FunctionSpec],
    cluster: ClusterSpec,
    env: EnvironmentState,
    epoch_length_s: float,
) -> EpochRecord:
    idle = assess(Plan(), specs, EpochWorkload(epoch.epoch_index), cluster, env, epoch_length_s)
    arrivals = epoch.total_requests
    objectives = ObjectiveVector(
        1.0 if arrivals else 0.0, idle.objectives.carbon_g, idle.objectives.water_l
    )
    return EpochRecord(epoch.epoch_index, policy, objectives, arrivals, arrivals, failed=True)


def run_policy(
    policy: Policy,
    epochs: Sequence[EpochWorkload],
    specs: Mapping[str, FunctionSpec],
    cluster: ClusterSpec,
    envs: Sequence[EnvironmentState],
    epoch_length_s: float,
    prediction_error: float = 0.0,
    prediction_seed: int = 0,
) -> list[EpochRecord]:
    """One policy over consecutive epochs, carrying its own previous plan."""
    policy.reset()
    previous: Optional[Plan] = None
    records = []
    for epoch, env in zip(epochs, envs):
        i = epoch.epoch_index
        planned_for = perturb_arrivals(
            epoch, prediction_error, np.random.default_rng([prediction_seed, i])
        )
        ctx = EpochContext(planned_for, specs, cluster, env, epoch_length_s, previous)
        try:
            decision = policy.decide(ctx)
            plan = decision.plan
            if planned_for is not epoch:
                rng = np.random.default_rng([prediction_seed, i, 1])
                plan = retarget_plan(plan, epoch, specs, cluster, rng, keep_absent=True)
            outcome: Assessment = assess(plan, specs, epoch, cluster, env, epoch_length_s, previous)
        except CapacityError as exc:
            logger.error("%s: epoch %d failed, counted as all-violations: %s", policy.name, i, exc)
            records.append(_failed_epoch(epoch, policy.name, specs, cluster, env, epoch_length_s))
            previous = None
            continue

        records.append(
            EpochRecord(
                epoch=i,
                policy=policy.name,
                objectives=outcome.objectives,
                violations=outcome.violations,
                arrivals=outcome.arrivals,
                plan=outcome.plan,
                archive=decision.archive,
                norms=decision.norms,
            )
        )
        logger.info("%s epoch %d: %s", policy.name, i, outcome.objectives)
        previous = policy.carry(outcome.plan, ctx)
    return records


def run_horizon(
    epochs: Sequence[EpochWorkload],
    specs: Mapping[str, FunctionSpec] | Sequence[FunctionSpec],
    policies: Sequence[Policy],
    cluster: ClusterSpec,
    env: EnvironmentState | Sequence[EnvironmentState],
    epoch_length_s: float,
    horizon_s: Optional[float] = None,
    prediction_error: float = 0.0,
    prediction_seed: int = 0,
) -> HorizonResult:
    """
    Simulate every policy over the horizon. Policies are isolated: each keeps
    its own previous plan and the order of `policies` never changes results.
    """
    if not epochs:
        raise ConfigError("The trace has no epochs to simulate")
    if not isinstance(specs, Mapping):
        specs = {s.id: s for s in specs}
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise UsageError(f"Policy names must be unique, got {names}")

    n = len(epochs)
    if horizon_s is not None:
        n = horizon_epochs(horizon_s, epoch_length_s)
        if n > len(epochs):
            raise ConfigError(
                f"Horizon of {n} epochs exceeds the {len(epochs)} epochs in the trace"
            )
        if n < len(epochs):
            logger.info("Simulating the first %d of %d trace epochs", n, len(epochs))
    epochs = list(epochs[:n])
    envs = _env_schedule(env, n)

    records: list[EpochRecord] = []
    for policy in policies:
        logger.info("Running %s over %d epochs", policy.name, n)
        records += run_policy(
            policy, epochs, specs, cluster, envs, epoch_length_s, prediction_error, prediction_seed
        )
    return HorizonResult(tuple(records))


def pareto_front(points: Sequence[ObjectiveVector]) -> list[ObjectiveVector]:
    """Non-dominated subset, in input order."""
    return [p for p in points if not any(dominates(q, p) for q in points)]


def check_axes(axes: Sequence[str]) -> tuple[str, str]:
    if len(axes) != 2:
        raise UsageError(f"Expected two axes, got {list(axes)}")
    for axis in axes:
        if axis not in OBJECTIVE_AXES:
            raise UsageError(f"Unknown objective axis '{axis}'. Supported: {list(OBJECTIVE_AXES)}")
    return axes[0], axes[1]


def project_front(
    front: Sequence[ObjectiveVector], axes: Sequence[str] = ("slo", "carbon")
) -> list[tuple[float, float]]:
    """
    Project onto two objectives and drop the points the projection makes
    dominated. Repeated 2-D points are kept once.
    """
    x_axis, y_axis = check_axes(axes)
    points = list(dict.fromkeys((p.axis(x_axis), p.axis(y_axis)) for p in front))

    def beats(a: tuple[float, float], b: tuple[float, float]) -> bool:
        return a[0] <= b[0] and a[1] <= b[1] and a != b

    return [p for p in points if not any(beats(q, p) for q in points)]


def _archive_frame(record: EpochRecord) -> pd.DataFrame:
    norms = record.norms
    rows = []
    for i, obj in enumerate(record.archive):
        balance = weighted_sum(obj, BALANCED, norms) if norms is not None else float("nan")
        rows.append((i, *obj.as_tuple(), balance))
    return pd.DataFrame(rows, columns=ARCHIVE_COLUMNS)


def archive_path(out_dir: str | Path, policy: str, epoch: int) -> Path:
    return Path(out_dir) / "pareto" / policy / f"epoch_{epoch:03d}.csv"


def write_results(result: HorizonResult, out_dir: str | Path, save_plans: bool = False) -> None:
    """
    epochs.csv, aggregate.csv, one archive CSV per optimizer epoch and,
    with `save_plans`, the plan JSON of every policy and epoch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    epoch_rows = [
        (r.epoch, r.policy, *r.objectives.as_tuple()) for r in result.records
    ]
    pd.DataFrame(epoch_rows, columns=EPOCH_COLUMNS).to_csv(
        out / "epochs.csv", index=False, lineterminator="\n"
    )
    agg_rows = [(a.policy, a.slo_rate, a.carbon_g, a.water_l) for a in result.aggregates()]
    pd.DataFrame(agg_rows, columns=AGGREGATE_COLUMNS).to_csv(
        out / "aggregate.csv", index=False, lineterminator="\n"
    )

    for record in result.records:
        if record.archive:
            path = archive_path(out, record.policy, record.epoch)
            path.parent.mkdir(parents=True, exist_ok=True)
            _archive_frame(record).to_csv(path, index=False, lineterminator="\n")
        if save_plans and record.plan is not None:
            dump_plan(record.plan, out / "plans" / record.policy / f"epoch_{record.epoch:03d}.json")
    logger.info("Wrote results for %d policies to %s", len(result.policies()), out)


def read_archive(path: str | Path) -> list[ObjectiveVector]:
    """Objective vectors of an archive CSV written by `write_results`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"No archive file at {path}")
    frame = pd.read_csv(path)
    missing = set(ARCHIVE_COLUMNS[1:4]) - set(frame.columns)
    if missing:
        raise ConfigError(f"{path}: missing columns {sorted(missing)}")
    return [
        ObjectiveVector(float(row.slo_rate), float(row.carbon_g), float(row.water_l))
        for row in frame.itertuples(index=False)
    ]


BASELINE_POLICIES = (ScorePolicy.name, HybridPolicy.name)
_EPOCH_AXIS_COLUMNS = dict(zip(OBJECTIVE_AXES, EPOCH_COLUMNS[2:]))


def baseline_points(
    run_dir: str | Path, epoch: int, axes: Sequence[str] = ("slo", "carbon")
) -> list[tuple[str, float, float]]:
    """(policy, x, y) of the SCORE and HYBRID rows of a run's `epochs.csv` for one epoch."""
    x_axis, y_axis = check_axes(axes)
    path = Path(run_dir) / "epochs.csv"
    if not path.is_file():
        raise ConfigError(f"No per-epoch results at {path}")
    frame = pd.read_csv(path)
    missing = set(EPOCH_COLUMNS) - set(frame.columns)
    if missing:
        raise ConfigError(f"{path}: missing columns {sorted(missing)}")
    rows = frame[(frame.epoch == epoch) & frame.policy.isin(BASELINE_POLICIES)]
    x_col, y_col = _EPOCH_AXIS_COLUMNS[x_axis], _EPOCH_AXIS_COLUMNS[y_axis]
    return [
        (str(row["policy"]), float(row[x_col]), float(row[y_col]))
        for _, row in rows.iterrows()
    ]
