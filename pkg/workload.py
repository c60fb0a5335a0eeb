"""
Serverless workloads: function profiles, per-epoch arrival counts, trace CSV
ingest/emission and a seeded synthetic generator shaped after the published
Azure Functions trace statistics.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError, TraceParseError, TraceSchemaError

logger = logging.getLogger(__name__)

FUNCTIONS_FILE = "functions.csv"
ARRIVALS_FILE = "arrivals.csv"
FUNCTION_COLUMNS = [
    "id",
    "runtime_s",
    "deadline_s",
    "mem_mb",
    "cpu_base_cores",
    "cpu_per_request_cores",
]
ARRIVAL_COLUMNS = ["function_id", "arrival_time_s"]

# Boundary between short- and long-running functions.
SHORT_RUNTIME_S = 30.0
SECONDS_PER_DAY = 86400.0


@dataclass(frozen=True)
class FunctionSpec:
    """Static profile of one function id."""

    id: str
    runtime_s: float
    deadline_s: float
    mem_mb: int
    cpu_base_cores: float
    cpu_per_request_cores: float

    def __post_init__(self):
        if not self.runtime_s > 0:
            raise ValueError(f"{self.id}: runtime_s must be > 0, got {self.runtime_s}")
        if self.deadline_s < self.runtime_s:
            raise ValueError(
                f"{self.id}: deadline_s={self.deadline_s} is below runtime_s={self.runtime_s}"
            )
        if not self.mem_mb > 0:
            raise ValueError(f"{self.id}: mem_mb must be > 0, got {self.mem_mb}")
        if self.cpu_base_cores < 0:
            raise ValueError(
                f"{self.id}: cpu_base_cores must be >= 0, got {self.cpu_base_cores}"
            )
        if not self.cpu_per_request_cores > 0:
            raise ValueError(
                f"{self.id}: cpu_per_request_cores must be > 0, got {self.cpu_per_request_cores}"
            )

    @property
    def is_short(self) -> bool:
        return self.runtime_s < SHORT_RUNTIME_S


@dataclass(frozen=True)
class EpochWorkload:
    """Arrival counts of one epoch. All requests arrive at the epoch start."""

    epoch_index: int
    arrivals: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.epoch_index < 0:
            raise ValueError(f"epoch_index must be >= 0, got {self.epoch_index}")
        for fid, count in self.arrivals.items():
            if count < 1:
                raise ValueError(
                    f"epoch {self.epoch_index}: function {fid} listed with count {count}"
                )
        # Keep a sorted copy so iteration order never depends on the caller.
        object.__setattr__(self, "arrivals", dict(sorted(self.arrivals.items())))

    @property
    def function_ids(self) -> list[str]:
        return list(self.arrivals)

    @property
    def total_requests(self) -> int:
        return sum(self.arrivals.values())

    def count(self, function_id: str) -> int:
        return self.arrivals.get(function_id, 0)


class TraceConfig(BaseModel):
    """Parameters of the synthetic trace generator (JSON section `trace`)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_function_ids: int = Field(424, ge=1)
    epochs: int = Field(32, ge=0)
    epoch_length_s: float = Field(900.0, gt=0)
    short_fraction: float = Field(0.9, ge=0.0, le=1.0)
    short_runtime_s: tuple[float, float] = (0.1, SHORT_RUNTIME_S)
    long_runtime_s: tuple[float, float] = (SHORT_RUNTIME_S, 300.0)
    slack_factor: float = Field(3.0, ge=1.0)
    ids_per_epoch: tuple[int, int] = (13, 62)
    arrivals_median: float = Field(12.0, gt=0)
    arrivals_sigma: float = Field(1.0, ge=0)
    max_arrivals_per_function: int = Field(150, ge=1)
    diurnal_amplitude: float = Field(0.3, ge=0.0, lt=1.0)
    mem_mb_choices: tuple[int, ...] = (128, 256, 512, 1024, 2048)
    cpu_base_choices: tuple[float, ...] = (0.25, 0.5)
    cpu_per_request_choices: tuple[float, ...] = (0.25, 0.5, 1.0)
    prediction_error: float = Field(0.0, ge=0.0, lt=1.0)
    seed: int = 7

    @model_validator(mode="after")
    def _check_ranges(self) -> TraceConfig:
        s_lo, s_hi = self.short_runtime_s
        l_lo, l_hi = self.long_runtime_s
        if not 0 < s_lo < s_hi <= SHORT_RUNTIME_S:
            raise ValueError(f"short_runtime_s must lie in (0, {SHORT_RUNTIME_S}]")
        if not SHORT_RUNTIME_S <= l_lo < l_hi:
            raise ValueError(f"long_runtime_s must start at or above {SHORT_RUNTIME_S}")
        lo, hi = self.ids_per_epoch
        if not 1 <= lo <= hi:
            raise ValueError(f"ids_per_epoch band {self.ids_per_epoch} is empty")
        if not (self.mem_mb_choices and self.cpu_base_choices and self.cpu_per_request_choices):
            raise ValueError("resource choice lists must be non-empty")
        if min(self.cpu_per_request_choices) <= 0 or min(self.mem_mb_choices) <= 0:
            raise ValueError("per-request cores and memory choices must be positive")
        return self


def load_trace_config(path: str | Path) -> TraceConfig:
    try:
        return TraceConfig.model_validate_json(Path(path).read_text())
    except (OSError, ValidationError) as exc:
        raise ConfigError(f"Could not load trace config {path}: {exc}") from exc


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate_trace(cfg: TraceConfig) -> tuple[list[EpochWorkload], list[FunctionSpec]]:
    """
    Sample function profiles and per-epoch arrivals.

    Runtimes come from a two-mode log-uniform mixture; exactly
    round(short_fraction * n) functions are drawn from the short mode. Every
    epoch activates a number of distinct ids drawn uniformly from the
    configured band (clipped to n_function_ids), and each active id receives a
    Poisson count around its lognormal base intensity, modulated by a daily
    sine wave.
    """
    n = cfg.n_function_ids
    lo, hi = cfg.ids_per_epoch
    if lo > n:
        raise ConfigError(
            f"ids_per_epoch minimum {lo} exceeds n_function_ids={n}; band is infeasible"
        )
    hi = min(hi, n)
    rng = np.random.default_rng(cfg.seed)

    is_short = np.zeros(n, dtype=bool)
    is_short[: _round_half_up(cfg.short_fraction * n)] = True
    rng.shuffle(is_short)

    s_lo, s_hi = np.log(cfg.short_runtime_s)
    l_lo, l_hi = np.log(cfg.long_runtime_s)
    u = rng.random(n)
    log_runtime = np.where(is_short, s_lo + u * (s_hi - s_lo), l_lo + u * (l_hi - l_lo))
    runtimes = np.round(np.exp(log_runtime), 3)
    runtimes = np.where(
        is_short,
        # rounding must not push a short runtime onto the 30 s boundary
        np.clip(runtimes, cfg.short_runtime_s[0], cfg.short_runtime_s[1] - 1e-3),
        np.clip(runtimes, cfg.long_runtime_s[0], cfg.long_runtime_s[1]),
    )

    mem = rng.choice(np.asarray(cfg.mem_mb_choices), size=n)
    base = rng.choice(np.asarray(cfg.cpu_base_choices), size=n)
    per_request = rng.choice(np.asarray(cfg.cpu_per_request_choices), size=n)
    intensity = cfg.arrivals_median * np.exp(cfg.arrivals_sigma * rng.standard_normal(n))

    width = len(str(n - 1))
    ids = [f"f{i:0{width}d}" for i in range(n)]
    functions = [
        FunctionSpec(
            id=ids[i],
            runtime_s=float(runtimes[i]),
            deadline_s=max(float(runtimes[i]), round(cfg.slack_factor * float(runtimes[i]), 3)),
            mem_mb=int(mem[i]),
            cpu_base_cores=float(base[i]),
            cpu_per_request_cores=float(per_request[i]),
        )
        for i in range(n)
    ]

    epochs = []
    for e in range(cfg.epochs):
        phase = 2 * math.pi * e * cfg.epoch_length_s / SECONDS_PER_DAY
        scale = 1.0 + cfg.diurnal_amplitude * math.sin(phase)
        k = int(rng.integers(lo, hi + 1))
        chosen = np.sort(rng.choice(n, size=k, replace=False))
        counts = np.clip(rng.poisson(intensity[chosen] * scale), 1, cfg.max_arrivals_per_function)
        epochs.append(
            EpochWorkload(e, {ids[i]: int(c) for i, c in zip(chosen, counts)})
        )

    measured = float(np.mean(runtimes < SHORT_RUNTIME_S))
    logger.info(
        "Generated %d functions (short fraction %.3f) over %d epochs, %d requests",
        n,
        measured,
        len(epochs),
        sum(w.total_requests for w in epochs),
    )
    return epochs, functions


def perturb_arrivals(
    workload: EpochWorkload, error: float, rng: np.random.Generator
) -> EpochWorkload:
    """Predicted arrivals: each count scaled by a factor in [1 - error, 1 + error]."""
    if error <= 0 or not workload.arrivals:
        return workload
    factors = rng.uniform(1.0 - error, 1.0 + error, size=len(workload.arrivals))
    predicted = {
        fid: max(1, _round_half_up(count * f))
        for (fid, count), f in zip(workload.arrivals.items(), factors)
    }
    return EpochWorkload(workload.epoch_index, predicted)


_PANDAS_LINE_RE = re.compile(r"line (\d+)")


def _read_csv(path: Path, columns: list[str]) -> pd.DataFrame:
    if not path.is_file():
        raise ConfigError(f"Trace file not found: {path}")
    raw = path.read_bytes()
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise TraceParseError(path, line, f"not valid UTF-8: {exc.reason}") from exc
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)
    except pd.errors.ParserError as exc:
        m = _PANDAS_LINE_RE.search(str(exc))
        raise TraceParseError(path, int(m.group(1)) if m else 0, str(exc)) from exc
    if list(frame.columns) != columns:
        raise TraceParseError(
            path, 1, f"expected header {','.join(columns)}, got {','.join(frame.columns)}"
        )
    return frame.fillna("")


def _first_bad_row(mask: pd.Series) -> int | None:
    rows = np.flatnonzero(mask.to_numpy())
    # +2: one for the header, one for 1-based numbering
    return int(rows[0]) + 2 if len(rows) else None


def read_functions(path: str | Path) -> list[FunctionSpec]:
    path = Path(path)
    frame = _read_csv(path, FUNCTION_COLUMNS)
    numeric = frame[FUNCTION_COLUMNS[1:]].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | (frame["id"].str.strip() == "")
    if (line := _first_bad_row(bad)) is not None:
        raise TraceParseError(path, line, f"malformed function row {frame.iloc[line - 2].tolist()}")
    duplicated = frame["id"].duplicated()
    if (line := _first_bad_row(duplicated)) is not None:
        raise TraceSchemaError(path, line, f"duplicate function id '{frame['id'].iloc[line - 2]}'")

    functions = []
    for i, (fid, row) in enumerate(zip(frame["id"], numeric.itertuples(index=False))):
        if not float(row.mem_mb).is_integer():
            raise TraceSchemaError(path, i + 2, f"mem_mb must be an integer, got {row.mem_mb}")
        try:
            functions.append(
                FunctionSpec(
                    id=fid.strip(),
                    runtime_s=float(row.runtime_s),
                    deadline_s=float(row.deadline_s),
                    mem_mb=int(row.mem_mb),
                    cpu_base_cores=float(row.cpu_base_cores),
                    cpu_per_request_cores=float(row.cpu_per_request_cores),
                )
            )
        except ValueError as exc:
            raise TraceSchemaError(path, i + 2, str(exc)) from exc
    return functions


def read_arrivals(
    path: str | Path, functions: list[FunctionSpec], epoch_length_s: float
) -> list[EpochWorkload]:
    """Bucket arrivals into half-open epochs [k * L, (k + 1) * L)."""
    if not epoch_length_s > 0:
        raise ConfigError(f"epoch_length_s must be > 0, got {epoch_length_s}")
    path = Path(path)
    frame = _read_csv(path, ARRIVAL_COLUMNS)
    if frame.empty:
        return []
    frame["function_id"] = frame["function_id"].str.strip()
    times = pd.to_numeric(frame["arrival_time_s"], errors="coerce")
    bad = times.isna() | (times < 0) | (frame["function_id"] == "")
    if (line := _first_bad_row(bad)) is not None:
        raise TraceParseError(path, line, f"malformed arrival row {frame.iloc[line - 2].tolist()}")
    known = {f.id for f in functions}
    unknown = ~frame["function_id"].isin(known)
    if (line := _first_bad_row(unknown)) is not None:
        raise TraceSchemaError(
            path,
            line,
            f"arrival references unknown function id '{frame['function_id'].iloc[line - 2]}'",
        )

    epoch = np.floor(times.to_numpy(dtype=float) / epoch_length_s).astype(int)
    counts = frame.assign(epoch=epoch).groupby(["epoch", "function_id"]).size()
    buckets: list[dict[str, int]] = [{} for _ in range(int(epoch.max()) + 1)]
    for (e, fid), c in counts.items():
        buckets[int(e)][fid] = int(c)
    return [EpochWorkload(e, arrivals) for e, arrivals in enumerate(buckets)]


def ingest_trace(
    path: str | Path, epoch_length_s: float
) -> tuple[list[EpochWorkload], list[FunctionSpec]]:
    """
    Load a trace directory holding functions.csv and arrivals.csv.

    Args:
        path: Directory with the two CSV files
        epoch_length_s: Epoch length used for bucketing arrivals

    Returns:
        (epochs, functions); epochs is contiguous from index 0, quiet epochs
        between busy ones appear with empty arrivals.
    """
    path = Path(path)
    functions = read_functions(path / FUNCTIONS_FILE)
    epochs = read_arrivals(path / ARRIVALS_FILE, functions, epoch_length_s)
    logger.info(
        "Ingested %d functions and %d epochs from %s", len(functions), len(epochs), path
    )
    return epochs, functions


def write_trace(
    out_dir: str | Path,
    epochs: list[EpochWorkload],
    functions: list[FunctionSpec],
    epoch_length_s: float,
) -> None:
    """Write the two-file CSV trace; arrivals are stamped at their epoch start."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        [
            (f.id, f.runtime_s, f.deadline_s, f.mem_mb, f.cpu_base_cores, f.cpu_per_request_cores)
            for f in functions
        ],
        columns=FUNCTION_COLUMNS,
    ).to_csv(out_dir / FUNCTIONS_FILE, index=False, lineterminator="\n")

    rows = [
        (fid, w.epoch_index * epoch_length_s)
        for w in epochs
        for fid, count in w.arrivals.items()
        for _ in range(count)
    ]
    pd.DataFrame(rows, columns=ARRIVAL_COLUMNS).to_csv(
        out_dir / ARRIVALS_FILE, index=False, lineterminator="\n"
    )
