from pathlib import Path

import numpy as np
import pytest

from errors import ConfigError, TraceParseError, TraceSchemaError
from workload import (
    EpochWorkload,
    FunctionSpec,
    TraceConfig,
    generate_trace,
    ingest_trace,
    load_trace_config,
    perturb_arrivals,
    write_trace,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
HEADER = "id,runtime_s,deadline_s,mem_mb,cpu_base_cores,cpu_per_request_cores\n"


def write_dir(tmp_path: Path, functions: str, arrivals: str) -> Path:
    (tmp_path / "functions.csv").write_text(functions)
    (tmp_path / "arrivals.csv").write_text(arrivals)
    return tmp_path


def test_single_bucket(tmp_path):
    arrivals = "function_id,arrival_time_s\n" + "".join(
        f"f,{t}\n" for t in (0.0, 10.5, 300.0, 899.0, 899.999)
    )
    trace = write_dir(tmp_path, HEADER + "f,10,30,256,0.5,1.0\n", arrivals)
    epochs, functions = ingest_trace(trace, 900.0)
    assert functions == [FunctionSpec("f", 10.0, 30.0, 256, 0.5, 1.0)]
    assert epochs == [EpochWorkload(0, {"f": 5})]


def test_boundary_arrival_goes_to_next_epoch(tmp_path):
    arrivals = "function_id,arrival_time_s\nf,0\nf,900.0\n"
    trace = write_dir(tmp_path, HEADER + "f,10,30,256,0.5,1.0\n", arrivals)
    epochs, _ = ingest_trace(trace, 900.0)
    assert [w.arrivals for w in epochs] == [{"f": 1}, {"f": 1}]


def test_quiet_epochs_are_kept(tmp_path):
    arrivals = "function_id,arrival_time_s\nf,10\nf,2000\n"
    trace = write_dir(tmp_path, HEADER + "f,10,30,256,0.5,1.0\n", arrivals)
    epochs, _ = ingest_trace(trace, 900.0)
    assert [w.epoch_index for w in epochs] == [0, 1, 2]
    assert epochs[1].arrivals == {}


def test_empty_arrivals(tmp_path):
    trace = write_dir(tmp_path, HEADER + "f,10,30,256,0.5,1.0\n", "function_id,arrival_time_s\n")
    epochs, functions = ingest_trace(trace, 900.0)
    assert epochs == []
    assert len(functions) == 1


def test_malformed_row_reports_line(tmp_path):
    functions = HEADER + "f,10,30,256,0.5,1.0\ng,ten,30,256,0.5,1.0\n"
    trace = write_dir(tmp_path, functions, "function_id,arrival_time_s\n")
    with pytest.raises(TraceParseError) as exc:
        ingest_trace(trace, 900.0)
    assert exc.value.line == 3


def test_negative_arrival_time_reports_line(tmp_path):
    arrivals = "function_id,arrival_time_s\nf,1\nf,-4\n"
    trace = write_dir(tmp_path, HEADER + "f,10,30,256,0.5,1.0\n", arrivals)
    with pytest.raises(TraceParseError) as exc:
        ingest_trace(trace, 900.0)
    assert exc.value.line == 3


def test_invalid_utf8_reports_line(tmp_path):
    trace = write_dir(tmp_path, HEADER + "f,10,30,256,0.5,1.0\n", "")
    (trace / "arrivals.csv").write_bytes(b"function_id,arrival_time_s\nf,1\n\xff\xfe,2.0\n")
    with pytest.raises(TraceParseError) as exc:
        ingest_trace(trace, 900.0)
    assert exc.value.line == 3
    assert exc.value.path == str(trace / "arrivals.csv")


def test_unknown_function_is_a_schema_error(tmp_path):
    arrivals = "function_id,arrival_time_s\nf,1\nghost,2\n"
    trace = write_dir(tmp_path, HEADER + "f,10,30,256,0.5,1.0\n", arrivals)
    with pytest.raises(TraceSchemaError) as exc:
        ingest_trace(trace, 900.0)
    assert exc.value.line == 3
    assert "ghost" in str(exc.value)


def test_deadline_below_runtime_rejected(tmp_path):
    trace = write_dir(tmp_path, HEADER + "f,10,5,256,0.5,1.0\n", "function_id,arrival_time_s\n")
    with pytest.raises(TraceSchemaError):
        ingest_trace(trace, 900.0)


def test_duplicate_function_id(tmp_path):
    functions = HEADER + "f,10,30,256,0.5,1.0\nf,20,60,256,0.5,1.0\n"
    trace = write_dir(tmp_path, functions, "function_id,arrival_time_s\n")
    with pytest.raises(TraceSchemaError) as exc:
        ingest_trace(trace, 900.0)
    assert exc.value.line == 3


def test_wrong_header(tmp_path):
    trace = write_dir(tmp_path, "name,runtime\nf,10\n", "function_id,arrival_time_s\n")
    with pytest.raises(TraceParseError) as exc:
        ingest_trace(trace, 900.0)
    assert exc.value.line == 1


def test_missing_trace_file(tmp_path):
    with pytest.raises(ConfigError):
        ingest_trace(tmp_path, 900.0)


def test_generation_is_deterministic(tmp_path):
    cfg = TraceConfig(n_function_ids=424, epochs=32, seed=7)
    first = generate_trace(cfg)
    second = generate_trace(cfg)
    assert first == second

    write_trace(tmp_path / "a", *first, cfg.epoch_length_s)
    write_trace(tmp_path / "b", *second, cfg.epoch_length_s)
    for name in ("functions.csv", "arrivals.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_other_seed_changes_trace():
    a = generate_trace(TraceConfig(n_function_ids=50, epochs=2, seed=1))
    b = generate_trace(TraceConfig(n_function_ids=50, epochs=2, seed=2))
    assert a != b


def test_default_trace_statistics():
    epochs, functions = generate_trace(TraceConfig())
    assert len(functions) == 424
    assert len(epochs) == 32
    short = np.mean([f.runtime_s < 30 for f in functions])
    assert 0.87 <= short <= 0.93
    for w in epochs:
        assert 13 <= len(w.function_ids) <= 62
        assert all(c >= 1 for c in w.arrivals.values())
    assert all(f.deadline_s >= f.runtime_s for f in functions)


def test_band_clipped_to_function_count():
    epochs, _ = generate_trace(TraceConfig(n_function_ids=20, epochs=1, ids_per_epoch=(13, 62)))
    assert 13 <= len(epochs[0].function_ids) <= 20


def test_infeasible_band():
    with pytest.raises(ConfigError):
        generate_trace(TraceConfig(n_function_ids=10, epochs=1, ids_per_epoch=(13, 62)))


def test_config_rejects_unknown_field(tmp_path):
    path = tmp_path / "trace.json"
    path.write_text('{"n_function_ids": 10, "colour": "red"}')
    with pytest.raises(ConfigError):
        load_trace_config(path)


def test_written_trace_ingests_back(tmp_path):
    cfg = TraceConfig(n_function_ids=30, epochs=3, ids_per_epoch=(5, 10), seed=11)
    epochs, functions = generate_trace(cfg)
    write_trace(tmp_path, epochs, functions, cfg.epoch_length_s)
    read_epochs, read_functions = ingest_trace(tmp_path, cfg.epoch_length_s)
    assert read_functions == functions
    assert [w.arrivals for w in read_epochs] == [w.arrivals for w in epochs]


def test_small_scenario():
    epochs, functions = ingest_trace(SCENARIOS / "small", 900.0)
    assert [f.id for f in functions] == ["fa", "fb", "fc", "fd"]
    assert [w.arrivals for w in epochs] == [
        {"fa": 3, "fb": 3, "fd": 1},
        {"fa": 2, "fc": 4, "fd": 2},
        {"fa": 5, "fb": 2, "fc": 1},
    ]


def test_perturbation_stays_in_band():
    workload = EpochWorkload(4, {"a": 10, "b": 1, "c": 40})
    rng = np.random.default_rng(0)
    predicted = perturb_arrivals(workload, 0.2, rng)
    assert predicted.epoch_index == 4
    assert predicted.function_ids == workload.function_ids
    for fid, count in workload.arrivals.items():
        assert max(1, round(count * 0.8) - 1) <= predicted.count(fid) <= round(count * 1.2) + 1

    assert perturb_arrivals(workload, 0.0, rng) is workload


def test_epoch_workload_rejects_zero_counts():
    with pytest.raises(ValueError):
        EpochWorkload(0, {"f": 0})
