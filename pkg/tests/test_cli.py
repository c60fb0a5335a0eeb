from pathlib import Path

import pandas as pd
import pytest

import simulate
from harness import ARCHIVE_COLUMNS, archive_path

SMALL = Path(__file__).resolve().parent.parent / "scenarios" / "small"
DEFAULT = Path(__file__).resolve().parent.parent / "scenarios" / "default"


def run_small(out: Path, *extra: str) -> int:
    return simulate.main(
        ["run", "--config", str(SMALL / "config.json"), "--trace", str(SMALL), "--out", str(out), *extra]
    )


def test_generate_defaults(tmp_path):
    assert simulate.main(["generate", "--out", str(tmp_path / "trace")]) == 0
    functions = pd.read_csv(tmp_path / "trace" / "functions.csv")
    assert len(functions) == 424
    assert (tmp_path / "trace" / "arrivals.csv").is_file()


def test_generate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        args = ["generate", "--seed", "7", "--epochs", "4", "--out", str(tmp_path / name)]
        assert simulate.main(args) == 0
    for name in ("functions.csv", "arrivals.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_creates_nested_out_dir(tmp_path):
    out = tmp_path / "x" / "y" / "z"
    assert simulate.main(["generate", "--functions", "30", "--epochs", "2", "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "functions.csv")) == 30


def test_run_two_policies(tmp_path):
    assert run_small(tmp_path / "out", "--policies", "score,hybrid") == 0
    epochs = pd.read_csv(tmp_path / "out" / "epochs.csv")
    assert sorted(set(epochs.policy)) == ["hybrid", "score"]
    assert len(epochs) == 6
    assert (tmp_path / "out" / "run.log").is_file()


def test_run_epoch_override(tmp_path):
    assert run_small(tmp_path / "out", "--policies", "score", "--epochs", "2") == 0
    assert list(pd.read_csv(tmp_path / "out" / "epochs.csv").epoch) == [0, 1]


def test_run_is_byte_identical(tmp_path):
    policies = ["--policies", "score,hybrid,sfcm-balance", "--save-plans"]
    assert run_small(tmp_path / "a", *policies) == 0
    assert run_small(tmp_path / "b", *policies) == 0
    written = sorted(
        p.relative_to(tmp_path / "a")
        for p in (tmp_path / "a").rglob("*")
        if p.is_file() and p.name != "run.log"
    )
    assert Path("epochs.csv") in written
    assert Path("pareto/sfcm-balance/epoch_002.csv") in written
    for rel in written:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_unknown_policy(tmp_path, capsys):
    assert run_small(tmp_path / "out", "--policies", "score,magic") == 1
    assert "magic" in capsys.readouterr().err


def test_bad_config(tmp_path):
    config = tmp_path / "config.json"
    config.write_text('{"cluster": {"n_nodes": 0}}')
    assert simulate.main(["run", "--config", str(config), "--out", str(tmp_path / "out")]) == 2
    assert simulate.main(["run", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_malformed_trace(tmp_path):
    trace = tmp_path / "trace"
    trace.mkdir()
    (trace / "functions.csv").write_text("id,runtime_s\nf,1\n")
    (trace / "arrivals.csv").write_text("function_id,arrival_time_s\n")
    args = ["run", "--trace", str(trace), "--out", str(tmp_path / "out"), "--policies", "score"]
    assert simulate.main(args) == 2


def test_non_utf8_trace(tmp_path):
    trace = tmp_path / "trace"
    trace.mkdir()
    (trace / "functions.csv").write_bytes(
        b"id,runtime_s,deadline_s,mem_mb,cpu_base_cores,cpu_per_request_cores\nf\xe9,1,5,256,0.5,1.0\n"
    )
    (trace / "arrivals.csv").write_text("function_id,arrival_time_s\n")
    args = ["run", "--trace", str(trace), "--out", str(tmp_path / "out"), "--policies", "score"]
    assert simulate.main(args) == 2


def test_missing_subcommand_is_a_usage_error():
    assert simulate.main([]) == 1
    assert simulate.main(["run"]) == 1


def test_pareto_after_run(tmp_path):
    out = tmp_path / "out"
    assert run_small(out, "--policies", "hybrid,sfcm-balance") == 0
    assert simulate.main(["pareto", "--run", str(out), "--epoch", "1"]) == 0
    front = pd.read_csv(out / "pareto" / "sfcm-balance" / "front_slo_carbon_epoch_001.csv")
    assert list(front.columns) == ["slo", "carbon"]
    points = list(zip(front.slo, front.carbon))
    assert points
    assert not any(
        a != b and a[0] <= b[0] and a[1] <= b[1] for a in points for b in points
    )


def test_pareto_invalid_axis(tmp_path):
    assert simulate.main(["pareto", "--run", str(tmp_path), "--epoch", "0", "--axes", "slo,energy"]) == 1


def _write_archive(run_dir: Path, rows: list[tuple[float, float, float]]) -> None:
    path = archive_path(run_dir, "sfcm-balance", 0)
    path.parent.mkdir(parents=True)
    frame = pd.DataFrame(
        [(i, *row, float("nan")) for i, row in enumerate(rows)], columns=ARCHIVE_COLUMNS
    )
    frame.to_csv(path, index=False)


def test_pareto_singleton(tmp_path):
    _write_archive(tmp_path, [(0.25, 40.0, 3.0)])
    target = tmp_path / "front.csv"
    args = ["pareto", "--run", str(tmp_path), "--epoch", "0", "--out", str(target)]
    assert simulate.main(args) == 0
    assert pd.read_csv(target).values.tolist() == [[0.25, 40.0]]


def test_pareto_projection(tmp_path):
    _write_archive(
        tmp_path, [(0.1, 10.0, 1.0), (0.2, 5.0, 9.0), (0.3, 12.0, 0.5), (0.1, 10.0, 3.0)]
    )
    target = tmp_path / "front.csv"
    args = ["pareto", "--run", str(tmp_path), "--epoch", "0", "--axes", "carbon,water"]
    assert simulate.main([*args, "--out", str(target)]) == 0
    assert pd.read_csv(target).values.tolist() == [[10.0, 1.0], [5.0, 9.0], [12.0, 0.5]]


def test_pareto_with_baselines(tmp_path):
    out = tmp_path / "out"
    assert run_small(out, "--policies", "score,hybrid,sfcm-balance") == 0
    target = tmp_path / "front.csv"
    args = ["pareto", "--run", str(out), "--epoch", "1", "--axes", "carbon,water", "--baselines"]
    assert simulate.main([*args, "--out", str(target)]) == 0
    front = pd.read_csv(target)
    assert list(front.columns) == ["carbon", "water", "source"]
    assert list(front.source[front.source != "front"]) == ["score", "hybrid"]
    assert (front.source == "front").any()

    epochs = pd.read_csv(out / "epochs.csv").set_index(["epoch", "policy"])
    for row in front[front.source != "front"].itertuples(index=False):
        assert row.carbon == pytest.approx(epochs.loc[(1, row.source), "carbon_g"])
        assert row.water == pytest.approx(epochs.loc[(1, row.source), "water_l"])


def test_pareto_baselines_need_epoch_results(tmp_path):
    _write_archive(tmp_path, [(0.1, 1.0, 1.0)])
    args = ["pareto", "--run", str(tmp_path), "--epoch", "0", "--baselines"]
    assert simulate.main(args) == 2


def test_pareto_missing_archive(tmp_path):
    _write_archive(tmp_path, [(0.1, 1.0, 1.0)])
    assert simulate.main(["pareto", "--run", str(tmp_path), "--epoch", "5"]) == 2


def _aggregates(out: Path) -> dict[str, tuple[float, float, float]]:
    frame = pd.read_csv(out / "aggregate.csv")
    return {
        row.policy: (row.agg_slo, row.agg_carbon_g, row.agg_water_l)
        for row in frame.itertuples(index=False)
    }


@pytest.mark.slow
def test_default_scenario_optimizer_beats_baselines(tmp_path):
    out = tmp_path / "out"
    args = [
        "run",
        "--config",
        str(DEFAULT / "config.json"),
        "--seed",
        "7",
        "--out",
        str(out),
        "--policies",
        "score,hybrid,sfcm-slo,sfcm-balance",
    ]
    assert simulate.main(args) == 0
    agg = _aggregates(out)
    balance, hybrid = agg["sfcm-balance"], agg["hybrid"]
    assert all(b <= h for b, h in zip(balance, hybrid))
    assert agg["sfcm-slo"][0] <= agg["score"][0]


@pytest.mark.slow
def test_default_scenario_is_reproducible(tmp_path):
    for name in ("a", "b"):
        args = [
            "run",
            "--config",
            str(DEFAULT / "config.json"),
            "--out",
            str(tmp_path / name),
            "--policies",
            "score,hybrid,sfcm-balance",
        ]
        assert simulate.main(args) == 0
    for name in ("epochs.csv", "aggregate.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
