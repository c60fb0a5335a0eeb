# simulate.py
import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from config import load_config
from errors import SimulationError, UsageError
from harness import (
    POLICY_NAMES,
    archive_path,
    baseline_points,
    check_axes,
    parse_policies,
    project_front,
    read_archive,
    run_horizon,
    write_results,
)
from workload import generate_trace, ingest_trace, write_trace

logger = logging.getLogger("simulate")

GREEN = "\x1b[32m"
RED = "\x1b[31m"
BLUE = "\x1b[34m"
RESET = "\x1b[0m"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    parser.add_argument("--seed", type=int, help="seed for trace generation and search")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="simulate",
        description="FaaS cluster simulator with multi-objective plan search",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write a synthetic trace")
    _common(gen)
    gen.add_argument("--out", required=True, help="directory for functions.csv and arrivals.csv")
    gen.add_argument("--epochs", type=int, help="number of epochs to generate")
    gen.add_argument("--functions", type=int, help="number of function ids")

    run = sub.add_parser("run", help="simulate policies over a horizon")
    _common(run)
    run.add_argument("--out", required=True, help="result directory")
    run.add_argument("--trace", help="trace directory; generated from the config if omitted")
    run.add_argument(
        "--policies",
        default="score,hybrid,sfcm-balance",
        help=f"comma separated, from {','.join(POLICY_NAMES)}",
    )
    run.add_argument("--epochs", type=int, help="horizon length in epochs")
    run.add_argument("--functions", type=int, help="number of generated function ids")
    run.add_argument("--save-plans", action="store_true", help="write each selected plan as JSON")

    pareto = sub.add_parser("pareto", help="2-D projection of an epoch's archive")
    _common(pareto)
    pareto.add_argument("--run", required=True, help="output directory of a previous run")
    pareto.add_argument("--epoch", type=int, required=True)
    pareto.add_argument("--axes", default="slo,carbon", help="two of slo, carbon, water")
    pareto.add_argument("--policy", help="optimizer policy whose archive to read")
    pareto.add_argument("--out", help="front CSV (defaults next to the archive)")
    pareto.add_argument(
        "--baselines",
        action="store_true",
        help="append the epoch's score and hybrid points, with a source column",
    )
    return parser


def cmd_generate(args) -> int:
    config = load_config(args.config).with_overrides(args.seed, args.epochs, args.functions)
    epochs, functions = generate_trace(config.trace)
    write_trace(args.out, epochs, functions, config.epoch_length_s)
    print(
        f"{GREEN}Wrote {len(functions)} functions and "
        f"{sum(e.total_requests for e in epochs)} arrivals over {len(epochs)} epochs "
        f"to {args.out}{RESET}"
    )
    return 0


def _attach_run_log(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def cmd_run(args) -> int:
    out = Path(args.out)
    config = load_config(args.config).with_overrides(args.seed, args.epochs, args.functions)
    policies = parse_policies(args.policies, config.budget, config.baselines, config.weights)
    handler = _attach_run_log(out)
    try:
        logger.info("Config: %s", config.model_dump_json())
        length = config.epoch_length_s
        if args.trace:
            epochs, functions = ingest_trace(args.trace, length)
        else:
            epochs, functions = generate_trace(config.trace)

        horizon_s = config.horizon_s
        if args.epochs is None and horizon_s > len(epochs) * length:
            logger.warning(
                "Trace covers %d epochs, shorter than the %.0f s horizon; simulating all of it",
                len(epochs),
                horizon_s,
            )
            horizon_s = len(epochs) * length

        print(f"{BLUE}Simulating {', '.join(p.name for p in policies)}{RESET}")
        result = run_horizon(
            epochs,
            functions,
            policies,
            config.cluster,
            config.env,
            length,
            horizon_s=horizon_s,
            prediction_error=config.trace.prediction_error,
            prediction_seed=config.trace.seed,
        )
        write_results(result, out, save_plans=args.save_plans)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()

    print(f"{'policy':<14}{'slo_rate':>10}{'carbon_g':>14}{'water_l':>12}")
    for agg in result.aggregates():
        colour = RED if agg.failed_epochs else GREEN
        print(
            f"{colour}{agg.policy:<14}{agg.slo_rate:>10.4f}"
            f"{agg.carbon_g:>14.2f}{agg.water_l:>12.3f}{RESET}"
        )
        if agg.failed_epochs:
            print(f"{RED}  {agg.failed_epochs} failed epochs{RESET}")
    print(f"{GREEN}Results written to {out}{RESET}")
    return 0


def _pick_policy(run_dir: Path, policy) -> str:
    if policy:
        return policy
    found = sorted(p.name for p in (run_dir / "pareto").glob("*") if p.is_dir())
    if len(found) == 1:
        return found[0]
    if "sfcm-balance" in found:
        return "sfcm-balance"
    raise UsageError(f"Pass --policy, the run has archives for {found or 'no policy'}")


def cmd_pareto(args) -> int:
    axes = check_axes([a.strip() for a in args.axes.split(",")])
    run_dir = Path(args.run)
    policy = _pick_policy(run_dir, args.policy)
    source = archive_path(run_dir, policy, args.epoch)
    front = project_front(read_archive(source), axes)

    target = (
        Path(args.out)
        if args.out
        else source.with_name(f"front_{axes[0]}_{axes[1]}_epoch_{args.epoch:03d}.csv")
    )
    target.parent.mkdir(parents=True, exist_ok=True)
    if args.baselines:
        rows = [(*p, "front") for p in front]
        rows += [(x, y, name) for name, x, y in baseline_points(run_dir, args.epoch, axes)]
        frame = pd.DataFrame(rows, columns=[*axes, "source"])
    else:
        frame = pd.DataFrame(front, columns=list(axes))
    frame.to_csv(target, index=False, lineterminator="\n")
    print(f"{GREEN}{len(front)} front points written to {target}{RESET}")
    return 0


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "pareto": cmd_pareto}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"{RED}usage error: {exc}{RESET}", file=sys.stderr)
        return exc.exit_code

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except SimulationError as exc:
        print(f"{RED}{type(exc).__name__}: {exc}{RESET}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
