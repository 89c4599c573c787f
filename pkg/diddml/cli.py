"""
Command-line pipeline.

    python -m diddml <command> --config run.yaml [--seed N] [--out DIR] [--threads N] [--verbose]

Commands: validate, assign, estimate, table, placebo, heterogeneity,
simulate, plot. Every command writes a copy of the resolved config into its
output directory; re-running from that copy reproduces the outputs.
"""

import argparse
import logging
import os
import sys
from typing import Optional

from diddml.analysis_suite import estimates_frame, main_table, placebo_test, subgroup_run
from diddml.config import RunConfig, default_threads, dump_config, load_config
from diddml.data_model import RepeatedCrossSection, load_csv, load_survey_csv, two_by_two_table
from diddml.errors import ConfigError, DidDmlError
from diddml.estimator import SCHEMA_VERSION, estimate_atet
from diddml.parametric_did import fit_twfe
from diddml.policy_assignment import (
    assign, group_change_summary, join, load_panel_csv, period_map_from, write_assignment_csv,
)
from diddml.reporting import (
    collect_estimates, error_bar_svg, histogram_bins, propensity_bins, write_json, write_svg, write_table,
)
from diddml.simulation import run_replications

logger = logging.getLogger(__name__)


# ----------------------------
#  Shared steps
# ----------------------------
def _prepare_out(config: RunConfig) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    dump_config(config, os.path.join(config.output_dir, "config.yaml"))
    return config.output_dir


def _assignment(config: RunConfig):
    if not config.inputs.policy:
        raise ConfigError("inputs.policy must name the policy panel CSV")
    return assign(load_panel_csv(config.inputs.policy), config.assignment_rule())


def load_dataset(config: RunConfig, keep_excluded: bool = False) -> RepeatedCrossSection:
    """Prepared CSV, or survey waves joined with the policy assignment; then the period filter."""
    if config.columns is None:
        raise ConfigError("columns must map the input CSV onto the dataset roles")
    if config.inputs.prepared:
        data = load_csv(config.inputs.prepared, config.columns)
    elif config.inputs.micro:
        survey = load_survey_csv(config.inputs.micro, config.columns)
        data = join(_assignment(config), survey, period_map_from(config.periods), keep_excluded=keep_excluded)
    else:
        raise ConfigError("inputs must name a prepared CSV or survey microdata plus a policy panel")
    if config.analysis_period:
        data = data.select_periods(config.analysis_period)
    return data


def _estimate(config: RunConfig, data: RepeatedCrossSection):
    if config.estimator == "diddml":
        return estimate_atet(data, config.estimator_config())
    treatment = "binary" if config.estimator == "twfe_binary" else "continuous"
    return fit_twfe(data, config.twfe.model_copy(update={"treatment": treatment}))


def _wrote(path: str) -> None:
    print(f"Wrote {path}")


# ----------------------------
#  Commands
# ----------------------------
def cmd_validate(config: RunConfig) -> int:
    data = load_dataset(config)
    table = two_by_two_table(data)
    print(f"OK: {data.n} rows, {len(set(data.cluster))} clusters")
    for (d, t), count in table.counts.items():
        print(f"  cell d={d} t={t}: {count} rows, mean outcome {table.means[(d, t)]:.4f}")
    print(f"  raw difference-in-differences: {table.did:.4f}")
    return 0


def cmd_assign(config: RunConfig) -> int:
    out = _prepare_out(config)
    assignment = _assignment(config)
    path = os.path.join(out, f"assignment_{config.measure}.csv")
    write_assignment_csv(assignment, path)
    _wrote(path)
    path = os.path.join(out, f"changes_{config.measure}.csv")
    write_table(group_change_summary(assignment), path, index=True)
    _wrote(path)
    return 0


def cmd_estimate(config: RunConfig) -> int:
    out = _prepare_out(config)
    data = load_dataset(config)
    result = _estimate(config, data)
    record = result.to_record()
    path = os.path.join(out, "estimate.json")
    write_json(record, path)
    _wrote(path)
    path = os.path.join(out, "estimate.csv")
    write_table(estimates_frame({config.estimator: record}), path, index=True)
    _wrote(path)
    support = getattr(result, "support", None)
    if support is not None:
        path = os.path.join(out, "propensity_bins.csv")
        write_table(propensity_bins(support), path)
        _wrote(path)
    return 0


def cmd_table(config: RunConfig) -> int:
    out = _prepare_out(config)
    data = load_dataset(config)
    full = load_dataset(config, keep_excluded=True) if config.inputs.micro and config.inputs.policy else None
    table = main_table(data, config.estimator_config(), config.twfe, config.covariate_groups, full)
    path = os.path.join(out, "main_table.json")
    write_json({"schema_version": SCHEMA_VERSION, "columns": table.columns}, path)
    _wrote(path)
    path = os.path.join(out, "main_table.csv")
    write_table(table.to_frame(), path, index=True)
    _wrote(path)
    return 0


def cmd_placebo(config: RunConfig) -> int:
    out = _prepare_out(config)
    data = load_dataset(config)
    result = placebo_test(data, config.estimator_config(), config.placebo)
    path = os.path.join(out, "placebo.json")
    write_json(result.to_record(), path)
    _wrote(path)
    path = os.path.join(out, "placebo_bins.csv")
    write_table(histogram_bins(result.estimates, config.placebo.bins), path)
    _wrote(path)
    return 0


def cmd_heterogeneity(config: RunConfig) -> int:
    out = _prepare_out(config)
    data = load_dataset(config)
    grid = subgroup_run(data, config.subgroups, config.estimator_config())
    frame = grid.to_frame()
    path = os.path.join(out, "heterogeneity.csv")
    write_table(frame, path)
    _wrote(path)
    path = os.path.join(out, "heterogeneity.json")
    write_json({"schema_version": SCHEMA_VERSION, "groups": frame.to_dict(orient="records")}, path)
    _wrote(path)
    return 0


def cmd_simulate(config: RunConfig, progress: bool = True) -> int:
    out = _prepare_out(config)
    result = run_replications(config.simulation, config.diddml, config.twfe, seed=config.seed,
                              threads=config.threads or default_threads(), progress=progress)
    path = os.path.join(out, "simulation.json")
    write_json({"schema_version": SCHEMA_VERSION, "replications": config.simulation.replications,
                "tau": config.simulation.dgp.tau, "estimators": result.to_record()}, path)
    _wrote(path)
    path = os.path.join(out, "simulation_records.csv")
    write_table(result.records, path)
    _wrote(path)
    return 0


def cmd_plot(results_dir: str) -> int:
    # results directories always hold the config that produced them
    if not os.path.isfile(os.path.join(results_dir, "config.yaml")):
        raise ConfigError(f"{results_dir} is not a results directory (no config.yaml)")
    estimates = collect_estimates(results_dir)
    if not estimates:
        raise ConfigError(f"no estimate records found in {results_dir}")
    path = os.path.join(results_dir, "estimates.svg")
    write_svg(error_bar_svg(estimates), path)
    _wrote(path)
    return 0


COMMANDS = {
    "validate": "Load the inputs and report the (d, t) cell counts.",
    "assign": "Label countries Treated / Control / Excluded from the policy panel.",
    "estimate": "Run the configured estimator and write the result record.",
    "table": "Run the main results table (covariate sets, unclustered, TWFE variants).",
    "placebo": "Placebo test on the control units.",
    "heterogeneity": "Subgroup estimates with Benjamini-Hochberg adjusted p-values.",
    "simulate": "Monte Carlo replications on the synthetic data-generating process.",
    "plot": "SVG error-bar chart of the estimates in a results directory.",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config (YAML or JSON).")
    common.add_argument("--seed", type=int, help="Override the config seed.")
    common.add_argument("--out", help="Override the output directory.")
    common.add_argument("--threads", type=int, help="Worker processes (default: $DIDDML_THREADS or 1).")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging.")

    parser = argparse.ArgumentParser(prog="diddml", description="Difference-in-differences with double machine learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        cmd = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "plot":
            cmd.add_argument("results_dir", nargs="?", help="Directory of result JSON files (default: --out or the config output_dir).")
        if name == "simulate":
            cmd.add_argument("--replications", type=int, help="Override the number of replications.")
            cmd.add_argument("--no-progress", action="store_true", help="Hide the progress bar.")
    return parser


def _resolve(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    config = load_config(args.config).with_overrides(seed=args.seed, threads=args.threads, output_dir=args.out)
    if getattr(args, "replications", None):
        simulation = config.simulation.model_copy(update={"replications": args.replications})
        config = config.model_copy(update={"simulation": simulation})
    return config


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "plot":
            results_dir = args.results_dir or args.out or (_resolve(args).output_dir if args.config else None)
            if not results_dir:
                raise ConfigError("plot needs a results directory")
            return cmd_plot(results_dir)
        config = _resolve(args)
        if args.command == "simulate":
            return cmd_simulate(config, progress=not args.no_progress)
        return {
            "validate": cmd_validate,
            "assign": cmd_assign,
            "estimate": cmd_estimate,
            "table": cmd_table,
            "placebo": cmd_placebo,
            "heterogeneity": cmd_heterogeneity,
        }[args.command](config)
    except DidDmlError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
