import argparse
import os
import sys

from diddml.config import ColumnRoles, DgpSpec, RunConfig, dump_config
from diddml.errors import DidDmlError
from diddml.synthetic_dgp import categorical_names, continuous_names, generate, oracle_atet, write_csv


def make_synthetic(output_dir, n=5000, tau=-0.03, surface="linear", clusters=50, seed=0, with_truth=False):
    """
    Draw a synthetic sample and write it next to a run config that points at it,
    so every CLI command can run on it unchanged.

    Args:
        output_dir (str): Directory for synthetic.csv and run.yaml.
        n (int): Number of rows.
        tau (float): True effect on the treated post-period outcome probability.
        surface (str): "linear" or "nonlinear" outcome surface.
        clusters (int): Number of clusters (countries).
        seed (int): Seed of the draw.
        with_truth (bool): Also write the potential outcomes and per-row effects.
    """
    spec = DgpSpec(n=n, tau=tau, surface=surface, n_clusters=clusters, seed=seed)
    sample = generate(spec)
    os.makedirs(output_dir, exist_ok=True)

    csv_path = os.path.join(output_dir, "synthetic.csv")
    write_csv(sample, csv_path, with_truth=with_truth)
    print(f"Wrote {csv_path} ({sample.data.n} rows, realized effect {oracle_atet(sample):.4f})")

    roles = ColumnRoles(
        outcome="y", treatment="d", period="t", cluster="cluster", row_id="row_id",
        covariates={"continuous": continuous_names(spec), "categorical": categorical_names(spec)},
        keep=["y0", "y1", "tau"] if with_truth else [],
    )
    config = RunConfig(
        inputs={"prepared": csv_path},
        columns=roles,
        covariate_groups={"history": [], "always": [], "socio": continuous_names(spec),
                          "policy": categorical_names(spec)},
        subgroups=[],
        simulation={"dgp": spec},
        seed=seed,
        output_dir=os.path.join(output_dir, "results"),
    )
    config_path = os.path.join(output_dir, "run.yaml")
    dump_config(config, config_path)
    print(f"Wrote {config_path}")


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description="Write a synthetic repeated cross-section and a matching run config.")
    parser.add_argument('output_dir', help="Directory to write synthetic.csv and run.yaml into.")
    parser.add_argument('--n', type=int, default=5000, help="Number of rows (default: 5000)")
    parser.add_argument('--tau', type=float, default=-0.03, help="True effect (default: -0.03)")
    parser.add_argument('--surface', choices=["linear", "nonlinear"], default="linear", help="Outcome surface (default: linear)")
    parser.add_argument('--clusters', type=int, default=50, help="Number of clusters (default: 50)")
    parser.add_argument('--seed', type=int, default=0, help="Seed (default: 0)")
    parser.add_argument('--with-truth', action="store_true", help="Also write potential outcomes and per-row effects.")
    args = parser.parse_args()

    try:
        make_synthetic(args.output_dir, args.n, args.tau, args.surface, args.clusters, args.seed, args.with_truth)
    except DidDmlError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)
