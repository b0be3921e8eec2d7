"""Command-line entry point.

Subcommands::

    icefit generate-truth --config cfg.json --out truth_dir
    icefit train    --truth truth_dir --out run_dir --shape 4-4 \
                    --activation tanh --optimizer bfgs --observer interior \
                    --noise 0 --seed 0
    icefit sweep    --truth truth_dir --out sweep_dir [--seeds 0,1,2] ...
    icefit evaluate --network run_dir/network.json --truth truth_dir [--out DIR]
    icefit plot     --table file.csv --out plot_dir

All tabular outputs are comma-separated with a documented header row; every
float is written with enough digits to round-trip exactly, so reruns with
identical seeds produce bitwise-identical artifacts.  The environment
variable ``ICEFIT_WORKERS`` sets the sweep's process count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .artifacts import (
    DEFAULT_DELTAS,
    FMT,
    TruthArtifacts,
    generate_truth,
    load_truth,
    save_truth,
)
from .closures import IsotropicStress
from .config import ExperimentConfig, load_config, save_config
from .errors import ContractViolation
from .fem import Simulation
from .invariants import random_rotation
from .network import InputScaler, MlpParams, NetworkRate, mlp_forward
from .observers import invariant_loss, invariant_rmse
from .optimize import (
    OptimSettings,
    RunRecord,
    SweepSpec,
    record_filename,
    run_sweep,
    run_training,
)

OBSERVER_FLAGS = {
    "interior": "interior",
    "surface": "surface",
    "surface-borehole": "surface_plus_borehole",
}

AGGREGATE_HEADER = (
    "shape,activation,optimizer,observer,noise,seed,"
    "final_exp_loss,final_inv_loss,termination,collapse_flag"
)
CORRELATION_HEADER = (
    "observer,noise,shape,activation,optimizer,seed,"
    "experimental_loss,invariant_loss"
)


def _shape_from_flag(text: str):
    try:
        return tuple(int(t) for t in text.replace("x", "-").split("-") if t)
    except ValueError:
        raise ContractViolation(f"bad --shape value {text!r}; expected e.g. 4-4")


def _shape_tag(shape) -> str:
    return "-".join(str(s) for s in shape)


def _f(x: float) -> str:
    return FMT % x


def save_network(path, params: MlpParams, scaler: InputScaler) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "layer_sizes": list(params.layer_sizes),
                "activation": params.activation,
                "params": params.flatten().tolist(),
                "scaler": {"mean": scaler.mean.tolist(),
                           "std": scaler.std.tolist()},
            },
            fh,
        )
        fh.write("\n")


def load_network(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
        params = MlpParams.from_flat(
            np.asarray(d["params"], dtype=float),
            tuple(d["layer_sizes"]),
            d["activation"],
        )
        scaler = InputScaler(
            np.asarray(d["scaler"]["mean"], dtype=float),
            np.asarray(d["scaler"]["std"], dtype=float),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as err:
        raise ContractViolation(f"malformed network file {path}: {err}") from err
    return params, scaler


def _write_rmse_map(path, grid, error_map) -> None:
    np.savetxt(
        path,
        np.column_stack(
            [grid.nodes[:, 0], grid.nodes[:, 1], grid.regime,
             grid.in_distribution.astype(int), error_map]
        ),
        fmt=FMT,
        delimiter=",",
        header="J2,phi,regime,in_distribution,error",
        comments="# ",
    )


def _write_delta_phi(path, sim, phi_pred, phi_true) -> None:
    verts = sim.mesh.vertices
    np.savetxt(
        path,
        np.column_stack([verts[:, 0], verts[:, 1], phi_pred - phi_true]),
        fmt=FMT,
        delimiter=",",
        header="node_x,node_y,delta_phi",
        comments="# ",
    )


def cmd_generate_truth(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    seed = 2024 if args.seed is None else args.seed
    artifacts = generate_truth(config, DEFAULT_DELTAS, noise_seed=seed)
    os.makedirs(args.out, exist_ok=True)
    save_truth(artifacts, args.out)
    print(
        f"truth written to {args.out}: "
        f"{artifacts.meta['newton_iterations']} newton iterations, "
        f"relative residual {artifacts.meta['relative_residual']:.3e}, "
        f"{len(artifacts.observations)} noise sets"
    )
    return 0


def cmd_train(args) -> int:
    truth = load_truth(args.truth)
    sim = Simulation(truth.config)
    shape = _shape_from_flag(args.shape)
    observer = OBSERVER_FLAGS[args.observer]
    settings = OptimSettings(max_iter=args.max_iter)
    record = run_training(
        truth, shape, args.activation, args.optimizer, observer,
        args.noise, args.seed, settings=settings, sim=sim,
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "record.json"), "w") as fh:
        json.dump(record.to_dict(), fh, indent=1)
        fh.write("\n")
    net = MlpParams.from_flat(
        record.final_params, record.layer_sizes, record.activation
    )
    save_network(os.path.join(args.out, "network.json"), net, truth.scaler)

    rate = NetworkRate(net, truth.scaler)
    _, err_map = invariant_loss(rate, truth.config.truth_rate(), truth.grid)
    _write_rmse_map(os.path.join(args.out, "rmse_map.csv"), truth.grid, err_map)

    stress = IsotropicStress(
        truth.config.glen_params(), truth.config.damage_params()
    )
    outcome = sim.solve_forward(
        stress, rate, initial_guess=sim.state_to_vector(truth.glen_state)
    )
    if not outcome.converged:
        print("warning: final network solve did not converge", file=sys.stderr)
        phi_pred = np.full_like(truth.truth_state.phi, np.nan)
    else:
        phi_pred = outcome.state.phi
    _write_delta_phi(
        os.path.join(args.out, "delta_phi.csv"), sim, phi_pred,
        truth.truth_state.phi,
    )
    print(
        f"run finished: loss {record.init_loss:.3e} -> {record.final_loss:.3e} "
        f"({record.termination}, {record.n_iterations} iterations), "
        f"invariant rmse {record.init_invariant_rmse:.4f} -> "
        f"{record.final_invariant_rmse:.4f}"
    )
    return 0


def _sweep_spec_from_args(args) -> SweepSpec:
    spec = SweepSpec()
    if args.shape:
        spec.shapes = tuple(_shape_from_flag(s) for s in args.shape.split(","))
    if args.activation:
        spec.activations = tuple(args.activation.split(","))
    if args.optimizer:
        spec.optimizers = tuple(args.optimizer.split(","))
    if args.observer:
        spec.observers = tuple(
            OBSERVER_FLAGS[o] for o in args.observer.split(",")
        )
    if args.noise is not None:
        spec.noises = (args.noise,)
    if args.seeds:
        spec.seeds = tuple(int(s) for s in args.seeds.split(","))
    return spec


def write_aggregate(records, path) -> None:
    rows = [AGGREGATE_HEADER]
    for r in records:
        rows.append(
            ",".join(
                [
                    _shape_tag(r.shape), r.activation, r.optimizer, r.observer,
                    _f(r.noise), str(r.seed), _f(r.final_loss),
                    _f(r.final_invariant_loss), r.termination,
                    str(int(r.collapsed)),
                ]
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def write_correlation(records, path) -> None:
    rows = [CORRELATION_HEADER]
    for r in records:
        rows.append(
            ",".join(
                [
                    r.observer, _f(r.noise), _shape_tag(r.shape), r.activation,
                    r.optimizer, str(r.seed), _f(r.final_loss),
                    _f(r.final_invariant_loss),
                ]
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def cmd_sweep(args) -> int:
    truth = load_truth(args.truth)
    spec = _sweep_spec_from_args(args)
    workers = int(os.environ.get("ICEFIT_WORKERS", "1"))
    settings = OptimSettings(max_iter=args.max_iter)
    os.makedirs(args.out, exist_ok=True)
    records = run_sweep(
        truth, spec, out_dir=args.out, settings=settings, workers=workers
    )
    write_aggregate(records, os.path.join(args.out, "aggregate.csv"))
    write_correlation(records, os.path.join(args.out, "correlation.csv"))
    plot_correlation(
        os.path.join(args.out, "correlation.csv"),
        os.path.join(args.out, "correlation.svg"),
    )
    print(f"sweep complete: {len(records)} runs in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    truth = load_truth(args.truth)
    params, scaler = load_network(args.network)
    rate = NetworkRate(params, scaler)
    truth_rate = truth.config.truth_rate()
    loss, err_map = invariant_loss(rate, truth_rate, truth.grid)
    small = truth.grid.regime == 0
    large = truth.grid.regime == 1
    report = {
        "invariant_loss": loss,
        "rmse_small_regime": invariant_rmse(err_map, truth.grid, small),
        "rmse_large_regime": invariant_rmse(err_map, truth.grid, large),
        "rmse_in_distribution": invariant_rmse(
            err_map, truth.grid, truth.grid.in_distribution
        ),
    }

    sim = Simulation(truth.config)
    stress = IsotropicStress(
        truth.config.glen_params(), truth.config.damage_params()
    )
    outcome = sim.solve_forward(
        stress, rate, initial_guess=sim.state_to_vector(truth.glen_state)
    )
    if outcome.converged:
        dphi = outcome.state.phi - truth.truth_state.phi
        report["delta_phi_max_abs"] = float(np.abs(dphi).max())
        report["delta_phi_rms"] = float(np.sqrt(np.mean(dphi**2)))
        report["forward_solve"] = "converged"
    else:
        report["forward_solve"] = outcome.failure_kind

    # frame invariance of the full network closure: the equivariance residual
    # of the damage rate under rotated strain-rate inputs
    rng = np.random.default_rng(0)
    dev = 0.0
    for _ in range(50):
        a = rng.standard_normal((2, 2))
        eps = 0.5 * (a + a.T)
        qrot = random_rotation(rng, 2)
        eps_rot = qrot @ eps @ qrot.T
        j2 = np.sqrt((eps * eps).sum())
        j2_rot = np.sqrt((eps_rot * eps_rot).sum())
        phi = rng.uniform(0.0, 1.0)
        s0 = mlp_forward(params, scaler, np.array([[j2, phi]]))[0]
        s1 = mlp_forward(params, scaler, np.array([[j2_rot, phi]]))[0]
        dev = max(dev, abs(s1 - s0) / (1.0 + abs(s0)))
    report["frame_invariance_deviation"] = dev

    for key, val in report.items():
        print(f"{key}: {val}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "icefit"
    import matplotlib.pyplot as plt

    return plt


def _read_header(path) -> str:
    with open(path) as fh:
        first = fh.readline().strip()
    return first.lstrip("# ").strip()


def plot_correlation(table_path, out_path) -> None:
    plt = _matplotlib()
    rows = np.genfromtxt(
        table_path, delimiter=",", names=True, dtype=None, encoding="utf-8"
    )
    rows = np.atleast_1d(rows)
    observers = sorted(set(rows["observer"]))
    fig, axes = plt.subplots(
        1, max(len(observers), 1), figsize=(4.2 * max(len(observers), 1), 3.6),
        squeeze=False,
    )
    for ax, obs in zip(axes[0], observers):
        sel = rows["observer"] == obs
        for noise in sorted(set(rows["noise"][sel])):
            pick = sel & (rows["noise"] == noise)
            ax.loglog(
                np.maximum(rows["experimental_loss"][pick], 1e-16),
                np.maximum(rows["invariant_loss"][pick], 1e-16),
                "o", label=f"noise {noise:g}", alpha=0.7,
            )
        ax.set_title(obs)
        ax.set_xlabel("experimental loss")
        ax.set_ylabel("invariant loss")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Date": None})
    plt.close(fig)


def plot_rmse_map(table_path, out_path) -> None:
    plt = _matplotlib()
    data = np.loadtxt(table_path, delimiter=",")
    j2, phi, regime, err = data[:, 0], data[:, 1], data[:, 2], data[:, 4]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    for ax, r, name in zip(axes, (0, 1), ("small regime", "large regime")):
        sel = regime == r
        sc = ax.scatter(
            j2[sel], phi[sel], c=np.abs(err[sel]), s=6, cmap="viridis",
            marker="s",
        )
        ax.set_xlabel("J2")
        ax.set_ylabel("phi")
        ax.set_title(name)
        fig.colorbar(sc, ax=ax, label="|error|")
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Date": None})
    plt.close(fig)


def plot_delta_phi(table_path, out_path) -> None:
    plt = _matplotlib()
    data = np.loadtxt(table_path, delimiter=",")
    x, y, dphi = data[:, 0], data[:, 1], data[:, 2]
    fig, ax = plt.subplots(figsize=(7, 3))
    lim = max(float(np.abs(dphi).max()), 1e-12)
    sc = ax.tripcolor(x, y, dphi, cmap="RdBu_r", vmin=-lim, vmax=lim)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title("predicted - true damage")
    fig.colorbar(sc, ax=ax)
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Date": None})
    plt.close(fig)


def cmd_plot(args) -> int:
    header = _read_header(args.table)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.splitext(os.path.basename(args.table))[0]
    out_path = os.path.join(args.out, base + ".svg")
    if header.startswith("observer,"):
        plot_correlation(args.table, out_path)
    elif header.startswith("J2,"):
        plot_rmse_map(args.table, out_path)
    elif header.startswith("node_x,node_y,delta_phi"):
        plot_delta_phi(args.table, out_path)
    else:
        raise ContractViolation(
            f"unrecognized table header {header!r} in {args.table}"
        )
    print(f"plot written to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icefit",
        description="Train pointwise damage closures inside an ice-flow "
        "simulation.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-truth", help="solve the reference experiment")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="truth output directory")
    p.add_argument("--seed", type=int, default=None, help="noise seed")
    p.set_defaults(func=cmd_generate_truth)

    p = sub.add_parser("train", help="one optimization run")
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", default="4-4")
    p.add_argument("--activation", default="tanh",
                   choices=("tanh", "relu", "softplus"))
    p.add_argument("--optimizer", default="bfgs",
                   choices=("bfgs", "trust_region_bfgs"))
    p.add_argument("--observer", default="interior",
                   choices=tuple(OBSERVER_FLAGS))
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=200)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="hyperparameter sweep")
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", help="comma list, e.g. 2,2-2,4-4")
    p.add_argument("--activation", help="comma list")
    p.add_argument("--optimizer", help="comma list")
    p.add_argument("--observer", help="comma list")
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seeds", help="comma list of integers")
    p.add_argument("--max-iter", type=int, default=200)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="score a stored network")
    p.add_argument("--network", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render a data table to SVG")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, FileNotFoundError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
