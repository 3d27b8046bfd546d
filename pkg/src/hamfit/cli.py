"""Command line entry points.

Exit codes: 0 on success, 2 for validation problems (bad flags, malformed
files, inconsistent shapes), 3 for numerical failures (diverged training,
non-finite integration).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .core import DatasetFormatError, dataset_read, dataset_to_csv, dataset_write, format_float_17g
from .elbo import ElboNoise, InitPosterior
from .evaluation import evaluate_mse, phase_map, volume_diagnostic
from .odeint import IntegrationError
from .regularizers import (
    dissipation_energy_residual,
    divergence_residual,
    port_energy_residual,
)
from .surrogate import (
    DTYPE,
    CheckpointFormatError,
    load_checkpoint,
    sample_posterior,
    save_checkpoint,
)
from .systems import GenerationConfig, generate_dataset, preset, preset_generation
from .training import (
    TrainConfig,
    TrainingDivergedError,
    ablation_runner,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _write_rows(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _all_dests(parser: argparse.ArgumentParser) -> set[str]:
    dests = set()
    for action in parser._actions:
        dests.add(action.dest)
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                dests |= _all_dests(child)
    return dests


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse args twice so values in --config act as overridable defaults."""
    pre, _ = parser.parse_known_args(argv)
    if getattr(pre, "config", None):
        try:
            overrides = json.loads(Path(pre.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config file {pre.config}: {e}")
        if not isinstance(overrides, dict):
            parser.error(f"config file {pre.config} must hold a JSON object")
        unknown = set(overrides) - _all_dests(parser)
        if unknown:
            parser.error(f"config file has unknown keys: {sorted(unknown)}")
        parser.set_defaults(**overrides)
    return parser.parse_args(argv)


def _cmd_generate(args: argparse.Namespace) -> int:
    spec = preset(args.system)
    defaults = preset_generation(spec.name, seed=args.seed)
    gen = GenerationConfig(
        trajectories=args.trajectories,
        steps=args.steps,
        t_end=args.t_end,
        noise_sigma=args.noise if args.noise is not None else defaults.noise_sigma,
        init_scale=args.init_scale,
        seed=args.seed,
        substeps=args.substeps,
    )
    dataset = generate_dataset(spec, gen)
    dataset_write(args.out, dataset)
    if args.csv:
        dataset_to_csv(args.csv, dataset)
    print(
        f"wrote {dataset.n_trajectories} trajectories x {dataset.n_steps} steps "
        f"of {spec.name} ({spec.dynamics_class.value}) to {args.out}"
    )
    return EXIT_OK


def _train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        lr_lambda=args.lr_lambda,
        n_bases=args.bases,
        n_mc_samples=args.mc_samples,
        batch_size=args.batch_size,
        horizon=args.horizon,
        balance=args.balance,
        use_lyapunov=not args.no_lyapunov,
        use_energy=not args.no_energy,
        use_volume=not args.no_volume,
        noise_prior=args.noise_prior,
        sigma_true=args.sigma_true,
        seed=args.seed,
        substeps=args.substeps,
        forcing_hidden=args.forcing_hidden,
    )


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--epochs", type=int, default=5000)
    sub.add_argument("--lr", type=float, default=1e-3)
    sub.add_argument("--lr-lambda", type=float, default=1e-3, dest="lr_lambda")
    sub.add_argument("--bases", type=int, default=100, help="number of feature pairs M")
    sub.add_argument("--mc-samples", type=int, default=1, dest="mc_samples")
    sub.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    sub.add_argument("--horizon", type=float, default=None)
    sub.add_argument(
        "--balance",
        choices=["equal", "gda", "gda-adam", "mtadam", "jd", "jd2"],
        default="equal",
    )
    sub.add_argument("--no-energy", action="store_true")
    sub.add_argument("--no-lyapunov", action="store_true")
    sub.add_argument("--no-volume", action="store_true")
    sub.add_argument("--noise-prior", action="store_true", dest="noise_prior")
    sub.add_argument("--sigma-true", type=float, default=None, dest="sigma_true")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--substeps", type=int, default=1)
    sub.add_argument("--forcing-hidden", type=int, default=100, dest="forcing_hidden")
    sub.add_argument("--config", default=None, help="JSON file with flag defaults")


def _cmd_train(args: argparse.Namespace) -> int:
    dataset = dataset_read(args.data)
    cfg = _train_config_from_args(args)
    result = train(dataset, cfg)
    save_checkpoint(args.out, result.params)
    if args.history:
        header = list(result.loss_history[0].keys())
        rows = [[row[k] for k in header] for row in result.loss_history]
        _write_rows(args.history, header, rows)
    last = result.loss_history[-1]
    print(
        f"trained {dataset.system_name} for {cfg.epochs} epochs "
        f"(balance={cfg.balance}); final neg_elbo {last['neg_elbo']:.4f}, "
        f"total {last['total']:.4f}; checkpoint {args.out}"
    )
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.ckpt)
    dataset = dataset_read(args.data)
    report = evaluate_mse(
        params, dataset, eval_seed=args.eval_seed, ensemble_samples=args.ensemble
    )
    if args.out:
        rows = [[i, format_float_17g(v)] for i, v in enumerate(report.per_trajectory)]
        _write_rows(args.out, ["traj_id", "mse"], rows)
    print(f"mse {report.mean:.6f} +/- {report.std:.6f} over {len(report.per_trajectory)} trajectories")
    return EXIT_OK


def _cmd_phase_map(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.ckpt)
    spec = preset(args.system)
    grid = phase_map(
        params,
        spec,
        bounds=((args.q_min, args.q_max), (args.p_min, args.p_max)),
        resolution=args.resolution,
        eval_seed=args.eval_seed,
    )
    rows = []
    for iq, q in enumerate(grid.q_values):
        for ip, p in enumerate(grid.p_values):
            rows.append(
                [
                    format_float_17g(q),
                    format_float_17g(p),
                    format_float_17g(grid.h_learned[iq, ip]),
                    format_float_17g(grid.h_true[iq, ip]),
                    format_float_17g(grid.error[iq, ip]),
                ]
            )
    _write_rows(args.out, ["q", "p", "H_learned", "H_true", "error"], rows)
    print(
        f"phase map {args.resolution}x{args.resolution}: "
        f"max |error| {np.abs(grid.error).max():.6f} -> {args.out}"
    )
    return EXIT_OK


def _cmd_volume_check(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.ckpt)
    times = np.linspace(0.0, args.t_max, args.n_times + 1)[1:]
    diag = volume_diagnostic(
        params,
        times,
        center=(args.center_q, args.center_p),
        radius=args.radius,
        boundary_points=args.points,
        eval_seed=args.eval_seed,
    )
    rows = [
        [format_float_17g(t), format_float_17g(r), int(s)]
        for t, r, s in zip(diag.times, diag.area_ratios, diag.self_intersecting)
    ]
    if args.out:
        _write_rows(args.out, ["t", "area_ratio", "self_intersecting"], rows)
    worst = max(abs(r - 1.0) for r in diag.area_ratios)
    print(f"volume check: max |area ratio - 1| = {worst:.6f} over t <= {args.t_max:g}")
    return EXIT_OK


def _cmd_check_identities(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.ckpt)
    gen = torch.Generator().manual_seed(args.seed)
    M, n = params.rff.M, params.rff.state_dim
    worst_energy = worst_port = worst_div = 0.0
    for _ in range(args.draws):
        sample = sample_posterior(
            params.rff,
            torch.randn(M, 2, dtype=DTYPE, generator=gen),
            torch.randn(M, n, dtype=DTYPE, generator=gen),
        )
        x = 2.0 * torch.rand(n, dtype=DTYPE, generator=gen) - 1.0
        t = float(10.0 * torch.rand((), generator=gen))
        worst_energy = max(
            worst_energy, abs(float(dissipation_energy_residual(params, sample, x)))
        )
        if params.forcing is not None:
            worst_port = max(
                worst_port, abs(float(port_energy_residual(params, sample, x, t)))
            )
        worst_div = max(worst_div, abs(float(divergence_residual(params, sample, x, t))))
    print(f"energy identity residual: max |r| = {worst_energy:.3e}")
    if params.forcing is not None:
        print(f"port energy identity residual: max |r| = {worst_port:.3e}")
    print(f"divergence identity residual: max |r| = {worst_div:.3e}")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    train_ds = dataset_read(args.data)
    test_ds = dataset_read(args.test_data) if args.test_data else train_ds
    base = _train_config_from_args(args)
    tokens = [t.strip() for t in args.configs.split(",") if t.strip()]
    if not tokens:
        raise ValueError("no ablation configurations given")
    seeds = [args.seed + k for k in range(args.n_seeds)]
    rows = ablation_runner(train_ds, test_ds, tokens, base, seeds=seeds)
    header = ["config", "seed", "mse_mean", "mse_std", "lambda1", "lambda2", "lambda3"]
    table = [[r[k] for k in header] for r in rows]
    if args.out:
        _write_rows(args.out, header, table)
    for r in rows:
        print(f"{r['config']:>10s} seed {r['seed']}: mse {r['mse_mean']:.6f} +/- {r['mse_std']:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hamfit",
        description="Learn conservative, dissipative, and port-Hamiltonian dynamics from data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a benchmark dataset")
    g.add_argument("--system", required=True, help="system code (P, S, HH, DP, DS, UD, WP, FS, DE)")
    g.add_argument("--trajectories", type=int, default=100)
    g.add_argument("--steps", type=int, default=100)
    g.add_argument("--t-end", type=float, default=10.0, dest="t_end")
    g.add_argument("--noise", type=float, default=None, help="defaults to the system preset")
    g.add_argument("--init-scale", type=float, default=1.0, dest="init_scale")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--substeps", type=int, default=10)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", default=None, help="also export a flat CSV")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", default=None, help="CSV of per-epoch losses and weights")
    _add_train_flags(t)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="CSV of per-trajectory errors")
    e.add_argument("--eval-seed", type=int, default=0, dest="eval_seed")
    e.add_argument("--ensemble", type=int, default=0)
    e.set_defaults(func=_cmd_evaluate)

    pm = sub.add_parser("phase-map", help="export the learned energy surface")
    pm.add_argument("--ckpt", required=True)
    pm.add_argument("--system", required=True)
    pm.add_argument("--q-min", type=float, default=-3.0, dest="q_min")
    pm.add_argument("--q-max", type=float, default=3.0, dest="q_max")
    pm.add_argument("--p-min", type=float, default=-3.0, dest="p_min")
    pm.add_argument("--p-max", type=float, default=3.0, dest="p_max")
    pm.add_argument("--resolution", type=int, default=50)
    pm.add_argument("--eval-seed", type=int, default=0, dest="eval_seed")
    pm.add_argument("--out", required=True)
    pm.set_defaults(func=_cmd_phase_map)

    v = sub.add_parser("volume-check", help="area preservation of the conservative flow")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--center-q", type=float, default=2.0, dest="center_q")
    v.add_argument("--center-p", type=float, default=-2.0, dest="center_p")
    v.add_argument("--radius", type=float, default=0.2)
    v.add_argument("--t-max", type=float, default=15.0, dest="t_max")
    v.add_argument("--n-times", type=int, default=30, dest="n_times")
    v.add_argument("--points", type=int, default=256)
    v.add_argument("--eval-seed", type=int, default=0, dest="eval_seed")
    v.add_argument("--out", default=None)
    v.set_defaults(func=_cmd_volume_check)

    ci = sub.add_parser("check-identities", help="structural identity residuals of a model")
    ci.add_argument("--ckpt", required=True)
    ci.add_argument("--draws", type=int, default=100)
    ci.add_argument("--seed", type=int, default=0)
    ci.set_defaults(func=_cmd_check_identities)

    ab = sub.add_parser("ablate", help="train and compare regularizer subsets")
    ab.add_argument("--data", required=True)
    ab.add_argument("--test-data", default=None, dest="test_data")
    ab.add_argument(
        "--configs",
        default="noreg,equal,equal_E,equal_L,equal_V",
        help="comma list of tokens like noreg, equal, gda_E",
    )
    ab.add_argument("--n-seeds", type=int, default=1, dest="n_seeds")
    ab.add_argument("--out", default=None)
    _add_train_flags(ab)
    ab.set_defaults(func=_cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    try:
        return args.func(args)
    except (DatasetFormatError, CheckpointFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDivergedError, IntegrationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
