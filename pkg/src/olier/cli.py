"""Command-line harness: seeded, reproducible experiments with persisted artifacts.

Exit codes: 0 success, 1 usage/config error, 2 runtime or divergence error,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from .datasets import STREAM_KINDS, make_stream
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DivergenceError,
    NonFiniteError,
    StateError,
)
from .losses import LossWeights
from .training import METHODS, StreamResult, TrainingConfig, average_accuracy, run_stream
from . import figures, persist


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser, with_taylor: bool = True,
                   with_update_mode: bool = True, single_seed: bool = True) -> None:
    p.add_argument("--method", choices=METHODS, default="olier")
    if with_taylor:
        p.add_argument("--taylor-order", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--lambda-orth", type=float, default=0.5)
    p.add_argument("--lambda-sparse", type=float, default=0.0)
    if with_update_mode:
        p.add_argument("--update-mode", choices=("mult", "add"), default=None,
                       help="default: mult for olier, add otherwise")
    p.add_argument("--stream", choices=STREAM_KINDS, default="rotated-gaussians")
    p.add_argument("--tasks", type=int, default=5)
    if single_seed:
        p.add_argument("--seed", type=int, default=0)
    else:
        p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="olier", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one method over a task stream")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_taylor = sub.add_parser("ablate-taylor", help="sweep the expansion order over seeds")
    _add_run_flags(p_taylor, with_taylor=False, single_seed=False)
    p_taylor.add_argument("--orders", default="1,2,3", help="comma-separated orders in 1..3")
    p_taylor.set_defaults(func=cmd_ablate_taylor)

    p_mult = sub.add_parser("ablate-mult", help="paired multiplicative vs additive runs")
    _add_run_flags(p_mult, with_update_mode=False, single_seed=False)
    p_mult.set_defaults(func=cmd_ablate_mult)

    p_fisher = sub.add_parser("fisher", help="cross-task Fisher energy of a completed run")
    p_fisher.add_argument("--run", required=True, help="directory written by `olier run`")
    p_fisher.add_argument("--no-figures", action="store_true")
    p_fisher.set_defaults(func=cmd_fisher)
    return parser


_FROM_FLAGS = object()


def _config_from_args(args, seed: int | None = None, taylor_order: int | None = None,
                      update_mode=_FROM_FLAGS) -> TrainingConfig:
    if update_mode is _FROM_FLAGS:
        update_mode = getattr(args, "update_mode", None)
    return TrainingConfig(
        method=args.method,
        taylor_order=taylor_order if taylor_order is not None else args.taylor_order,
        loss_weights=LossWeights(args.lambda_orth, args.lambda_sparse),
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=seed if seed is not None else args.seed,
        update_mode=update_mode,
    )


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise ConfigError(f"{what}: list is empty")
    return values


def _run_once(args, config: TrainingConfig) -> StreamResult:
    stream = make_stream(args.stream, args.tasks, config.seed)
    return run_stream(stream, config)


def write_run_artifacts(out_dir: Path, result: StreamResult, render_figures: bool = True) -> None:
    """Manifest, checkpoint, stream file, results table, and the report figures."""
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    persist.save_manifest(out_dir / "manifest.json", persist.RunManifest.from_result(result, started))
    persist.save_checkpoint(out_dir / "checkpoint.txt", persist.AdapterCheckpoint.from_result(result))
    persist.save_stream(out_dir / "stream.txt", result.stream)
    persist.write_results_table(out_dir / "results.csv", persist.results_rows(result))
    if render_figures:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        figures.accuracy_matrix_figure(result.matrix, fig_dir / "accuracy_matrix.png",
                                       title=f"{result.config.method} seed {result.config.seed} "
                                             f"(A_T = {average_accuracy(result.matrix):.3f})")
        figures.loss_trace_figure(result, fig_dir / "loss_traces.png")


def cmd_run(args) -> int:
    config = _config_from_args(args)
    result = _run_once(args, config)
    write_run_artifacts(Path(args.out), result, render_figures=not args.no_figures)
    print(f"method={config.method} order={config.taylor_order} seed={config.seed} "
          f"A_T={average_accuracy(result.matrix):.4f}")
    return 0


def cmd_ablate_taylor(args) -> int:
    orders = _parse_int_list(args.orders, "--orders")
    if any(o not in (1, 2, 3) for o in orders):
        raise ConfigError(f"--orders: values must lie in 1..3, got {orders}")
    seeds = _parse_int_list(args.seeds, "--seeds")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows, table = [], []
    for order in orders:
        for seed in seeds:
            config = _config_from_args(args, seed=seed, taylor_order=order)
            result = _run_once(args, config)
            a_t = average_accuracy(result.matrix)
            rows.append((order, seed, a_t))
            table.append(",".join([config.method, result.stream.order_label, str(order),
                                   str(seed), persist.fmt(a_t)]))
            print(f"order={order} seed={seed} A_T={a_t:.4f}")
    persist.write_results_table(out_dir / "taylor_ablation.csv", table,
                                header=persist.TAYLOR_TABLE_HEADER, append=True)
    if not args.no_figures:
        figures.taylor_ablation_figure(rows, out_dir / "taylor_ablation.png")
    return 0


def cmd_ablate_mult(args) -> int:
    seeds = _parse_int_list(args.seeds, "--seeds")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows, table = [], []
    for seed in seeds:
        results, order_label = {}, "order-1"
        for mode in ("mult", "add"):
            config = _config_from_args(args, seed=seed, update_mode=mode)
            run = _run_once(args, config)
            results[mode] = average_accuracy(run.matrix)
            order_label = run.stream.order_label
        delta = results["mult"] - results["add"]
        rows.append((seed, results["mult"], results["add"]))
        table.append(",".join([args.method, order_label, str(args.taylor_order), str(seed),
                               persist.fmt(results["mult"]), persist.fmt(results["add"]),
                               persist.fmt(delta)]))
        print(f"seed={seed} A_T(mult)={results['mult']:.4f} A_T(add)={results['add']:.4f} "
              f"delta={delta:+.4f}")
    mean_delta = sum(r[1] - r[2] for r in rows) / len(rows)
    print(f"mean delta A_T = {mean_delta:+.4f} over {len(seeds)} seeds")
    persist.write_results_table(out_dir / "mult_ablation.csv", table,
                                header=persist.MULT_TABLE_HEADER, append=True)
    if not args.no_figures:
        figures.mult_ablation_figure(rows, out_dir / "mult_ablation.png")
    return 0


def cmd_fisher(args) -> int:
    run_dir = Path(args.run)
    manifest = persist.load_manifest(run_dir / "manifest.json")
    ckpt = persist.load_checkpoint(run_dir / "checkpoint.txt")
    stream_path = run_dir / "stream.txt"
    stream = persist.load_stream(stream_path) if stream_path.exists() \
        else persist.stream_from_descriptor(manifest.stream)
    report = persist.fisher_report_for_run(ckpt, stream, manifest.training_config())
    (run_dir / "fisher.json").write_text(persist.fisher_report_json(report) + "\n")
    manifest.fisher = {"energy": report.energy, "metadata": report.metadata}
    persist.save_manifest(run_dir / "manifest.json", manifest)
    if not args.no_figures:
        fig_dir = run_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        figures.fisher_energy_figure(report, fig_dir / "fisher_energy.png")
    print(f"method={ckpt.method} fisher_energy={report.energy:.6g} "
          f"delta={report.metadata['delta_convention']}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"olier: config error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, ContractError, StateError, NonFiniteError) as exc:
        print(f"olier: runtime error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as exc:
        print(f"olier: I/O error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
