"""Experiment command line: train, evaluate, sweep, ablate.

Every run resolves a config (file plus flag overrides), hashes it, and
writes its artifacts under ``<out>/<run_id>/``: the resolved config, a
metrics stream, checkpoints, an evaluation report, and a summary table.
Exit codes: 0 success, 1 usage/config error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .. import evaluation as ev, training as tr
from ..seeding import derive_seed
from .config import ConfigError, RunConfig, config_to_dict, load_config, run_config_hash
from .datasets import generate_synthetic
from .metrics import MetricsIOError, MetricsWriter

__all__ = ["main"]

LAMBDA_GRID = [
    ("bt-l0.005", "barlow_twins", 0.005),
    ("bt-l0.01", "barlow_twins", 0.01),
    ("bt-l0.1", "barlow_twins", 0.1),
    ("reg-ae-l0.005", "regularized_ae", 0.005),
    ("reg-gauss-l0.005", "regularized_gaussian", 0.005),
]
BETA_GRID = [0.001, 0.005, 0.01, 0.05, 0.1]
ABLATIONS = ("drop-ae", "no-pretrain", "shared-views")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pseudowhiten", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("pretrain-ae", "pretrain each block's autoencoders only"),
        ("train", "full two-phase training run"),
        ("eval", "evaluate a trained checkpoint"),
        ("sweep-lambda", "baseline loss grid: three lambdas plus two regularized variants"),
        ("sweep-beta", "uncertainty-weight grid around the default"),
        ("ablate", "single-switch ablation runs"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", type=Path, default=None, help="JSON or TOML run config")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", type=Path, default=Path("runs"), help="artifact directory")
        p.add_argument("--mode", choices=["ensemble", "efficient"], default=None)
        p.add_argument("--blocks", type=int, default=None, help="override ensemble size")
        p.add_argument(
            "--dump-correlations", action="store_true", help="dump per-epoch C1/C2 CSVs"
        )
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, default=None)
            p.add_argument("--transfer", action="store_true", help="probe/test on config.transfer")
        if name == "ablate":
            p.add_argument("which", choices=ABLATIONS)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig.default()
    train = cfg.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.mode is not None:
        train = replace(train, mode=args.mode)
    if args.blocks is not None:
        train = replace(train, num_blocks=args.blocks)
    cfg = replace(cfg, train=train)
    cfg.validate()
    return cfg


def _run_dir(args, cfg: RunConfig, command: str) -> tuple[Path, str, str]:
    cfg_hash = run_config_hash(cfg)
    run_id = f"{command}-{cfg_hash[:10]}-s{cfg.train.seed}"
    run_dir = Path(args.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config_to_dict(cfg), sort_keys=True, indent=2))
    return run_dir, run_id, cfg_hash


def _write_summary(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def _print_table(header: list[str], rows: list[list]) -> None:
    cells = [header] + [[f"{v:.2f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
    for i, row in enumerate(cells):
        print("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)))
        if i == 0:
            print("  ".join("-" * w for w in widths))


def _train_run(cfg: RunConfig, run_dir: Path, run_id: str, cfg_hash: str, dump: bool):
    train_set, _ = generate_synthetic(cfg.data)
    with MetricsWriter(run_dir / "metrics.jsonl", run_id, cfg_hash) as writer:
        blocks = tr.train_ensemble(
            cfg.train,
            cfg.arch,
            cfg.augment,
            train_set.x,
            writer=writer,
            checkpoint_dir=run_dir / "checkpoints",
            config_dict=config_to_dict(cfg),
            dump_correlations_dir=(run_dir / "correlations") if dump else None,
        )
    return blocks


def _evaluate_blocks(cfg: RunConfig, blocks, run_dir: Path, run_id: str, cfg_hash: str, transfer=False):
    if transfer:
        if cfg.transfer is None:
            raise ConfigError("--transfer requires a [transfer] section in the config")
        probe_set, test_set = generate_synthetic(cfg.transfer)
    else:
        probe_set, test_set = generate_synthetic(cfg.data)
    report = ev.evaluate(
        blocks,
        (probe_set.x, probe_set.y),
        (test_set.x, test_set.y),
        cfg.probe,
        seed=cfg.train.seed,
        config_hash=cfg_hash,
        epoch=cfg.train.epochs,
        transfer=transfer,
    )
    (run_dir / "report.json").write_text(report.to_json())
    with MetricsWriter(run_dir / "metrics.eval.jsonl", run_id, cfg_hash) as writer:
        for i, (linear, knn) in enumerate(zip(report.per_block_top1, report.per_block_knn)):
            writer.write(phase="eval", block_id=i, epoch=cfg.train.epochs, step=0,
                         values={"linear_top1": linear, "knn_top1": knn})
        writer.write(phase="eval", block_id=-1, epoch=cfg.train.epochs, step=0,
                     values={"ensemble_top1": report.top1, "knn_top1_mean": report.knn_top1})
    return report


def _cmd_pretrain_ae(args) -> int:
    cfg = _resolve_config(args)
    run_dir, run_id, cfg_hash = _run_dir(args, cfg, "pretrain-ae")
    train_set, _ = generate_synthetic(cfg.data)
    blocks = tr.init_blocks(cfg.arch, cfg.train)
    with MetricsWriter(run_dir / "metrics.jsonl", run_id, cfg_hash) as writer:
        tr.pretrain_autoencoders(blocks, train_set.x, cfg.train, cfg.augment, writer=writer)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    tr.save_checkpoint(blocks, 0, config_to_dict(cfg), ckpt_dir / "pretrained.ckpt")
    rows = [[b.block_id, len(b.autoencoders)] for b in blocks]
    _write_summary(run_dir / "summary.csv", ["block", "autoencoders"], rows)
    print(f"pretrained {len(blocks)} block(s) -> {ckpt_dir / 'pretrained.ckpt'}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    run_dir, run_id, cfg_hash = _run_dir(args, cfg, "train")
    blocks = _train_run(cfg, run_dir, run_id, cfg_hash, args.dump_correlations)
    report = _evaluate_blocks(cfg, blocks, run_dir, run_id, cfg_hash)
    rows = [[i, lin, knn] for i, (lin, knn) in enumerate(zip(report.per_block_top1, report.per_block_knn))]
    rows.append(["ensemble", report.top1, report.knn_top1])
    _write_summary(run_dir / "summary.csv", ["block", "linear_top1", "knn_top1"], rows)
    print(report.render_table())
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    run_dir, run_id, cfg_hash = _run_dir(args, cfg, "eval")
    ckpt = args.checkpoint
    if ckpt is None:
        ckpt = Path(args.out) / f"train-{cfg_hash[:10]}-s{cfg.train.seed}" / "checkpoints" / "final.ckpt"
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt} (train first or pass --checkpoint)")
    blocks, _, _ = tr.load_checkpoint(ckpt, expected_config=config_to_dict(cfg))
    report = _evaluate_blocks(cfg, blocks, run_dir, run_id, cfg_hash, transfer=args.transfer)
    rows = [[i, lin, knn] for i, (lin, knn) in enumerate(zip(report.per_block_top1, report.per_block_knn))]
    rows.append(["ensemble", report.top1, report.knn_top1])
    _write_summary(run_dir / "summary.csv", ["block", "linear_top1", "knn_top1"], rows)
    print(report.render_table())
    return 0


def _sweep(args, command: str, points) -> int:
    cfg = _resolve_config(args)
    run_dir, run_id, cfg_hash = _run_dir(args, cfg, command)
    master = cfg.train.seed
    rows = []
    for i, (name, train_cfg) in enumerate(points(cfg)):
        point_cfg = replace(cfg, train=replace(train_cfg, seed=derive_seed(master, command, i)))
        point_dir = run_dir / "points" / name
        point_dir.mkdir(parents=True, exist_ok=True)
        point_hash = run_config_hash(point_cfg)
        blocks = _train_run(point_cfg, point_dir, f"{run_id}/{name}", point_hash, False)
        report = _evaluate_blocks(point_cfg, blocks, point_dir, f"{run_id}/{name}", point_hash)
        rows.append([name, point_cfg.train.loss_variant, point_cfg.train.lambda_bt,
                     point_cfg.train.beta, report.top1, report.knn_top1])
    header = ["point", "variant", "lambda", "beta", "linear_top1", "knn_top1"]
    _write_summary(run_dir / "summary.csv", header, rows)
    _print_table(header, rows)
    return 0


def _cmd_sweep_lambda(args) -> int:
    def points(cfg: RunConfig):
        for name, variant, lam in LAMBDA_GRID:
            yield name, replace(cfg.train, loss_variant=variant, lambda_bt=lam)

    return _sweep(args, "sweep-lambda", points)


def _cmd_sweep_beta(args) -> int:
    def points(cfg: RunConfig):
        for beta in BETA_GRID:
            yield f"beta{beta:g}", replace(cfg.train, beta=beta)

    return _sweep(args, "sweep-beta", points)


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    if args.which == "drop-ae":
        train = replace(cfg.train, use_autoencoders=False, alpha=0.0, beta=0.0)
    elif args.which == "no-pretrain":
        train = replace(cfg.train, ae_pretrain_enabled=False)
    else:  # shared-views
        train = replace(cfg.train, shared_views=True)
    cfg = replace(cfg, train=train)
    run_dir, run_id, cfg_hash = _run_dir(args, cfg, f"ablate-{args.which}")
    blocks = _train_run(cfg, run_dir, run_id, cfg_hash, args.dump_correlations)
    report = _evaluate_blocks(cfg, blocks, run_dir, run_id, cfg_hash)
    header = ["ablation", "linear_top1", "knn_top1"]
    rows = [[args.which, report.top1, report.knn_top1]]
    _write_summary(run_dir / "summary.csv", header, rows)
    _print_table(header, rows)
    return 0


_COMMANDS = {
    "pretrain-ae": _cmd_pretrain_ae,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-lambda": _cmd_sweep_lambda,
    "sweep-beta": _cmd_sweep_beta,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (tr.TrainingAbort, tr.CheckpointError, tr.ConfigMismatchError, MetricsIOError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
