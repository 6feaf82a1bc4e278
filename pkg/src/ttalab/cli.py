"""Command-line interface.

Subcommands: gen-data, pretrain, select-blocks, adapt, bench, ablate,
single-sample. Every subcommand takes --config plus targeted overrides.
Exit codes: 0 success, 2 config error, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .blob import BlobFormatError
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import save_dataset
from .harness import (
    DivergenceError,
    build_pools,
    pretrain,
    run_ablation,
    run_benchmark,
    run_single_sample,
    write_metrics,
    write_summary,
)
from .nn import load_checkpoint, save_checkpoint
from .selection import SelectionReport, select_blocks
from .tensor import Rng

__all__ = ["cli_main"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None, help="EMA decay override")
    p.add_argument("--lr-entropy", type=float, default=None)
    p.add_argument("--lr-consistency", type=float, default=None)
    p.add_argument("--buffer", type=int, default=None)
    p.add_argument("--freq", type=float, default=None)


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(
        cfg,
        seed=args.seed,
        method=args.method,
        gamma=args.gamma,
        alpha=args.alpha,
        lr_entropy=args.lr_entropy,
        lr_consistency=args.lr_consistency,
        buffer=args.buffer,
        freq=args.freq,
    )


def _checkpoint(cfg: RunConfig):
    path = Path(cfg.paths.checkpoint)
    if not (path / "manifest").is_file():
        raise ConfigError(f"paths.checkpoint: no checkpoint at {path} (run `pretrain` first)")
    return load_checkpoint(path)


def _selection_report(cfg: RunConfig) -> SelectionReport | None:
    if cfg.method not in ("dplot", "tent+selection"):
        return None
    path = Path(cfg.paths.selection)
    if not path.is_file():
        raise ConfigError(
            f"paths.selection: no selection report at {path} (run `select-blocks` first)"
        )
    return SelectionReport.load(path)


def _cmd_gen_data(args) -> int:
    cfg = _load(args)
    pools = build_pools(cfg.data)
    root = Path(cfg.paths.data)
    for name, batch in (("train", pools.train), ("val", pools.val), ("test", pools.test)):
        save_dataset(batch, root / name)
        print(f"wrote {name}: {batch.n} images, {batch.classes} classes -> {root / name}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load(args)
    pools = build_pools(cfg.data)
    seed = cfg.seeds[0] if args.seed is not None else cfg.pretrain.seed
    model, val_err = pretrain(
        pools.train,
        pools.val,
        epochs=cfg.pretrain.epochs,
        rng=Rng(seed),
        batch_size=cfg.pretrain.batch_size,
        lr=cfg.pretrain.lr,
    )
    save_checkpoint(model, cfg.paths.checkpoint)
    info = {"val_error": val_err, "epochs": cfg.pretrain.epochs, "seed": seed}
    Path(cfg.paths.checkpoint, "pretrain.json").write_text(json.dumps(info, indent=1) + "\n")
    print(f"pretrained {cfg.pretrain.epochs} epochs, clean val error {val_err:.4f}")
    print(f"checkpoint -> {cfg.paths.checkpoint}")
    return 0


def _cmd_select_blocks(args) -> int:
    cfg = _load(args)
    model = _checkpoint(cfg)
    pools = build_pools(cfg.data)
    seed = cfg.seeds[0] if args.seed is not None else cfg.selection.seed
    subset = pools.train.subset(np.arange(min(cfg.selection.subset, pools.train.n)))
    report = select_blocks(
        model,
        subset,
        cfg.gamma,
        perturbation=cfg.selection.perturbation,
        em_config=cfg.selection.em_config(),
        rng=Rng(seed),
    )
    report.save(cfg.paths.selection)
    print("block  raw      scaled   selected")
    for i, (r, s) in enumerate(zip(report.raw, report.scaled), start=1):
        mark = "*" if i in report.selected else ""
        print(f"{i:<6d} {r:<8.4f} {s:<8.4f} {mark}")
    print(f"gamma={report.gamma} -> blocks {list(report.selected)}")
    print(f"report -> {cfg.paths.selection}")
    return 0


def _cmd_adapt(args) -> int:
    cfg = _load(args)
    cfg.seeds = cfg.seeds[:1]
    return _run_bench(cfg, summary=False)


def _cmd_bench(args) -> int:
    cfg = _load(args)
    return _run_bench(cfg, summary=True)


def _run_bench(cfg: RunConfig, summary: bool) -> int:
    model = _checkpoint(cfg)
    pools = build_pools(cfg.data)
    report = run_benchmark(cfg, model, pools, selection=_selection_report(cfg))
    write_metrics(report.records, cfg.paths.metrics)
    print(f"method={cfg.method} seeds={list(cfg.seeds)} mean error {report.mean_error:.4f}")
    if summary:
        spath = Path(cfg.paths.metrics).with_suffix(".summary.json")
        write_summary(report, spath)
        for (kind, sev), err in sorted(report.by_condition.items()):
            print(f"  {kind}@{sev}: {err:.4f}")
        print(f"summary -> {spath}")
    print(f"metrics -> {cfg.paths.metrics}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    model = _checkpoint(cfg)
    pools = build_pools(cfg.data)
    path = Path(cfg.paths.selection)
    if not path.is_file():
        raise ConfigError(f"paths.selection: no selection report at {path}")
    selection = SelectionReport.load(path)
    reports = run_ablation(cfg, cfg.ablation_variants, model, pools, selection)
    stem = Path(cfg.paths.metrics)
    combined = {}
    for variant, report in reports.items():
        safe = variant.replace(":", "_")
        out = stem.with_name(f"{stem.stem}.{safe}{stem.suffix}")
        write_metrics(report.records, out)
        combined[variant] = report.summary()
        print(f"variant {variant}: mean error {report.mean_error:.4f} -> {out}")
    spath = stem.with_suffix(".ablation.json")
    spath.parent.mkdir(parents=True, exist_ok=True)
    spath.write_text(json.dumps(combined, indent=1, sort_keys=True) + "\n")
    print(f"summary -> {spath}")
    return 0


def _cmd_single_sample(args) -> int:
    cfg = _load(args)
    model = _checkpoint(cfg)
    pools = build_pools(cfg.data)
    report = run_single_sample(cfg, model, pools, selection=_selection_report(cfg))
    write_metrics(report.records, cfg.paths.metrics)
    spath = Path(cfg.paths.metrics).with_suffix(".summary.json")
    write_summary(report, spath)
    print(
        f"single-sample method={cfg.method} buffer={cfg.single_sample.buffer} "
        f"freq={cfg.single_sample.freq} mean error {report.mean_error:.4f}"
    )
    print(f"metrics -> {cfg.paths.metrics}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttalab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("gen-data", _cmd_gen_data),
        ("pretrain", _cmd_pretrain),
        ("select-blocks", _cmd_select_blocks),
        ("adapt", _cmd_adapt),
        ("bench", _cmd_bench),
        ("ablate", _cmd_ablate),
        ("single-sample", _cmd_single_sample),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=fn)
    return parser


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except BlobFormatError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(cli_main())
