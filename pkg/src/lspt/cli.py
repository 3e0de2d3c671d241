"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 I/O or file-format error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys

from .backbone import init_backbone, load_weights, save_weights
from .config import load_config
from .data import load_dataset, save_dataset, split
from .diagnostics import build_report, export_report
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FileIOError,
    FormatError,
    LabelError,
    NumericAbort,
    NumericError,
)
from .harness import ablation_csv, dataset_for, param_table, run_ablation
from .prompts import init_bank, load_bank, lspt_forward, save_bank
from .trainer import evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

BANK_FILE = "bank.lsptp"
WEIGHTS_FILE = "backbone.lsptw"
METRICS_FILE = "metrics.csv"


def _makedirs(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise FileIOError(f"cannot create {path}: {exc.strerror}") from exc


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise FileIOError(f"cannot write {path}: {exc.strerror}") from exc


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    out = args.out or os.path.join(cfg.out_dir, "dataset.lsptd")
    parent = os.path.dirname(out)
    if parent:
        _makedirs(parent)
    ds = dataset_for(cfg)
    save_dataset(ds, out)
    print(f"wrote {out} ({len(ds)} samples)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config).with_overrides(args.seed, args.strategy, args.out)
    _makedirs(cfg.out_dir)
    backbone = init_backbone(cfg.vit, cfg.backbone_seed)
    tr, va = split(dataset_for(cfg), cfg.train_fraction, cfg.data.seed)
    bank = init_bank(cfg.strategy, cfg.vit, cfg.num_prompts, cfg.prompt_seed, kmeans_iters=cfg.kmeans_iters)
    bank, metrics = train(tr, backbone, bank, cfg.train, val=va)
    save_weights(backbone, os.path.join(cfg.out_dir, WEIGHTS_FILE))
    save_bank(bank, os.path.join(cfg.out_dir, BANK_FILE))
    _write_text(os.path.join(cfg.out_dir, METRICS_FILE), metrics.to_csv(cfg.train.record_time))
    last = metrics.epochs[-1] if metrics.epochs else None
    if last is not None:
        print(f"strategy={cfg.strategy.value} epochs={last.epoch} train_acc={last.train_acc:.6f} val_acc={last.val_acc:.6f}")
    return EXIT_OK


def _weights_for(bank_path: str, explicit: str | None):
    return load_weights(explicit or os.path.join(os.path.dirname(bank_path) or ".", WEIGHTS_FILE))


def cmd_eval(args) -> int:
    bank = load_bank(args.bank)
    backbone = _weights_for(args.bank, args.weights)
    ds = load_dataset(args.data, patch=backbone.config.patch)
    res = evaluate(ds, backbone, bank, args.strategy)
    print(f"accuracy={res.accuracy:.6f}")
    if args.out:
        _makedirs(args.out)
        _write_text(os.path.join(args.out, "confusion.csv"), res.confusion_csv())
    else:
        sys.stdout.write(res.confusion_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.with_overrides(out_dir=args.out)
    strategies = [s for s in (args.strategy or "VPTDeep,LSPT").split(",") if s.strip()]
    seeds = _int_list(args.seeds or "1,2,3,4,5")
    _makedirs(cfg.out_dir)
    results = run_ablation(cfg, strategies, seeds)
    _write_text(os.path.join(cfg.out_dir, "ablation.csv"), ablation_csv(results))
    for r in results:
        print(f"{r.strategy.value} seed={r.seed} val_acc={r.val_acc:.6f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    bank = load_bank(args.bank)
    backbone = _weights_for(args.bank, args.weights)
    ds = load_dataset(args.data, patch=backbone.config.patch)
    if not 0 <= args.sample < len(ds):
        raise ContractError(f"sample {args.sample} outside dataset of {len(ds)}")
    _, trace = lspt_forward(ds.images[args.sample], backbone, bank, args.strategy)
    report = build_report(trace, 0, ds.masks[args.sample], sample_id=args.sample,
                          label=int(ds.labels[args.sample]))
    files = export_report(report, args.out)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    cfg = load_config(args.config)
    table = param_table(cfg)
    if args.out:
        _makedirs(args.out)
        _write_text(os.path.join(args.out, "params.csv"), table)
    sys.stdout.write(table)
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lspt", description="Prompt-tuning laboratory on a frozen micro-ViT.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a prompt bank; writes bank, backbone and metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--strategy")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion counts of a bank on a dataset")
    e.add_argument("bank")
    e.add_argument("data")
    e.add_argument("--weights")
    e.add_argument("--strategy")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every (strategy, seed) cell; writes ablation.csv")
    a.add_argument("--config", required=True)
    a.add_argument("--strategy", help="comma-separated strategies")
    a.add_argument("--seeds", help="comma-separated seeds or a range like 1..5")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("diagnose", help="export cosine/attention maps for one sample")
    d.add_argument("bank")
    d.add_argument("data")
    d.add_argument("--sample", type=int, default=0)
    d.add_argument("--weights")
    d.add_argument("--strategy")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("param-count", help="per-strategy trainable parameter table")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_param_count)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericAbort, NumericError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (FileIOError, FormatError, OSError) as exc:
        code, msg = EXIT_IO, str(exc)
    except (ConfigError, ContractError, DimensionError, LabelError, ValueError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    print(f"error: {msg}".replace("\n", " "), file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
