"""Run cells (config x strategy x seed) end to end; shared by the CLI and the acceptance suite."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .backbone import BackboneWeights, init_backbone
from .config import RunConfig
from .data import Dataset, gen_synthetic, load_dataset, split
from .prompts import PromptBank, StrategyKind, init_bank, param_partition
from .trainer import Metrics, evaluate, train


@dataclass
class CellResult:
    strategy: StrategyKind
    seed: int
    val_acc: float
    params: int
    bank: PromptBank
    metrics: Metrics


def dataset_for(cfg: RunConfig) -> Dataset:
    if cfg.data_path:
        return load_dataset(cfg.data_path, patch=cfg.vit.patch)
    return gen_synthetic(cfg.data)


def run_cell(cfg: RunConfig, strategy: StrategyKind | str, seed: int,
             backbone: BackboneWeights | None = None,
             data: tuple[Dataset, Dataset] | None = None) -> CellResult:
    """Train one strategy with prompt/optimiser seed ``seed`` and report validation accuracy.

    The backbone (``vit.seed``) and the data split (``data.seed``) stay fixed
    across seeds, so cells differ only in the trainable initialisation and
    batch order.
    """
    cfg = cfg.with_overrides(seed=seed, strategy=strategy)
    backbone = backbone or init_backbone(cfg.vit, cfg.backbone_seed)
    if data is None:
        data = split(dataset_for(cfg), cfg.train_fraction, cfg.data.seed)
    tr, va = data
    bank = init_bank(cfg.strategy, cfg.vit, cfg.num_prompts, cfg.prompt_seed, kmeans_iters=cfg.kmeans_iters)
    bank, metrics = train(tr, backbone, bank, cfg.train)
    acc = evaluate(va, backbone, bank, cfg.strategy).accuracy
    params = param_partition(cfg.strategy, bank).counts["trainable"]
    return CellResult(cfg.strategy, seed, acc, params, bank, metrics)


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("LSPT_THREADS", "1")))
    except ValueError:
        return 1


def run_ablation(cfg: RunConfig, strategies, seeds, log=None) -> list[CellResult]:
    """All (strategy, seed) cells, returned in strategy-major, seed-minor order."""
    backbone = init_backbone(cfg.vit, cfg.backbone_seed)
    data = split(dataset_for(cfg), cfg.train_fraction, cfg.data.seed)
    cells = [(StrategyKind.parse(str(getattr(s, "value", s))), int(k)) for s in strategies for k in seeds]

    def one(cell):
        res = run_cell(cfg, cell[0], cell[1], backbone, data)
        if log is not None:
            log(res)
        return res

    workers = min(max_threads(), len(cells)) or 1
    if workers == 1:
        return [one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, cells))


def ablation_csv(results: list[CellResult]) -> str:
    lines = ["strategy,seed,val_acc,params"]
    lines += [f"{r.strategy.value},{r.seed},{r.val_acc:.6f},{r.params}" for r in results]
    return "\n".join(lines) + "\n"


def param_table(cfg: RunConfig) -> str:
    """Per-strategy trainable parameter counts for the configured backbone shape."""
    lines = ["strategy,prompts,cell,aggregator,head,trainable"]
    for s in StrategyKind:
        bank = init_bank(s, cfg.vit, cfg.num_prompts, 0)
        c = param_partition(s, bank).counts
        lines.append(f"{s.value},{c['prompts']},{c['cell']},{c['aggregator']},{c['head']},{c['trainable']}")
    return "\n".join(lines) + "\n"


def override_train(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **kw))
