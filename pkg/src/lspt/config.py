"""Plain-text run configuration: ``section.key = value`` lines, ``#`` comments."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from .backbone import ViTConfig
from .data import SyntheticTaskSpec
from .errors import ConfigError, FileIOError
from .prompts import DEFAULT_NUM_PROMPTS, StrategyKind
from .trainer import TrainConfig

_INT = int
_FLOAT = float


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


# key -> (converter, default)
SCHEMA: dict[str, tuple] = {
    "vit.image_h": (_INT, 32),
    "vit.image_w": (_INT, 32),
    "vit.patch": (_INT, 8),
    "vit.dim": (_INT, 64),
    "vit.heads": (_INT, 4),
    "vit.blocks": (_INT, 6),
    "vit.mlp_ratio": (_FLOAT, 2.0),
    "vit.classes": (_INT, 4),
    "vit.seed": (_INT, 0),
    "prompts.strategy": (str, "LSPT"),
    "prompts.num": (_INT, DEFAULT_NUM_PROMPTS),
    "prompts.seed": (_INT, 0),
    "prompts.kmeans_iters": (_INT, 10),
    "train.optimizer": (str, "adamw"),
    "train.lr": (_FLOAT, 1e-3),
    "train.weight_decay": (_FLOAT, 1e-4),
    "train.momentum": (_FLOAT, 0.9),
    "train.beta1": (_FLOAT, 0.9),
    "train.beta2": (_FLOAT, 0.999),
    "train.eps": (_FLOAT, 1e-8),
    "train.epochs": (_INT, 10),
    "train.batch_size": (_INT, 32),
    "train.seed": (_INT, 0),
    "train.cosine_schedule": (_bool, False),
    "train.record_time": (_bool, False),
    "data.kind": (str, "local_motif"),
    "data.samples_per_class": (_INT, 50),
    "data.noise_std": (_FLOAT, 0.1),
    "data.seed": (_INT, 0),
    "data.train_fraction": (_FLOAT, 0.8),
    "data.path": (str, ""),
    "out.dir": (str, "run"),
}


@dataclass(frozen=True)
class RunConfig:
    vit: ViTConfig
    train: TrainConfig
    data: SyntheticTaskSpec
    strategy: StrategyKind
    num_prompts: int = DEFAULT_NUM_PROMPTS
    backbone_seed: int = 0
    prompt_seed: int = 0
    kmeans_iters: int = 10
    train_fraction: float = 0.8
    data_path: str = ""
    out_dir: str = "run"
    raw: dict = field(default_factory=dict, compare=False)

    def with_overrides(self, seed: int | None = None, strategy: str | None = None,
                       out_dir: str | None = None) -> "RunConfig":
        cfg = self
        if strategy is not None:
            s = StrategyKind.parse(strategy)
            cfg = replace(cfg, strategy=s, train=replace(cfg.train, strategy=s))
        if seed is not None:
            cfg = replace(cfg, prompt_seed=seed, train=replace(cfg.train, seed=seed))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=out_dir)
        return cfg


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        conv = SCHEMA[key][0]
        try:
            values[key] = conv(val)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {val!r} for {key}") from None
    return build_config(values)


def build_config(values: dict | None = None) -> RunConfig:
    """Fill defaults and run every cross-field check before any work starts."""
    v = {k: d for k, (_, d) in SCHEMA.items()}
    v.update(values or {})
    vit = ViTConfig(
        v["vit.image_h"], v["vit.image_w"], v["vit.patch"], v["vit.dim"], v["vit.heads"],
        v["vit.blocks"], v["vit.mlp_ratio"], v["vit.classes"],
    )  # fmt: skip
    strategy = StrategyKind.parse(v["prompts.strategy"])
    if v["prompts.num"] < 0:
        raise ConfigError("prompts.num must be non-negative")
    if strategy is StrategyKind.LSPT_KMeans and v["prompts.num"] > vit.num_patches:
        raise ConfigError(f"k-means coding needs prompts.num <= {vit.num_patches} patches")
    if not 0.0 < v["data.train_fraction"] < 1.0:
        raise ConfigError("data.train_fraction must lie in (0, 1)")
    train = TrainConfig(
        optimizer=v["train.optimizer"], lr=v["train.lr"], weight_decay=v["train.weight_decay"],
        momentum=v["train.momentum"], beta1=v["train.beta1"], beta2=v["train.beta2"],
        eps=v["train.eps"], epochs=v["train.epochs"], batch_size=v["train.batch_size"],
        seed=v["train.seed"], strategy=strategy, cosine_schedule=v["train.cosine_schedule"],
        record_time=v["train.record_time"],
    )  # fmt: skip
    data = SyntheticTaskSpec(
        kind=v["data.kind"], classes=vit.classes, samples_per_class=v["data.samples_per_class"],
        noise_std=v["data.noise_std"], image_h=vit.image_h, image_w=vit.image_w,
        patch=vit.patch, seed=v["data.seed"],
    )  # fmt: skip
    return RunConfig(
        vit, train, data, strategy, v["prompts.num"], v["vit.seed"], v["prompts.seed"],
        v["prompts.kmeans_iters"], v["data.train_fraction"], v["data.path"], v["out.dir"], v,
    )  # fmt: skip


def load_config(path) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {os.fspath(path)}")
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise FileIOError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc
    return parse_config_text(text, os.fspath(path))
