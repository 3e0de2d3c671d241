"""Deterministic training and evaluation over the trainable partition."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .backbone import BackboneWeights
from .data import Dataset
from .errors import ConfigError, NumericAbort, NumericError
from .prompts import PromptBank, StrategyKind, lspt_forward, param_partition

OPTIMIZERS = ("sgd_momentum", "adamw")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    strategy: StrategyKind = StrategyKind.LSPT
    cosine_schedule: bool = False
    record_time: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr >= 0:
            raise ConfigError("train.lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be non-negative")
        object.__setattr__(self, "strategy", StrategyKind(self.strategy))


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "OptimizerState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float


@dataclass
class Metrics:
    epochs: list[EpochMetrics] = field(default_factory=list)

    def to_csv(self, record_time: bool = True) -> str:
        """CSV text; with ``record_time=False`` the seconds column is written as 0."""
        lines = ["epoch,train_loss,train_acc,val_acc,seconds"]
        for e in self.epochs:
            secs = e.seconds if record_time else 0.0
            lines.append(f"{e.epoch},{e.train_loss:.6f},{e.train_acc:.6f},{e.val_acc:.6f},{secs:.6f}")
        return "\n".join(lines) + "\n"


def sgd_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState,
             config: TrainConfig, lr: float | None = None) -> None:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""
    lr = config.lr if lr is None else lr
    state.step += 1
    for k, (p, g) in enumerate(zip(params, grads)):
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        state.m[k] = config.momentum * state.m[k] + g
        p.data = p.data - lr * state.m[k]


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState,
               config: TrainConfig, lr: float | None = None) -> None:
    """Adam with decoupled weight decay."""
    lr = config.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        update = (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + config.eps)
        data = p.data
        if config.weight_decay:
            data = data - lr * config.weight_decay * data
        p.data = data - lr * update


_STEPS = {"sgd_momentum": sgd_step, "adamw": adamw_step}


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    if not config.cosine_schedule or total <= 1:
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / (total - 1)))


def predict(dataset: Dataset, backbone: BackboneWeights, bank: PromptBank,
            strategy: StrategyKind | str | None = None, batch_size: int = 64) -> np.ndarray:
    """Logits for every sample, evaluated without recording a graph."""
    out = []
    for s in range(0, len(dataset), batch_size):
        logits, _ = lspt_forward(dataset.images[s : s + batch_size], backbone, bank, strategy, trace=False)
        out.append(logits.data)
    if not out:
        return np.zeros((0, bank.classes))
    return np.concatenate(out, axis=0)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = true class, cols = predicted

    def confusion_csv(self) -> str:
        K = self.confusion.shape[0]
        lines = ["true," + ",".join(f"pred_{k}" for k in range(K))]
        for k in range(K):
            lines.append(f"{k}," + ",".join(str(int(v)) for v in self.confusion[k]))
        return "\n".join(lines) + "\n"


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray, classes: int) -> EvalResult:
    """Argmax prediction; ties resolve to the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.argmax(logits, axis=1) if len(labels) else np.zeros(0, dtype=np.int64)
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    acc = float((pred == labels).mean()) if len(labels) else 0.0
    return EvalResult(acc, conf)


def evaluate(dataset: Dataset, backbone: BackboneWeights, bank: PromptBank,
             strategy: StrategyKind | str | None = None) -> EvalResult:
    return accuracy_from_logits(predict(dataset, backbone, bank, strategy), dataset.labels, bank.classes)


def train(
    dataset: Dataset,
    backbone: BackboneWeights,
    bank: PromptBank,
    config: TrainConfig,
    val: Dataset | None = None,
    log=None,
    until=None,
) -> tuple[PromptBank, Metrics]:
    """Optimise the trainable partition of ``bank`` in place and return it with metrics.

    Shuffling uses ``default_rng([seed, epoch])``, so the batch order is a
    pure function of the config. ``log`` is called with each epoch's
    metrics; training stops early once ``until(metrics)`` returns true.
    """
    strategy = config.strategy
    params = [t for _, t in param_partition(strategy, bank).trainable]
    state = OptimizerState.for_params(params)
    step_fn = _STEPS[config.optimizer]
    n = len(dataset)
    per_epoch = -(-n // config.batch_size) if n else 0
    total = per_epoch * config.epochs
    metrics = Metrics()
    images = dataset.images
    labels = dataset.labels

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            where = f"epoch {epoch}, batch {b + 1} (step {state.step + 1})"
            try:
                with Graph() as g:
                    logits, _ = lspt_forward(images[idx], backbone, bank, strategy, trace=False)
                    loss = ad.cross_entropy(logits, labels[idx])
            except NumericError as exc:
                raise NumericAbort(f"{exc} at {where}") from exc
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise NumericAbort(f"non-finite loss {lv} at {where}")
            grads = g.backward(loss, params)
            step_fn(params, grads, state, config, _lr_at(config, state.step, total))
            loss_sum += lv * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
        val_acc = evaluate(val, backbone, bank, strategy).accuracy if val is not None and len(val) else 0.0
        em = EpochMetrics(epoch, loss_sum / max(n, 1), correct / max(n, 1), val_acc, time.perf_counter() - t0)
        metrics.epochs.append(em)
        if log is not None:
            log(em)
        if until is not None and until(em):
            break
    return bank, metrics
