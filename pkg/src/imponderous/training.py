"""Adamax with parameter groups, the per-head ensemble loss, epochs and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ImageSet, hflip, oversample_indices
from .model import ForwardOutput, ModelConfig, forward, predict_batch
from .tensor import Tape, Variable, add, backward, scale, softmax_cross_entropy

log = logging.getLogger(__name__)

MIRROR_TRAIN_MODES = ("augment", "double", "off")


class GradientMissingError(RuntimeError):
    """An optimizer step was asked to update a parameter that has no gradient."""


@dataclass(frozen=True)
class ParamGroup:
    prefix: str
    lr: float
    weight_decay: float


@dataclass
class AdamaxState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    lr_base: float = 1e-3
    lr_rest: float = 1e-2
    weight_decay: float = 4e-5
    oversample: bool = False
    mirror_train: str = "augment"
    loss_reduction: str = "sum"
    micro_batch: int = 16

    def __post_init__(self):
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("batch_size and micro_batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.mirror_train not in MIRROR_TRAIN_MODES:
            raise ValueError(f"mirror_train must be one of {MIRROR_TRAIN_MODES}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")


def default_param_groups(cfg: TrainConfig) -> list[ParamGroup]:
    """Base at ``lr_base``; attention and heads at ``lr_rest``.

    ECA kernels get no weight decay: shrinking a 5-tap kernel only pulls
    attention back towards a flat 0.5.
    """
    return [
        ParamGroup("base.", cfg.lr_base, cfg.weight_decay),
        ParamGroup("eca.", cfg.lr_rest, 0.0),
        ParamGroup("head.", cfg.lr_rest, cfg.weight_decay),
    ]


def _group_for(name: str, groups) -> ParamGroup:
    hits = [g for g in groups if name.startswith(g.prefix)]
    if len(hits) != 1:
        raise ValueError(f"parameter {name!r} matches {len(hits)} parameter groups, expected exactly one")
    return hits[0]


def adamax_step(params: dict[str, Variable], state: AdamaxState, groups, grads: dict | None = None) -> None:
    """One in-place Adamax update with decoupled weight decay.

    ``grads`` defaults to each parameter's ``.grad``.  Bias vectors are never
    decayed.
    """
    lookup = {}
    for name, var in params.items():
        g = var.grad if grads is None else grads.get(name)
        if g is None:
            raise GradientMissingError(f"no gradient for parameter {name!r}")
        lookup[name] = (var, g, _group_for(name, groups))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction = 1.0 - b1 ** state.t
    for name, (var, g, group) in lookup.items():
        theta = var.value
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.u[name] = np.zeros_like(theta)
        u = state.u[name]
        m *= b1
        m += (1.0 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        wd = 0.0 if name.endswith(".bias") else group.weight_decay
        if wd:
            theta -= group.lr * wd * theta
        theta -= (group.lr / correction) * m / (u + state.eps)


def zero_grads(params: dict[str, Variable]) -> None:
    for var in params.values():
        var.zero_grad()


def ensemble_loss(output: ForwardOutput, labels, reduction: str = "sum") -> Variable:
    """Every head is supervised on its own; losses are summed (or averaged)."""
    losses = [softmax_cross_entropy(logits, labels) for logits in output.per_head_logits]
    total = losses[0]
    for extra in losses[1:]:
        total = add(total, extra)
    if reduction == "mean":
        total = scale(total, 1.0 / len(losses))
    return total


def _epoch_order(dataset: ImageSet, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.oversample:
        return oversample_indices(dataset.labels, seed=int(rng.integers(2 ** 63)))
    return rng.permutation(len(dataset))


def train_epoch(params: dict[str, Variable], state: AdamaxState, dataset: ImageSet,
                model_config: ModelConfig, cfg: TrainConfig, epoch: int = 0,
                groups=None) -> float:
    """One pass over ``dataset``; returns the sample-weighted mean loss.

    Each batch is processed in micro-batches whose gradients are summed
    before a single optimizer step, so ``batch_size`` stays the effective
    batch regardless of memory.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    groups = groups or default_param_groups(cfg)
    rng = np.random.default_rng([cfg.seed, epoch])
    order = _epoch_order(dataset, cfg, rng)
    total, seen = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        images = dataset.get_batch(idx)
        labels = dataset.labels[idx]
        if cfg.mirror_train == "augment":
            flip = rng.random(len(idx)) < 0.5
            images = np.where(flip[:, None, None, None], hflip(images), images)
        elif cfg.mirror_train == "double":
            images = np.concatenate([images, hflip(images)])
            labels = np.concatenate([labels, labels])
        batch = len(labels)
        zero_grads(params)
        batch_loss = 0.0
        for mb in range(0, batch, cfg.micro_batch):
            sl = slice(mb, mb + cfg.micro_batch)
            weight = len(labels[sl]) / batch
            with Tape() as tape:
                out = forward(params, model_config, Variable(images[sl]))
                loss = scale(ensemble_loss(out, labels[sl], cfg.loss_reduction), weight)
            backward(tape, loss)
            batch_loss += float(loss.value)
            del tape, out, loss
        adamax_step(params, state, groups)
        total += batch_loss * len(idx)
        seen += len(idx)
        log.debug("epoch %d batch %d loss %.5f", epoch, start // cfg.batch_size, batch_loss)
    return total / seen


@dataclass
class EvalReport:
    accuracy: float
    confusion: list
    per_class: list

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion, "per_class": self.per_class}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def report_from_predictions(labels, predicted, num_classes: int) -> EvalReport:
    """Accuracy, confusion (rows true, columns predicted) and per-class recall.

    Classes absent from ``labels`` report a per-class accuracy of 0.0.
    """
    labels = np.asarray(labels)
    predicted = np.asarray(predicted)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    support = confusion.sum(axis=1)
    diag = np.diag(confusion)
    per_class = np.divide(diag, support, out=np.zeros(num_classes), where=support > 0)
    return EvalReport(
        accuracy=float(diag.sum() / max(1, confusion.sum())),
        confusion=confusion.tolist(),
        per_class=[float(v) for v in per_class],
    )


def evaluate(params: dict[str, Variable], config: ModelConfig, dataset: ImageSet,
             mirror: bool = True, batch_size: int = 16) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    predicted = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        probs = predict_batch(params, config, dataset.get_batch(idx), mirror=mirror)
        predicted.append(probs.argmax(axis=1))  # first maximum: lowest class wins ties
    return report_from_predictions(dataset.labels, np.concatenate(predicted), config.num_classes)
