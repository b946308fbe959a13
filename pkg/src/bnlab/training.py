"""SGD training loop, learning-rate schedules, augmentation and evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T
from .architectures import Network
from .checkpoint import Checkpoint
from .datasets import Dataset
from .rng import Prng
from .trainability import TrainabilityMask

log = logging.getLogger(__name__)

CIFAR_SCHEDULE = ((80, 0.1), (120, 0.01))
IMAGENET_SCHEDULE = ((30, 0.1), (60, 0.01), (80, 0.001))


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, iteration {iteration}")
        self.epoch, self.iteration, self.loss = epoch, iteration, loss


@dataclass
class Hyperparams:
    epochs: int = 160
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple = CIFAR_SCHEDULE
    warmup_epochs: float = 0.0
    seeds: tuple = (0, 0, 0)  # (init, data_order, augmentation)
    mask_seed: int = 0
    augment: bool = True

    def __post_init__(self):
        self.schedule = tuple((float(e), float(m)) for e, m in self.schedule)
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) != 3:
            raise ValueError("seeds must be (init, data_order, augmentation)")
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("epochs, batch_size, base_lr and momentum must be in range")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("weight_decay and warmup_epochs must be non-negative")
        eps = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("schedule epochs must be strictly increasing")

    @classmethod
    def cifar(cls, **kw) -> "Hyperparams":
        return cls(**kw)

    @classmethod
    def imagenet(cls, **kw) -> "Hyperparams":
        d = dict(epochs=90, batch_size=1024, base_lr=0.4, schedule=IMAGENET_SCHEDULE, warmup_epochs=5)
        d.update(kw)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(p) for p in self.schedule]
        d["seeds"] = list(self.seeds)
        return d


def lr_at(iteration: int, epoch_length: int, hp: Hyperparams) -> float:
    """Step schedule times base LR, with a per-iteration linear warmup from 0."""
    epoch = iteration / epoch_length
    mult = 1.0
    for e, m in hp.schedule:
        if epoch >= e:
            mult = m
    warm = hp.warmup_epochs * epoch_length
    if warm > 0 and iteration < warm:
        return hp.base_lr * mult * iteration / warm
    return hp.base_lr * mult


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, T.Tensor], mask: TrainabilityMask) -> "OptimizerState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items() if mask.any(n)})


def sgd_step(params: dict[str, T.Tensor], gradients: dict[str, np.ndarray], mask: TrainabilityMask,
             state: OptimizerState, lr: float, momentum: float, weight_decay: float) -> None:
    """Classical momentum SGD with L2 decay coupled into the gradient.

    Frozen coordinates keep their exact bits: the decayed gradient is masked
    before it reaches the velocity and the update is applied with ``where``.
    """
    for name, v in state.velocity.items():
        p = params[name]
        m = mask[name]
        g = gradients.get(name)
        g = np.zeros_like(p.data) if g is None else g
        g = np.where(m, g + weight_decay * p.data, 0).astype(p.dtype, copy=False)
        v *= momentum
        v += g
        p.data = np.where(m, p.data - lr * v, p.data).astype(p.dtype, copy=False)


def _apply_augment(img: np.ndarray, flip: bool, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    """Flip, then translate by (dy - pad, dx - pad) with zero fill."""
    if flip:
        img = img[..., ::-1]
    h, w = img.shape[-2:]
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, dy:dy + h, dx:dx + w]


def augment_cifar(image: np.ndarray, rng: Prng, mean: np.ndarray | None = None, pad: int = 4) -> np.ndarray:
    """Random horizontal flip (p = 1/2), random translation of up to ``pad`` pixels, then mean subtraction."""
    flip = bool(rng.random() < 0.5)
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, 2))
    out = _apply_augment(image, flip, dy, dx, pad)
    return out - mean if mean is not None else out.copy()


def augment_batch(images: np.ndarray, rng: Prng, pad: int = 4) -> np.ndarray:
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, (n, 2))
    x = np.where(flips[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offs[i]
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    """Split ``order`` into batches; a trailing single example joins the previous batch."""
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


@dataclass
class EvalResult:
    accuracies: dict[int, float]
    n_examples: int
    std: dict[int, float] = field(default_factory=dict)
    replicates: list = field(default_factory=list)

    @property
    def top1(self) -> float:
        return self.accuracies[1]

    @property
    def top5(self) -> float:
        return self.accuracies.get(5, float("nan"))


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Ties rank the lowest class index first."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate(model, dataset: Dataset, topk: Iterable[int] = (1, 5), batch_size: int = 500) -> EvalResult:
    """Top-k accuracy with batchnorm in eval mode."""
    net = model.to_network() if isinstance(model, Checkpoint) else model
    ks = tuple(sorted(set(topk)))
    if ks[-1] > net.plan.num_classes or ks[0] < 1:
        raise ValueError(f"top-k values {ks} invalid for {net.plan.num_classes} classes")
    hits = {k: 0 for k in ks}
    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            idx = np.arange(i, min(i + batch_size, len(dataset)))
            logits = net.forward(dataset.normalized(idx), train=False).data
            y = dataset.labels[idx]
            for k in ks:
                hits[k] += int(topk_correct(logits, y, k).sum())
    n = len(dataset)
    return EvalResult({k: hits[k] / n for k in ks}, n)


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_loss: float
    top1: float
    top5: float
    wall_seconds: float


METRICS_COLUMNS = ["epoch", "lr", "train_loss", "top1", "top5", "wall_seconds"]


def train(net: Network, mask: TrainabilityMask, dataset: Dataset, hp: Hyperparams,
          eval_set: Dataset | None = None, on_epoch: Callable[[MetricsRow], None] | None = None,
          max_steps: int | None = None) -> tuple[Checkpoint, list[MetricsRow]]:
    """Train ``net`` in place; only coordinates allowed by ``mask`` move."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    trainable = [n for n in net.params if mask.any(n)]
    net.set_requires_grad(trainable)
    opt = OptimizerState.for_params(net.params, mask)
    data_rng = Prng(hp.seeds[1]).child("data_order")
    aug_rng = Prng(hp.seeds[2]).child("augmentation")
    n = len(dataset)
    steps_per_epoch = len(batches(n, hp.batch_size, np.arange(n)))
    eval_ks = (1, 5) if net.plan.num_classes >= 5 else (1,)
    it, rows, start = 0, [], time.perf_counter()
    for epoch in range(hp.epochs):
        order = data_rng.child(epoch).permutation(n)
        ep_aug = aug_rng.child(epoch)
        losses = []
        lr = lr_at(it, steps_per_epoch, hp)
        for idx in batches(n, hp.batch_size, order):
            if max_steps is not None and it >= max_steps:
                break
            x = dataset.images[idx]
            if hp.augment:
                x = augment_batch(x, ep_aug)
            if dataset.mean is not None:
                x = x - dataset.mean
            lr = lr_at(it, steps_per_epoch, hp)
            net.zero_grad()
            loss = T.softmax_cross_entropy(net.forward(x, train=True), dataset.labels[idx])
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise DivergenceError(epoch, it, lval)
            T.backward(loss)
            grads = {name: net.params[name].grad for name in trainable if net.params[name].grad is not None}
            sgd_step(net.params, grads, mask, opt, lr, hp.momentum, hp.weight_decay)
            losses.append(lval)
            it += 1
        res = evaluate(net, eval_set, eval_ks) if eval_set is not None else None
        row = MetricsRow(epoch + 1, lr, float(np.mean(losses)) if losses else float("nan"),
                         res.top1 if res else float("nan"), res.top5 if res else float("nan"),
                         time.perf_counter() - start)
        rows.append(row)
        log.info("epoch %d lr %.4g loss %.4f top1 %.4f", row.epoch, row.lr, row.train_loss, row.top1)
        if on_epoch:
            on_epoch(row)
    net.zero_grad()
    ckpt = Checkpoint.from_network(net, mask=mask.describe(), hyperparams=hp.to_dict(),
                                   seeds={"init": hp.seeds[0], "data_order": hp.seeds[1],
                                          "augmentation": hp.seeds[2], "mask": hp.mask_seed},
                                   epoch=hp.epochs)
    return ckpt, rows


def aggregate(results: list[EvalResult]) -> EvalResult:
    ks = sorted(results[0].accuracies)
    mean = {k: float(np.mean([r.accuracies[k] for r in results])) for k in ks}
    std = {k: float(np.std([r.accuracies[k] for r in results])) for k in ks}
    return EvalResult(mean, results[0].n_examples, std, results)


def run_replicates(config, n_replicates: int | None = None, vary_seeds: bool = True,
                   on_replicate: Callable | None = None) -> tuple[EvalResult, list]:
    """Train ``n`` independent replicates of a run configuration.

    Replicate ``r`` offsets the init, data-order and augmentation seeds by
    ``r``; the std is the population standard deviation over replicates.
    """
    from .config import prepare_run

    n = n_replicates if n_replicates is not None else config.replicates
    if n < 1:
        raise ValueError("need at least one replicate")
    results, outputs = [], []
    for r in range(n):
        off = r if vary_seeds else 0
        hp = config.hyperparams_for(off)
        net, mask, data = prepare_run(config, hp)
        ckpt, rows = train(net, mask, data["train"], hp, data["test"])
        ckpt.meta["dataset"] = config.dataset
        ckpt.meta["replicate"] = r
        res = evaluate(net, data["test"], (1, 5) if net.plan.num_classes >= 5 else (1,))
        results.append(res)
        outputs.append((ckpt, rows, res))
        if on_replicate:
            on_replicate(r, ckpt, rows, res)
    return aggregate(results), outputs
