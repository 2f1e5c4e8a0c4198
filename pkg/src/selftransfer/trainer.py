"""Minibatch SGD with momentum, step schedules, and best-validation selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .errors import ConfigError, DivergenceError, InputError
from .layers import one_hot
from .network import AlphaSchedule, NetworkConfig, STLNet, alpha_at, init_params
from .rng import Rng

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "alpha", "lr", "loss_total", "loss_cls", "loss_loc",
              "train_acc", "val_acc_cls", "val_acc_loc")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    lr_halving_period: int = 30
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 90
    alpha_schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    seed: int = 0
    deterministic: bool = True
    train_ratio: float = 0.8
    init_std: float = 0.01
    init_scheme: str = "fan_in"

    def __post_init__(self):
        if min(self.base_lr, self.momentum, self.weight_decay, self.init_std) < 0:
            raise ConfigError("rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.lr_halving_period < 1:
            raise ConfigError("epochs must be >= 0 and lr_halving_period >= 1")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError("train_ratio must lie in (0, 1)")
        if self.init_scheme not in ("gaussian", "fan_in"):
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")


@dataclass
class TrainLogRecord:
    epoch: int
    alpha: float
    lr: float
    loss_total: float
    loss_cls: float
    loss_loc: float
    train_acc: float
    val_acc_cls: float
    val_acc_loc: float

    def row(self):
        return [self.epoch] + [repr(float(getattr(self, f))) for f in LOG_FIELDS[1:]]


@dataclass
class TrainResult:
    best: Checkpoint
    log: list
    net: STLNet
    diverged: bool = False
    message: str = ""
    selection: list = field(default_factory=list)   # selection accuracy per epoch


def lr_at(config: TrainConfig, epoch: int) -> float:
    return config.base_lr * 2.0 ** -(epoch // config.lr_halving_period)


def split_dataset(labels, ratio: float, rng: Rng):
    """Stratified shuffled split; returns sorted (train_ids, val_ids)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ConfigError("ratio must lie in (0, 1)")
    train, val = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise InputError(f"class {cls} has {idx.size} sample(s); need at least 2 to split")
        idx = idx[rng.permutation(idx.size)]
        k = int(round(ratio * idx.size))
        k = min(max(k, 1), idx.size - 1)
        train.append(idx[:k])
        val.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def sgd_step(params, lr: float, momentum: float, weight_decay: float):
    """``v = momentum*v - lr*(g + wd*w); w += v`` for every parameter, in place."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {p.name}", p.name)
    for p in params:
        step = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.momentum *= momentum
        p.momentum -= lr * step
        p.value += p.momentum


def train_step(net: STLNet, x, targets, alpha: float, lr: float, momentum: float,
               weight_decay: float):
    """One forward/backward/update; returns ((total, cls, loc), output, probe)."""
    out = net.forward(x, train=True)
    losses = net.losses(targets, alpha)
    if not math.isfinite(losses[0]):
        raise DivergenceError(f"non-finite loss {losses[0]}")
    probe = net.backward(targets, alpha)
    sgd_step(net.params, lr, momentum, weight_decay)
    return losses, out, probe


def selection_head(net: STLNet, alpha: float) -> str:
    """Head whose validation accuracy drives model selection at this ``alpha``."""
    if not net.classifier:
        return "loc"
    if not net.localizer:
        return "cls"
    return "loc" if alpha >= 0.5 else "cls"


def predict(net: STLNet, images, batch_size: int = 256):
    """Eval-mode probabilities (y_cls, y_loc, score_maps); missing heads give None."""
    ys_cls, ys_loc, maps = [], [], []
    for start in range(0, len(images), batch_size):
        out = net.forward(images[start:start + batch_size], train=False)
        if out.y_cls is not None:
            ys_cls.append(out.y_cls)
        if out.y_loc is not None:
            ys_loc.append(out.y_loc)
            maps.append(out.score_maps)
    net._cache = None
    cat = lambda xs: np.concatenate(xs) if xs else None  # noqa: E731
    return cat(ys_cls), cat(ys_loc), cat(maps)


def _accuracy(probs, labels):
    if probs is None:
        return float("nan")
    return float(np.mean(probs.argmax(axis=1) == labels))


def build_net(net_config: NetworkConfig, config: TrainConfig, dtype=np.float32):
    root = Rng(config.seed)
    net = STLNet(net_config, dtype)
    init_params(net, root.spawn("init"), config.init_std, config.init_scheme)
    net.set_dropout_rng(root.spawn("dropout"))
    return net


def train(net_config: NetworkConfig, config: TrainConfig, dataset: Dataset,
          net: STLNet | None = None, progress=None) -> TrainResult:
    """Train on an 80/20 stratified split and keep the best validation checkpoint.

    Selection uses the classifier's validation accuracy while alpha < 0.5 and
    the localizer's afterwards; when the selected head changes, the best
    score restarts so the returned model comes from the latest phase.
    """
    if dataset.images.shape[1:] != (net_config.in_channels,) + net_config.input_size:
        raise ConfigError(f"dataset images {dataset.images.shape[1:]} do not match network "
                          f"input {(net_config.in_channels,) + net_config.input_size}")
    root = Rng(config.seed)
    if net is None:
        net = build_net(net_config, config)
    split_rng, shuffle_rng = root.spawn("split"), root.spawn("shuffle")
    train_idx, val_idx = split_dataset(dataset.labels, config.train_ratio, split_rng)
    x_train, y_train = dataset.images[train_idx], dataset.labels[train_idx]
    x_val, y_val = dataset.images[val_idx], dataset.labels[val_idx]
    k = net_config.num_classes

    def rng_states():
        states = {"shuffle": shuffle_rng.state, "split": split_rng.state}
        if net.dropout_rng is not None:
            states["dropout"] = net.dropout_rng.state
        return states

    best = Checkpoint.from_net(net, -1, float("nan"), rng_states())
    best_score, best_head = -1.0, None
    records, selection = [], []
    diverged, message = False, ""
    for epoch in range(config.epochs):
        alpha = alpha_at(config.alpha_schedule, epoch)
        lr = lr_at(config, epoch)
        head = selection_head(net, alpha)
        order = shuffle_rng.permutation(len(train_idx))
        sums = np.zeros(3)
        correct = 0
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                t = one_hot(y_train[idx], k, net.dtype)
                losses, out, _ = train_step(net, x_train[idx], t, alpha, lr,
                                            config.momentum, config.weight_decay)
                sums += np.array(losses) * len(idx)
                probs = out.y_loc if head == "loc" else out.y_cls
                correct += int(np.sum(probs.argmax(axis=1) == y_train[idx]))
        except DivergenceError as exc:
            diverged, message = True, f"epoch {epoch}: {exc}"
            log.error("training diverged at %s", message)
            break
        y_cls, y_loc, _ = predict(net, x_val)
        acc_cls, acc_loc = _accuracy(y_cls, y_val), _accuracy(y_loc, y_val)
        rec = TrainLogRecord(epoch, alpha, lr, *(sums / len(order)),
                             correct / len(order), acc_cls, acc_loc)
        records.append(rec)
        score = acc_loc if head == "loc" else acc_cls
        selection.append(score)
        if head != best_head:
            best_score, best_head = -1.0, head
        if score > best_score:
            best_score = score
            best = Checkpoint.from_net(net, epoch, score, rng_states())
        if progress is not None:
            progress(rec)
        log.info("epoch %d alpha %.2f lr %.5f loss %.4f train %.3f val cls %.3f loc %.3f",
                 epoch, alpha, lr, rec.loss_total, rec.train_acc, acc_cls, acc_loc)
    return TrainResult(best, records, net, diverged, message, selection)


def grid_search_weight_decay(net_config, config: TrainConfig, dataset,
                             grid=(1e-3, 5e-4, 1e-4), progress=None):
    """Train once per weight decay; keep the run with the best validation accuracy."""
    results = []
    for wd in grid:
        res = train(net_config, replace(config, weight_decay=wd), dataset, progress=progress)
        results.append((wd, res))
    ok = [r for r in results if not r[1].diverged] or results
    return max(ok, key=lambda r: (r[1].best.val_accuracy, -r[0])), results


def write_log_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for rec in records:
            w.writerow(rec.row())


def read_log_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainLogRecord(int(r["epoch"]), *(float(r[f]) for f in LOG_FIELDS[1:]))
            for r in rows]
