from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import ModelSpec, Network

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    learning_rate: float = 0.01
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {"train_loss": list(self.train_loss), "val_accuracy": list(self.val_accuracy),
                "steps": self.steps, "best_epoch": self.best_epoch}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls([float(v) for v in d["train_loss"]], [float(v) for v in d["val_accuracy"]],
                   int(d["steps"]), int(d["best_epoch"]))


def evaluate_accuracy(net: Network, x, labels, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = np.argmax(net.predict_proba(x, batch_size), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def fit(net: Network, x_train, y_train, x_val, y_val, cfg: TrainConfig,
        on_epoch: Optional[Callable[[int, float, float], None]] = None) -> TrainHistory:
    """Mini-batch training in place; ``net`` ends holding the best-validation weights.

    Ties on validation accuracy keep the earliest epoch.
    """
    x_train = np.asarray(x_train, dtype=net.dtype)
    y_train = np.asarray(y_train, dtype=np.int64)
    n = len(y_train)
    if n == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    momentum = cfg.momentum if cfg.optimizer == "momentum" else 0.0
    history = TrainHistory()
    best_acc, best_state = -1.0, None

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = net.loss_and_grad(x_train[idx], y_train[idx], rng=rng)
            net.step(cfg.learning_rate, momentum)
            history.steps += 1
            total += loss * len(idx)
        train_loss = total / n
        val_acc = evaluate_accuracy(net, x_val, y_val)
        history.train_loss.append(train_loss)
        history.val_accuracy.append(val_acc)
        if val_acc > best_acc or best_state is None:
            best_acc, best_state = val_acc, net.state_dict()
            history.best_epoch = epoch
        log.debug("epoch %d loss %.4f val_acc %.4f", epoch + 1, train_loss, val_acc)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_acc)

    net.load_state_dict(best_state)
    return history


def train(model_spec: ModelSpec, train_set, val_set, cfg: TrainConfig = TrainConfig(),
          feature_kind=None, metadata: Optional[dict] = None, dtype=np.float32):
    """Initialise a network from ``model_spec``, fit it and wrap the result as a checkpoint.

    ``train_set`` and ``val_set`` are ``(maps, labels)`` pairs.
    """
    from .checkpoint import ModelCheckpoint

    net = Network(model_spec, seed=cfg.seed, dtype=dtype)
    history = fit(net, *train_set, *val_set, cfg)
    return ModelCheckpoint(model_spec, net.state_dict(), feature_kind, cfg, history, dict(metadata or {}))
