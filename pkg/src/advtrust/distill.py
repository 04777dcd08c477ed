"""
Knowledge distillation on a small, per-class budgeted transfer set.

The student minimises ``(1 - lam) * tau^2 * KL(teacher_tau || student_tau)
+ lam * CE(student, y)`` over the selected samples only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import BudgetError, ConfigError, PreconditionError
from .reports import write_csv, write_json
from .training import TrainConfig, accuracy, fit

STRATEGIES = ("random", "closest_ddb", "trust_topk")
LOG_COLUMNS = ("epoch", "kd_loss", "ce_loss", "total", "val_acc")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 8.0
    lam: float = 0.2
    budget: int = 10
    strategy: str = "trust_topk"
    seed: int = 0
    epochs: int = 60
    learning_rate: float = 0.02
    batch_size: int = 16
    momentum: float = 0.9

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if int(self.budget) != self.budget or self.budget < 1:
            raise ConfigError(f"budget must be a positive integer, got {self.budget}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown selection strategy {self.strategy!r}")

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            optimizer="sgd-momentum" if self.momentum > 0 else "sgd",
            momentum=self.momentum, seed=self.seed,
        )


@dataclass
class TransferSet:
    ids: np.ndarray
    labels: np.ndarray
    budget: int
    strategy: str

    def per_class_counts(self, num_classes):
        return np.bincount(self.labels, minlength=num_classes)

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "budget": self.budget,
            "ids": [int(i) for i in self.ids],
        }

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path, dataset):
        doc = json.loads(Path(path).read_text())
        ids = np.array(doc["ids"], dtype=np.int64)
        return cls(ids, dataset.subset(ids).labels, doc["budget"], doc["strategy"])


def select_transfer_set(profiles, dataset, cfg):
    """
    Pick exactly ``cfg.budget`` samples per class.

    ``random`` draws uniformly per class from a seeded generator,
    ``closest_ddb`` takes the smallest raw boundary distances and
    ``trust_topk`` the largest trust scores.  Ties go to the lower sample id.
    """
    by_id = {int(p.sample_id): p for p in profiles}
    missing = [int(i) for i in dataset.ids if int(i) not in by_id]
    if missing:
        raise PreconditionError(f"no profile for sample ids {missing[:5]}")
    b = cfg.budget
    index = dataset.class_index()
    short = {c: len(ids) for c, ids in index.items() if len(ids) < b}
    if short:
        raise BudgetError(f"budget {b} per class exceeds class sizes {short}")
    rng = np.random.default_rng(cfg.seed)
    chosen, labels = [], []
    for c in range(dataset.num_classes):
        ids = index[c]
        if cfg.strategy == "random":
            pick = np.sort(rng.choice(ids, size=b, replace=False))
        else:
            if cfg.strategy == "closest_ddb":
                key = np.array([by_id[int(i)].d_f for i in ids])
            else:
                key = -np.array([by_id[int(i)].T for i in ids])
            pick = ids[np.lexsort((ids, key))[:b]]
        chosen.append(pick)
        labels.append(np.full(b, c, dtype=np.int64))
    return TransferSet(np.concatenate(chosen), np.concatenate(labels), b, cfg.strategy)


def kd_loss(student_logits, teacher_logits, label, temperature, lam):
    """
    Distillation loss and its gradient w.r.t. the student logits.

    Returns ``(total, grad, kd_term, ce_term)``; for a batch every term is the
    batch mean.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    s = np.asarray(student_logits)
    t = np.asarray(teacher_logits)
    if s.shape != t.shape:
        raise PreconditionError(f"student logits {s.shape} vs teacher logits {t.shape}")
    single = s.ndim == 1
    s2 = s[None] if single else s
    t2 = t[None] if single else t
    m = s2.shape[0]
    tau = float(temperature)
    log_q = nn.log_softmax(s2.astype(np.float64) / tau)
    log_p = nn.log_softmax(t2.astype(np.float64) / tau)
    p = np.exp(log_p)
    kl = float((p * (log_p - log_q)).sum(axis=1).mean())
    kd_term = tau * tau * kl
    ce_term, ce_grad = nn.cross_entropy(s2.astype(np.float64), np.atleast_1d(label))
    kd_grad = tau * (np.exp(log_q) - p) / m
    total = (1.0 - lam) * kd_term + lam * ce_term
    grad = (1.0 - lam) * kd_grad + lam * ce_grad
    grad = grad.astype(s.dtype if s.dtype.kind == "f" else np.float64)
    return total, (grad[0] if single else grad), kd_term, ce_term


@dataclass
class DistillEpoch:
    epoch: int
    kd_loss: float
    ce_loss: float
    total: float
    val_acc: float

    def row(self):
        return dict(self.__dict__)


def distill(teacher, student, dataset, profiles, cfg, val=None, transfer=None):
    """
    Train ``student`` (a :class:`ModelSpec` or initial network) on the
    selected transfer set against a frozen ``teacher``.

    Returns ``(student_net, log, transfer_set)``.
    """
    if transfer is None:
        transfer = select_transfer_set(profiles, dataset, cfg)
    subset = dataset.subset(transfer.ids)
    teacher_logits = nn.forward(teacher, subset.images).astype(np.float64)
    tau, lam = cfg.temperature, cfg.lam
    running = {"kd": 0.0, "ce": 0.0, "total": 0.0, "n": 0}

    def loss_fn(logits, labels, idx):
        total, grad, kd_term, ce_term = kd_loss(logits, teacher_logits[idx], labels, tau, lam)
        m = labels.shape[0]
        running["kd"] += kd_term * m
        running["ce"] += ce_term * m
        running["total"] += total * m
        running["n"] += m
        return total, grad, {}

    log = []

    def on_epoch(epoch, net):
        n = running["n"]
        acc = accuracy(net, val.images, val.labels) if val is not None and len(val) else float("nan")
        log.append(DistillEpoch(epoch, running["kd"] / n, running["ce"] / n, running["total"] / n, acc))
        running.update(kd=0.0, ce=0.0, total=0.0, n=0)

    net, _ = fit(student, subset.images, subset.labels, cfg.train_config(), loss_fn=loss_fn,
                 on_epoch=on_epoch)
    return net, log, transfer


def write_distill_log(path, log):
    write_csv(path, [e.row() for e in log], LOG_COLUMNS)
