"""
Standard and PGD-adversarial training with seeded SGD, plus the ``ADVT``
model file format.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .attacks import AttackConfig, pgd_batch
from .errors import ConfigError, FormatError, PreconditionError, TrainingDiverged, VersionError
from .reports import atomic_write_bytes, write_csv

MODEL_MAGIC = b"ADVT"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    seed: int = 0
    adversarial: AttackConfig | None = None

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.adversarial is not None and self.adversarial.kind != "pgd":
            raise ConfigError("adversarial training uses PGD")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    adversarial: bool = False

    def row(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "adv_batch": int(self.adversarial),
        }


LOG_COLUMNS = ("epoch", "train_loss", "train_acc")


def write_train_log(path, log):
    columns = LOG_COLUMNS + (("adv_batch",) if any(e.adversarial for e in log) else ())
    write_csv(path, [e.row() for e in log], columns)


def ce_loss(logits, labels, idx):
    loss, g = nn.cross_entropy(logits, labels)
    return loss, g, {}


def _start(model, seed):
    if isinstance(model, nn.ModelSpec):
        return nn.Network.create(model, seed)
    return model.copy()


def fit(model, images, labels, cfg, loss_fn=ce_loss, on_step=None, on_epoch=None):
    """
    Mini-batch SGD over ``(images, labels)``; the shared loop behind
    :func:`train`, :func:`adversarial_train` and distillation.

    ``loss_fn(logits, labels, batch_idx)`` returns ``(loss, dlogits, extras)``
    where ``batch_idx`` are row positions into ``images``.  Adversarial rows
    appended in PGD mode carry the same positions as their clean sources.
    ``on_epoch(epoch, net)`` runs after each epoch's updates.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise PreconditionError("cannot train on an empty dataset")
    net = _start(model, cfg.seed)
    p = net.spec.num_classes
    if labels.min() < 0 or labels.max() >= p:
        raise PreconditionError(f"labels outside [0, {p})")
    rng = np.random.default_rng(cfg.seed)
    momentum = cfg.momentum if cfg.optimizer == "sgd-momentum" else 0.0
    lr = np.float32(cfg.learning_rate)
    mu = np.float32(momentum)
    velocity = {i: {k: np.zeros_like(v) for k, v in blk.items()} for i, blk in net.params.items()}
    log = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if cfg.adversarial is not None:
                adv = pgd_batch(net, xb, cfg.adversarial, labels=yb, early_stop=False).adversarial
                xb = np.concatenate([xb, adv])
                yb = np.concatenate([yb, yb])
                idx = np.concatenate([idx, idx])
            if on_step is not None:
                on_step(step, xb, yb)
            logits = nn.forward(net, xb)
            loss, g, _ = loss_fn(logits, yb, idx)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            _, grads = nn.backward_logits(net, xb, g)
            for i, blk in net.params.items():
                for k in blk:
                    v = velocity[i][k]
                    v *= mu
                    v -= lr * grads[i][k]
                    blk[k] += v
            total_loss += loss * yb.shape[0]
            correct += int((nn.argmax_lowest(logits) == yb).sum())
            seen += yb.shape[0]
            step += 1
        epoch_loss = total_loss / seen
        if not math.isfinite(epoch_loss) or not all(
            np.all(np.isfinite(v)) for blk in net.params.values() for v in blk.values()
        ):
            raise TrainingDiverged(epoch, epoch_loss)
        log.append(EpochLog(epoch, epoch_loss, correct / seen, cfg.adversarial is not None))
        if on_epoch is not None:
            on_epoch(epoch, net)
    return net, log


def train(model, dataset, cfg, on_step=None):
    """Plain cross-entropy training; returns ``(network, per-epoch log)``."""
    if cfg.adversarial is not None:
        raise ConfigError("train() got an adversarial config; use adversarial_train()")
    return fit(model, dataset.images, dataset.labels, cfg, on_step=on_step)


def adversarial_train(model, dataset, cfg, on_step=None):
    """
    PGD adversarial training: every batch is the union of its clean samples
    and their PGD counterparts, regenerated from the current weights.
    """
    if cfg.adversarial is None:
        raise ConfigError("adversarial_train() needs cfg.adversarial")
    return fit(model, dataset.images, dataset.labels, cfg, on_step=on_step)


def accuracy(net, images, labels, chunk=512):
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise PreconditionError("accuracy of an empty set")
    correct = 0
    for s in range(0, images.shape[0], chunk):
        correct += int((np.atleast_1d(nn.predict(net, images[s : s + chunk])) == labels[s : s + chunk]).sum())
    return correct / images.shape[0]


# ---------------------------------------------------------------------------
# model files
#
#   "ADVT" | u16 version | u32 spec length | spec JSON (utf-8)
#   | float32 LE parameters (layer order, W then b) | u32 CRC-32 of all preceding bytes


def encode_model(net):
    spec = json.dumps(net.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    body = MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(spec)) + spec
    for i in sorted(net.params):
        for name in ("W", "b"):
            body += np.ascontiguousarray(net.params[i][name], dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_model(raw, path=None):
    if len(raw) < 4 or raw[:4] != MODEL_MAGIC:
        raise FormatError("bad magic, expected ADVT", offset=0, path=path)
    if len(raw) < 10:
        raise FormatError("truncated header", offset=len(raw), path=path)
    version, spec_len = struct.unpack_from("<HI", raw, 4)
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model version {version}", offset=4, path=path)
    off = 10
    if len(raw) < off + spec_len:
        raise FormatError("truncated spec block", offset=len(raw), path=path)
    try:
        spec = nn.ModelSpec.from_dict(json.loads(raw[off : off + spec_len].decode()))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable spec block: {exc}", offset=off, path=path) from None
    off += spec_len
    params = {}
    for i, shapes in sorted(spec.param_shapes().items()):
        params[i] = {}
        for name in ("W", "b"):
            count = int(np.prod(shapes[name]))
            if len(raw) < off + 4 * count:
                raise FormatError("truncated parameter payload", offset=len(raw), path=path)
            params[i][name] = (
                np.frombuffer(raw, dtype="<f4", count=count, offset=off)
                .reshape(shapes[name])
                .astype(np.float32)
            )
            off += 4 * count
    if len(raw) != off + 4:
        raise FormatError(
            f"expected 4-byte checksum after payload, found {len(raw) - off} bytes",
            offset=off, path=path,
        )
    (stored,) = struct.unpack_from("<I", raw, off)
    if stored != zlib.crc32(raw[:off]):
        raise FormatError("checksum mismatch", offset=off, path=path)
    return nn.Network(spec, params)


def save_model(path, net):
    atomic_write_bytes(path, encode_model(net))


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return decode_model(path.read_bytes(), path=path)
