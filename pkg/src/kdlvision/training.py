"""Regularised cross-entropy objective and the epoch loop."""

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_parameters, sidecar_path, write_config
from .dataset import make_batches
from .errors import Diverged, EmptySplit, LabelOutOfRange
from .optim import make_optimizer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-4
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if self.lr < 0 or self.l2 < 0:
            raise ValueError("lr and l2 must be non-negative")
        if self.optimizer not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string values (config files); unknown keys raise KeyError."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in types:
                raise KeyError(key)
            kwargs[key] = types[key](value)
        return cls(**kwargs)

    def to_mapping(self):
        return dataclasses.asdict(self)


@dataclass
class Regularizer:
    """L2 penalty ``weight * sum(theta^2)`` over trainable non-bias parameters."""

    weight: float = 0.0
    kind: str = "l2"

    def covers(self, path, param):
        return not param.frozen and not path.endswith("bias")

    def __call__(self, params):
        terms = [T.tsum(T.mul(p, p)) for path, p in params.items() if self.covers(path, p)]
        if not terms or self.weight == 0:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return T.scale(total, self.weight)


def compute_loss(logits, labels, regularizer=None, params=None):
    """Mean softmax cross-entropy plus the optional regulariser term."""
    labels = np.asarray(labels)
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    loss = T.cross_entropy(logits, labels)
    if regularizer is not None and params is not None:
        penalty = regularizer(params)
        if penalty is not None:
            loss = T.add(loss, penalty)
    return loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    wall_seconds: float


@dataclass
class TrainingCurve:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_accuracy", "wall_seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_accuracy), f"{r.wall_seconds:.3f}"])

    @classmethod
    def read_csv(cls, path):
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([
            EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_accuracy"]), float(r["wall_seconds"]))
            for r in rows
        ])


@dataclass
class TrainResult:
    params: object
    curve: TrainingCurve
    best_epoch: int
    best_val_accuracy: float


class BackboneCache:
    """Frozen expert features keyed by record path.

    Expert backbones never change during training, so their activations on a
    fixed input are computed once, in record order and fixed-size chunks.
    """

    def __init__(self, model, preprocess, batch_size=64):
        self.model = model
        self.preprocess = preprocess
        self.batch_size = batch_size
        self.store = {}

    def ensure(self, records):
        todo = [r for r in records if r.relative_path not in self.store]
        for start in range(0, len(todo), self.batch_size):
            chunk = todo[start : start + self.batch_size]
            x = np.stack([self.preprocess(r) for r in chunk])
            with T.no_grad():
                feats = self.model.backbone_features(x)
            for i, r in enumerate(chunk):
                self.store[r.relative_path] = [f[i] for f in feats]

    def lookup(self, paths):
        per_record = [self.store[p] for p in paths]
        return [np.stack([f[e] for f in per_record]) for e in range(len(per_record[0]))]


def forward_logits(model, batch, cache=None):
    if cache is not None:
        return model(batch.inputs, backbone_features=cache.lookup(batch.paths))
    return model(batch.inputs)


def predict(model, batches, cache=None):
    """Return (labels, argmax predictions) over a batch stream; ties go to the lowest class."""
    labels, preds = [], []
    with T.no_grad():
        for batch in batches:
            logits = forward_logits(model, batch, cache)
            preds.append(np.argmax(logits.data, axis=1))
            labels.append(batch.labels)
    if not labels:
        raise EmptySplit("no samples to evaluate")
    return np.concatenate(labels), np.concatenate(preds)


def evaluate_accuracy(model, batches, cache=None):
    labels, preds = predict(model, batches, cache)
    return float(np.count_nonzero(labels == preds)) / len(labels)


def _save(model, params, path):
    save_parameters(path, params)
    cfg = model.config_dict() if hasattr(model, "config_dict") else {}
    write_config(sidecar_path(path), cfg)


def train(model, train_records, val_records, config, preprocess, out_dir=None, eval_batch_size=64):
    """Minimise the regularised objective; returns a :class:`TrainResult`.

    With ``out_dir`` set, writes ``metrics.csv``, ``final.kdlw`` and
    ``best.kdlw`` (highest validation accuracy), each with a ``.cfg`` sidecar.
    """
    if not train_records:
        raise EmptySplit("training split is empty")
    params = model.parameters()
    trainable = params.trainable()
    frozen_before = params.frozen().checksum()
    opt = make_optimizer(config.optimizer, trainable, config.lr, config.momentum, config.beta1, config.beta2, config.eps)
    reg = Regularizer(config.l2)

    cache = None
    if hasattr(model, "backbone_features"):
        cache = BackboneCache(model, preprocess, eval_batch_size)
        cache.ensure(train_records)
        cache.ensure(val_records)

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    curve = TrainingCurve()
    best_val, best_epoch, val_acc = -1.0, 0, 0.0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for batch in make_batches(train_records, config.batch_size, config.seed, epoch, preprocess):
            trainable.zero_grad()
            logits = forward_logits(model, batch, cache)
            loss = compute_loss(logits, batch.labels, reg, trainable)
            value = float(loss.item())
            if not math.isfinite(value):
                raise Diverged(epoch, value)
            T.backward(loss)
            opt.step()
            total += value * len(batch.labels)
            seen += len(batch.labels)
        if val_records and (epoch % config.eval_every == 0 or epoch == config.epochs):
            val_acc = evaluate_accuracy(model, make_batches(val_records, eval_batch_size, None, 0, preprocess), cache)
        curve.records.append(EpochRecord(epoch, total / seen, val_acc, time.perf_counter() - t0))
        log.info("epoch %d train_loss=%.4f val_acc=%.4f", epoch, total / seen, val_acc)
        if out:
            curve.write_csv(out / "metrics.csv")
            if val_acc > best_val:
                _save(model, params, out / "best.kdlw")
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch

    if params.frozen().checksum() != frozen_before:
        raise RuntimeError("frozen parameters changed during training")
    if out:
        _save(model, params, out / "final.kdlw")
    return TrainResult(params, curve, best_epoch, best_val)
