"""Training loop, AdamW with cosine schedule, evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .metrics import AttentionRecord
from .model import ConfigError, ModelConfig, ModelParams, forward, init_params, snap_f32
from .numerics import cross_entropy

NO_DECAY = ("cls", "pos")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 8e-3  # per 512 samples, scaled linearly by batch_size (peak 1e-3 at 64)
    lr_ref_batch: int = 512
    min_lr: float = 1e-5
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    probe_samples: int = 256
    seed: int = 0

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / self.lr_ref_batch

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        doc = dict(doc)
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def cosine_lr(step: int, total: int, warmup: int, peak: float, floor: float) -> float:
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    t = (step - warmup) / max(1, total - warmup)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * min(1.0, t)))


@dataclass
class AdamW:
    params: ModelParams
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def decays(self, name: str) -> bool:
        t = self.params[name]
        return t.ndim >= 2 and name not in NO_DECAY

    def step(self, lr: float) -> None:
        """One decoupled-weight-decay Adam update; parameters stay on the float32 grid."""
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.tensors.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            data = p.data
            if self.decays(name):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = snap_f32(data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def zero_grads(params: ModelParams) -> None:
    for t in params.tensors.values():
        t.grad = None
        t.requires_grad = True


def freeze(params: ModelParams) -> None:
    for t in params.tensors.values():
        t.grad = None
        t.requires_grad = False


def loss_and_grads(images: np.ndarray, labels: np.ndarray, params: ModelParams, config: ModelConfig,
                   rng: np.random.Generator | None = None) -> float:
    zero_grads(params)
    loss = cross_entropy(forward(images, params, config, train=rng is not None, rng=rng), labels)
    loss.backward()
    return loss.item()


def evaluate(params: ModelParams, config: ModelConfig, ds: Dataset, batch_size: int = 256) -> dict:
    """Eval-mode mean loss and accuracy."""
    freeze(params)
    total_loss, correct = 0.0, 0
    for lo in range(0, len(ds), batch_size):
        x = ds.images[lo:lo + batch_size].astype(np.float64)
        y = ds.labels[lo:lo + batch_size]
        logits = forward(x, params, config)
        total_loss += cross_entropy(logits, y).item() * len(y)
        correct += int((logits.data.argmax(axis=-1) == y).sum())
    n = max(1, len(ds))
    return {"loss": total_loss / n, "accuracy": correct / n}


def capture_record(params: ModelParams, config: ModelConfig, ds: Dataset, samples: int = 256,
                   batch_size: int = 128) -> AttentionRecord:
    """Attention maps on the first ``samples`` images, stacked along a batch axis."""
    freeze(params)
    parts = []
    n = min(samples, len(ds))
    for lo in range(0, n, batch_size):
        x = ds.images[lo:min(n, lo + batch_size)].astype(np.float64)
        _, rec = forward(x, params, config, capture=True)
        parts.append(rec.maps)
    return AttentionRecord(np.concatenate(parts, axis=2), config.grid, config.scheme)


def check_compatible(config: ModelConfig, ds: Dataset) -> None:
    if ds.image_shape != config.image_shape:
        raise ConfigError(f"dataset images {ds.image_shape} do not match model input {config.image_shape}")
    if len(ds) and int(ds.labels.max()) >= config.classes:
        raise ConfigError(f"label {int(ds.labels.max())} out of range for {config.classes} classes")


def metrics_header(config: ModelConfig) -> list[str]:
    als_cols = [f"als_l{l}_h{h}" for l in range(config.layers) for h in range(config.heads)]
    return ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", *als_cols]


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    config: ModelConfig
    record: AttentionRecord | None = None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = metrics_header(self.config)
        w.writerow(header)
        for row in self.history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in header])
        return buf.getvalue()


def train(config: ModelConfig, train_ds: Dataset, val_ds: Dataset | None = None,
          tcfg: TrainConfig | None = None, params: ModelParams | None = None,
          on_epoch=None) -> TrainResult:
    """Train from ``params`` (or a seed-derived initialisation). Deterministic per ``tcfg.seed``.

    ``on_epoch(row)`` sees each epoch's metrics row; returning True stops training
    early. The learning-rate schedule always spans ``tcfg.epochs``.
    """
    tcfg = tcfg or TrainConfig()
    check_compatible(config, train_ds)
    if val_ds is not None:
        check_compatible(config, val_ds)
    probe = val_ds if val_ds is not None and len(val_ds) else train_ds
    params = params if params is not None else init_params(config, tcfg.seed)
    rng = np.random.default_rng([tcfg.seed, 1])
    opt = AdamW(params, tcfg.betas, tcfg.adam_eps, tcfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train_ds) / tcfg.batch_size))
    total = tcfg.epochs * steps_per_epoch
    warmup = tcfg.warmup_epochs * steps_per_epoch
    history, record, step = [], None, 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_ds))
        seen, loss_sum, correct = 0, 0.0, 0
        lr = tcfg.lr
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            x = train_ds.images[idx].astype(np.float64)
            y = train_ds.labels[idx]
            zero_grads(params)
            logits = forward(x, params, config, train=True, rng=rng)
            loss = cross_entropy(logits, y)
            loss.backward()
            lr = cosine_lr(step, total, warmup, tcfg.lr, tcfg.min_lr)
            opt.step(lr)
            step += 1
            seen += len(y)
            loss_sum += loss.item() * len(y)
            correct += int((logits.data.argmax(axis=-1) == y).sum())
        row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen, "train_acc": correct / seen}
        ev = evaluate(params, config, val_ds) if val_ds is not None and len(val_ds) else {"loss": float("nan"), "accuracy": float("nan")}
        row["val_loss"], row["val_acc"] = ev["loss"], ev["accuracy"]
        record = capture_record(params, config, probe, tcfg.probe_samples)
        table = record.als_table()
        for l in range(config.layers):
            for h in range(config.heads):
                row[f"als_l{l}_h{h}"] = float(table[l, h])
        history.append(row)
        if on_epoch is not None and on_epoch(row):
            break
    freeze(params)
    return TrainResult(params, history, config, record)
