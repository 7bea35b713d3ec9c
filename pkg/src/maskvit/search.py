"""ALS-guided mask placement search and end-to-end soft-mask training."""

from __future__ import annotations

import concurrent.futures as cf
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .maskgen import HeadSpec, MaskScheme
from .metrics import AttentionRecord
from .model import ModelConfig, ModelParams
from .numerics import ContractError
from .train import TrainConfig, TrainResult, capture_record, train

ALL, KEEP, REMOVE = "all", "keep", "remove"


class SearchConfigError(ValueError):
    pass


class SearchTimeoutError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    high_threshold: float = 0.65
    low_threshold: float = 0.35
    probe_epochs: int = 5
    r: int = 3
    seed: int = 0
    timeout_s: float | None = None

    def __post_init__(self):
        if not 0.0 < self.low_threshold < self.high_threshold < 1.0:
            raise SearchConfigError(
                f"need 0 < low < high < 1, got low={self.low_threshold}, high={self.high_threshold}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise SearchConfigError(f"unknown search config fields: {sorted(unknown)}")
        return cls(**doc)


# --- pure decision rules ----------------------------------------------------------------

def assign(als_head0: Sequence[float], cfg: SearchConfig) -> list[str]:
    """Per-layer action from head 0's locality score. Scores exactly on a threshold keep the mask."""
    out = []
    for v in als_head0:
        if v > cfg.high_threshold:
            out.append(ALL)
        elif v < cfg.low_threshold:
            out.append(REMOVE)
        else:
            out.append(KEEP)
    return out


def initial_scheme(num_layers: int, num_heads: int, r: int) -> MaskScheme:
    none, hard = HeadSpec("none", r), HeadSpec("hard", r)
    return MaskScheme([[hard] + [none] * (num_heads - 1) for _ in range(num_layers)])


def assigned_scheme(decisions: Sequence[str], num_heads: int, r: int) -> MaskScheme:
    none, hard = HeadSpec("none", r), HeadSpec("hard", r)
    rows = []
    for d in decisions:
        if d == ALL:
            rows.append([hard] * num_heads)
        elif d == KEEP:
            rows.append([hard] + [none] * (num_heads - 1))
        else:
            rows.append([none] * num_heads)
    return MaskScheme(rows)


def calibrate(scheme: MaskScheme, decisions: Sequence[str], als_table: np.ndarray,
              cfg: SearchConfig) -> MaskScheme:
    """Unmask heads scoring below the low threshold, only in layers that were fully masked."""
    rows = []
    for l, row in enumerate(scheme.layers):
        if decisions[l] != ALL:
            rows.append(list(row))
            continue
        rows.append([HeadSpec("none", s.r) if als_table[l][h] < cfg.low_threshold else s
                     for h, s in enumerate(row)])
    return MaskScheme(rows)


def decide(als_step1: np.ndarray, als_step3: np.ndarray | None, cfg: SearchConfig,
           num_heads: int) -> MaskScheme:
    """Final scheme from the recorded ALS tables. ``als_step3`` is ignored when no layer was fully masked."""
    decisions = assign(np.asarray(als_step1)[:, 0], cfg)
    scheme = assigned_scheme(decisions, num_heads, cfg.r)
    if ALL in decisions and als_step3 is not None:
        scheme = calibrate(scheme, decisions, np.asarray(als_step3), cfg)
    return scheme


# --- trace -------------------------------------------------------------------------------

@dataclass
class SearchTrace:
    high_threshold: float
    low_threshold: float
    r: int
    iterations: list[dict] = field(default_factory=list)
    final_scheme: MaskScheme | None = None

    @property
    def trainer_calls(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {
            "high_threshold": self.high_threshold,
            "low_threshold": self.low_threshold,
            "r": self.r,
            "iterations": self.iterations,
            "final_scheme": self.final_scheme.to_dict() if self.final_scheme else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchTrace":
        final = MaskScheme.from_dict(doc["final_scheme"]) if doc.get("final_scheme") else None
        return cls(doc["high_threshold"], doc["low_threshold"], doc["r"], list(doc["iterations"]), final)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "SearchTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replay(self) -> MaskScheme:
        """Recompute the final scheme from the recorded ALS tables alone."""
        cfg = SearchConfig(self.high_threshold, self.low_threshold, r=self.r)
        first = np.asarray(self.iterations[0]["als"])
        third = np.asarray(self.iterations[1]["als"]) if len(self.iterations) > 1 else None
        return decide(first, third, cfg, first.shape[1])


# --- driver ------------------------------------------------------------------------------

Trainer = Callable[[MaskScheme], tuple[object, AttentionRecord]]


def _call(trainer: Trainer, scheme: MaskScheme, timeout: float | None):
    if timeout is None:
        return trainer(scheme)
    pool = cf.ThreadPoolExecutor(max_workers=1)
    fut = pool.submit(trainer, scheme)
    try:
        return fut.result(timeout=timeout)
    except cf.TimeoutError as exc:
        raise SearchTimeoutError(f"trainer did not finish within {timeout} s") from exc
    finally:
        pool.shutdown(wait=False)


def quick_search(trainer: Trainer, cfg: SearchConfig, num_layers: int, num_heads: int):
    """Initialization -> Assignment -> Calibration.

    1. Mask head 0 in every layer, train, score head 0 per layer.
    2. Per layer: above ``high`` mask every head, within [low, high] keep, below ``low`` unmask.
    3. Train the step-2 scheme and, in fully masked layers, unmask heads scoring below ``low``.
       Only when that changes the scheme is a third, final training run made.

    Returns ``(scheme, trace)``.
    """
    trace = SearchTrace(cfg.high_threshold, cfg.low_threshold, cfg.r)
    scheme = initial_scheme(num_layers, num_heads, cfg.r)
    _, record = _call(trainer, scheme, cfg.timeout_s)
    table = record.als_table(cfg.r)
    decisions = assign(table[:, 0], cfg)
    trace.iterations.append({"stage": "initialization", "scheme": scheme.to_dict(),
                             "als": table.tolist(), "decisions": decisions})

    scheme = assigned_scheme(decisions, num_heads, cfg.r)
    _, record = _call(trainer, scheme, cfg.timeout_s)
    table = record.als_table(cfg.r)
    final = calibrate(scheme, decisions, table, cfg)
    removed = [[l, h] for l in range(num_layers) for h in range(num_heads)
               if scheme.layers[l][h].kind != final.layers[l][h].kind]
    trace.iterations.append({"stage": "assignment", "scheme": scheme.to_dict(),
                             "als": table.tolist(), "decisions": decisions, "removed": removed})

    if removed:
        _, record = _call(trainer, final, cfg.timeout_s)
        trace.iterations.append({"stage": "calibration", "scheme": final.to_dict(),
                                 "als": record.als_table(cfg.r).tolist(), "decisions": decisions})
    trace.final_scheme = final
    return final, trace


def probe_trainer(base: ModelConfig, train_ds: Dataset, probe_ds: Dataset, tcfg: TrainConfig,
                  probe_samples: int = 256) -> Trainer:
    """Trainer that fits ``base`` with a given scheme and records attention on a fixed held-out batch."""
    def run(scheme: MaskScheme):
        config = replace(base, scheme=scheme)
        config.validate()
        result = train(config, train_ds, None, tcfg)
        return result, capture_record(result.params, config, probe_ds, probe_samples)
    return run


def train_soft_masks(config: ModelConfig, train_ds: Dataset, val_ds: Dataset | None = None,
                     tcfg: TrainConfig | None = None, params: ModelParams | None = None):
    """Train the model and its per-head soft-mask logits jointly.

    Returns ``(TrainResult, {(layer, head): alpha})``.
    """
    if not config.scheme.soft_heads():
        raise ContractError("scheme has no soft-masked heads")
    result = train(config, train_ds, val_ds, tcfg, params)
    return result, result.params.alphas()
