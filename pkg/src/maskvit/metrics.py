"""Attention-map analysis and the analytical attention cost model."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .maskgen import AttentionMask, MaskScheme, PatchGrid, build_mask


class RecordError(ValueError):
    """Attention record is missing data or does not match the request."""


@dataclass
class AttentionRecord:
    """Captured attention maps, shape ``(L, H, [B,] N+1, N+1)``."""

    maps: np.ndarray
    grid: PatchGrid
    scheme: MaskScheme | None = None

    @property
    def num_layers(self) -> int:
        return self.maps.shape[0]

    @property
    def num_heads(self) -> int:
        return self.maps.shape[1]

    def head_maps(self, h: int) -> np.ndarray:
        if not 0 <= h < self.num_heads:
            raise RecordError(f"head {h} not captured (record has {self.num_heads})")
        return self.maps[:, h]

    def als_table(self, r: int = 3) -> np.ndarray:
        """``(L, H)`` locality scores, every head measured against the R x R window."""
        mask = build_mask(self.grid, "hard", r)
        return np.array([[als(self.maps[l, h], mask) for h in range(self.num_heads)]
                         for l in range(self.num_layers)])


def als(amap: np.ndarray, mask: AttentionMask) -> float:
    """Attention Locality Score.

    Mean over the N patch rows of the attention mass on in-window patch
    columns. The class row and class column are left out. Leading batch
    axes are averaged.
    """
    amap = np.asarray(amap, dtype=np.float64)
    t = mask.size
    if amap.shape[-2:] != (t, t):
        raise RecordError(f"map {amap.shape[-2:]} does not match mask over {t} tokens")
    window = mask.dense()[1:, 1:]
    per_row = (amap[..., 1:, 1:] * window).sum(axis=-1)
    return float(per_row.mean())


def cross_layer_similarity(record: AttentionRecord, h: int) -> np.ndarray:
    """``(L, L)`` token-averaged cosine similarity of head ``h``'s attention rows across layers."""
    maps = record.head_maps(h)
    if maps.ndim < 3 or not np.all(np.isfinite(maps)):
        raise RecordError(f"head {h} has missing or non-finite layer captures")
    L = maps.shape[0]
    norms = np.linalg.norm(maps, axis=-1)
    out = np.ones((L, L))
    for i in range(L):
        for j in range(i + 1, L):
            dots = (maps[i] * maps[j]).sum(axis=-1)
            out[i, j] = out[j, i] = float((dots / (norms[i] * norms[j])).mean())
    return out


# --- cost model -------------------------------------------------------------------------

BLOCK_CONVENTION = (
    "MAC count: attention maps (QK^T and AV) = 2*N^2*D, or 2*R^2*N*D masked, "
    "or 2*M^2*N*D windowed; linear layers = (4 + 2*ffn_ratio)*N*D^2 "
    "(QKV 3ND^2, output ND^2, FFN 2*ffn_ratio*ND^2); norms, softmax, GELU ignored"
)


@dataclass(frozen=True)
class CostQuery:
    n: int
    d: int
    r: int = 3
    m_win: int = 7
    ffn_ratio: int = 4

    def __post_init__(self):
        if min(self.n, self.d, self.r, self.m_win, self.ffn_ratio) < 1:
            raise ValueError(f"all cost fields must be positive: {self}")


def attn_map_flops(q: CostQuery, method: str) -> int:
    if method == "mha":
        return 2 * q.n * q.n * q.d
    if method == "w_mha":
        return 2 * q.m_win * q.m_win * q.n * q.d
    if method == "m_mha":
        return 2 * q.r * q.r * q.n * q.d
    raise ValueError(f"unknown method {method!r}; expected mha, w_mha or m_mha")


def linear_flops(q: CostQuery) -> int:
    return (4 + 2 * q.ffn_ratio) * q.n * q.d * q.d


def block_flops(q: CostQuery, method: str = "mha") -> int:
    return attn_map_flops(q, method) + linear_flops(q)


def reduction_report(stages: Sequence[CostQuery]) -> list[dict]:
    """Per-stage savings from replacing full attention with R x R masked attention.

    Fractions are exact; ``*_pct`` entries are their float renderings.
    """
    if not stages:
        raise ValueError("need at least one stage")
    rows = []
    for i, q in enumerate(stages):
        full, masked = attn_map_flops(q, "mha"), attn_map_flops(q, "m_mha")
        attn_red = 1 - Fraction(masked, full)
        bf, bm = block_flops(q, "mha"), block_flops(q, "m_mha")
        share = Fraction(full, bf)
        block_red = 1 - Fraction(bm, bf)
        rows.append({
            "stage": i + 1,
            "n": q.n,
            "d": q.d,
            "r": q.r,
            "attn_map_ratio": Fraction(masked, full),
            "attn_map_reduction": attn_red,
            "attn_map_reduction_pct": float(attn_red * 100),
            "block_flops": bf,
            "block_flops_masked": bm,
            "attn_share_pct": float(share * 100),
            "block_reduction": block_red,
            "block_reduction_pct": float(block_red * 100),
            "convention": BLOCK_CONVENTION,
        })
    return rows


def report_text(rows: list[dict]) -> str:
    """Structured-text (JSON) rendering of :func:`reduction_report` with the convention embedded."""
    def enc(v):
        return f"{v.numerator}/{v.denominator}" if isinstance(v, Fraction) else v
    stages = [{k: enc(v) for k, v in row.items() if k != "convention"} for row in rows]
    return json.dumps({"convention": BLOCK_CONVENTION, "stages": stages}, indent=2) + "\n"


# --- dumps -----------------------------------------------------------------------------

def write_als_csv(table: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "als"])
        for l in range(table.shape[0]):
            for h in range(table.shape[1]):
                w.writerow([l, h, repr(float(table[l, h]))])


def write_similarity_csv(matrices: dict[int, np.ndarray], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "head", "similarity"])
        for h, m in sorted(matrices.items()):
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    w.writerow([i, j, h, repr(float(m[i, j]))])
