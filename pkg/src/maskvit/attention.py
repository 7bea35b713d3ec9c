"""Attention kernels.

Three interchangeable ways to get ``Softmax(M * QK^T / sqrt(d)) V``:

* :func:`attention` - no mask.
* :func:`masked_attention_dense` - the mask multiplies the scores *before*
  softmax, so a masked entry becomes a zero score and still contributes
  ``e^0`` to the denominator. Hard, soft and random masks all go here.
* :func:`masked_attention_sparse` - hard masks only. Only in-window scores are
  computed; every masked-out column shares the same weight ``e^{-m}``, so their
  combined contribution to the numerator is ``e^{-m} (sum_all v - sum_nbr v)``.
  That identity keeps the result exact while touching O(R^2 N) scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse as sp

from .maskgen import AttentionMask, soft_mask_matrix
from .numerics import (
    ContractError,
    DimensionError,
    Tensor,
    as_tensor,
    concat,
    matmul,
    mul,
    softmax_rows,
    transpose,
)


@dataclass
class HeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @property
    def d(self) -> int:
        return self.w_q.shape[1]


@dataclass
class AttentionOutput:
    values: Tensor
    map: np.ndarray | None = None
    score_dot_products: int = 0
    score_multiplies: int = 0


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1] or q.ndim < 2:
        raise DimensionError(f"Q {q.shape}, K {k.shape}, V {v.shape} do not agree")


def _head_dim(q: Tensor, d: int | None) -> int:
    d = q.shape[-1] if d is None else d
    if d <= 0:
        raise DimensionError(f"head width must be positive, got {d}")
    return d


def attention(q, k, v, d: int | None = None, capture: bool = False) -> AttentionOutput:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    d = _head_dim(q, d)
    t = q.shape[-2]
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    a = softmax_rows(scores)
    return AttentionOutput(matmul(a, v), a.data.copy() if capture else None, t * t, t * t * q.shape[-1])


def mask_matrix(mask) -> Tensor:
    """Score multiplier for a mask object or a raw (N+1)x(N+1) array."""
    if isinstance(mask, AttentionMask):
        if mask.kind == "soft":
            return soft_mask_matrix(mask)
        if mask.kind == "none":
            return Tensor(np.ones((mask.size, mask.size)))
        return Tensor(mask.dense())
    return as_tensor(mask)


def masked_attention_dense(q, k, v, mask, d: int | None = None, capture: bool = False) -> AttentionOutput:
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    d = _head_dim(q, d)
    m = mask_matrix(mask)
    t = q.shape[-2]
    if m.shape != (t, t):
        raise DimensionError(f"mask is {m.shape} but there are {t} tokens")
    scores = mul(mul(m, matmul(q, transpose(k))), 1.0 / math.sqrt(d))
    a = softmax_rows(scores)
    return AttentionOutput(matmul(a, v), a.data.copy() if capture else None, t * t, t * t * q.shape[-1])


def _csr_arrays(mask: AttentionMask) -> tuple[np.ndarray, np.ndarray]:
    cached = getattr(mask, "_csr_cache", None)
    if cached is None:
        cached = mask.csr()
        mask._csr_cache = cached
    return cached


def masked_attention_sparse(q, k, v, mask: AttentionMask, d: int | None = None,
                            capture: bool = False) -> AttentionOutput:
    """Exact hard-masked attention computing only the in-mask score dot products.

    Inputs are single sequences ``(N+1) x d``; no gradient is recorded.
    """
    if not isinstance(mask, AttentionMask) or mask.kind != "hard":
        kind = getattr(mask, "kind", type(mask).__name__)
        raise ContractError(f"sparse kernel supports hard masks only, got {kind!r}")
    q, k, v = (np.asarray(as_tensor(x).data) for x in (q, k, v))
    if q.ndim != 2 or q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise DimensionError(f"Q {q.shape}, K {k.shape}, V {v.shape} do not agree")
    t = q.shape[0]
    if mask.size != t:
        raise DimensionError(f"mask covers {mask.size} tokens but there are {t}")
    d = q.shape[1] if d is None else d
    indptr, cols = _csr_arrays(mask)
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(t), counts)

    s = np.einsum("ij,ij->i", q[rows], k[cols]) * (1.0 / math.sqrt(d))
    m = np.maximum.reduceat(s, indptr[:-1])
    # rows with any masked-out column also carry zero scores
    m = np.where(counts < t, np.maximum(m, 0.0), m)
    w = np.exp(s - m[rows])
    base = np.exp(-m)
    weights = sp.csr_matrix((w, cols, indptr), shape=(t, t))
    support = sp.csr_matrix((np.ones_like(w), cols, indptr), shape=(t, t))
    v_total = v.sum(axis=0)
    num = weights @ v + base[:, None] * (v_total[None, :] - support @ v)
    den = np.asarray(weights.sum(axis=1)).ravel() + base * (t - counts)
    out = num / den[:, None]
    amap = None
    if capture:
        amap = np.repeat((base / den)[:, None], t, axis=1)
        amap[rows, cols] = w / den[rows]
    return AttentionOutput(Tensor(out), amap, int(cols.size), int(cols.size) * q.shape[1])


def run_head(q, k, v, mask: AttentionMask | None, d: int | None = None, capture: bool = False,
             sparse: bool = False) -> AttentionOutput:
    """Route one head to its kernel: none -> standard, hard -> dense or sparse, soft/random -> dense."""
    if mask is None or mask.kind == "none":
        return attention(q, k, v, d, capture)
    if sparse and mask.kind == "hard" and as_tensor(q).ndim == 2:
        return masked_attention_sparse(q, k, v, mask, d, capture)
    return masked_attention_dense(q, k, v, mask, d, capture)


def mha_forward(x, heads: Sequence[HeadParams], w_o, scheme_row: Sequence[AttentionMask | None],
                b_o=None, capture: bool = False, sparse: bool = False):
    """Multi-head attention with a per-head mask assignment.

    Returns ``(output, maps)`` where ``maps`` is a list of per-head attention maps
    (``None`` entries unless ``capture``).
    """
    if len(scheme_row) != len(heads):
        raise ContractError(f"scheme row has {len(scheme_row)} entries for {len(heads)} heads")
    x = as_tensor(x)
    outs, maps = [], []
    for hp, mask in zip(heads, scheme_row):
        q, k, v = matmul(x, hp.w_q), matmul(x, hp.w_k), matmul(x, hp.w_v)
        res = run_head(q, k, v, mask, hp.d, capture, sparse)
        outs.append(res.values)
        maps.append(res.map)
    y = matmul(concat(outs, axis=-1), w_o)
    if b_o is not None:
        y = y + b_o
    return y, maps
