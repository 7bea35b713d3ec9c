"""Wall-clock and operation-count benchmark for the attention kernels."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import attention, masked_attention_dense, masked_attention_sparse
from .maskgen import PatchGrid, build_mask

KERNELS = ("attention", "masked_dense", "sparse")


@dataclass
class BenchReport:
    kernel: str
    n: int
    d: int
    r: int
    repeats: int
    warmups: int
    workers: int
    times_s: list[float] = field(default_factory=list)
    median_s: float = 0.0
    score_dot_products: int = 0
    multiplies: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def grid_for(n: int) -> PatchGrid:
    """Most nearly square grid with exactly ``n`` patches."""
    rows = int(math.isqrt(n))
    while n % rows:
        rows -= 1
    return PatchGrid(rows, n // rows)


def bench_inputs(n: int, d: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal((n + 1, d)) for _ in range(3))


def bench_attention(n: int, d: int, r: int = 3, kernel: str = "sparse", repeats: int = 5,
                    warmups: int = 1, workers: int = 1, seed: int = 0) -> BenchReport:
    """Time one kernel on pre-generated single-head inputs of N patches plus the class token."""
    if repeats < 3 or warmups < 1:
        raise ValueError(f"need repeats >= 3 and warmups >= 1, got {repeats}, {warmups}")
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    q, k, v = bench_inputs(n, d, seed)
    mask = build_mask(grid_for(n), "hard", r)
    if kernel == "attention":
        call = lambda: attention(q, k, v, d)  # noqa: E731
    elif kernel == "masked_dense":
        dense = mask.dense()
        call = lambda: masked_attention_dense(q, k, v, dense, d)  # noqa: E731
    else:
        mask.csr()
        call = lambda: masked_attention_sparse(q, k, v, mask, d)  # noqa: E731
    report = BenchReport(kernel, n, d, r, repeats, warmups, workers)
    with threadpool_limits(limits=workers):
        for _ in range(warmups):
            out = call()
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = call()
            report.times_s.append(time.perf_counter() - t0)
    report.median_s = statistics.median(report.times_s)
    report.score_dot_products = out.score_dot_products
    report.multiplies = out.score_multiplies
    return report
