"""R x R neighbourhood masks over a patch grid, plus per-layer/per-head schemes.

Token 0 is the class token; patch ``n`` lives at matrix index ``n + 1``.
The class row and class column are never masked.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import ContractError, Tensor, add, mul, sigmoid

KINDS = ("none", "hard", "soft", "random")
SCHEME_FORMAT = "maskvit.scheme/1"


class MaskParameterError(ValueError):
    """Bad mask geometry or scheme request."""


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise MaskParameterError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def position(self, n: int) -> tuple[int, int]:
        return divmod(n, self.cols)

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    @classmethod
    def parse(cls, text: str) -> "PatchGrid":
        r, _, c = text.lower().partition("x")
        return cls(int(r), int(c or r))

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


def _check_r(r: int) -> None:
    if r < 1 or r % 2 == 0:
        raise MaskParameterError(f"mask side R must be an odd positive integer, got {r}")


def neighbor_indices(grid: PatchGrid, n: int, r: int) -> list[int]:
    """Patch indices inside the R x R window centred on patch ``n`` (clipped, self included)."""
    _check_r(r)
    if not 0 <= n < grid.n:
        raise IndexError(f"patch index {n} outside 0..{grid.n - 1}")
    half = (r - 1) // 2
    row, col = grid.position(n)
    r0, r1 = max(0, row - half), min(grid.rows - 1, row + half)
    c0, c1 = max(0, col - half), min(grid.cols - 1, col + half)
    return [grid.index(i, j) for i in range(r0, r1 + 1) for j in range(c0, c1 + 1)]


@dataclass
class AttentionMask:
    """One head's mask. ``neighbor_lists[i]`` holds patch indices ``j`` with M[1+i][1+j] = 1."""

    kind: str
    r: int
    grid: PatchGrid
    neighbor_lists: list[list[int]]
    theta: Tensor | None = None

    @property
    def size(self) -> int:
        return self.grid.n + 1

    @property
    def alpha(self) -> float:
        if self.kind != "soft":
            raise ContractError(f"alpha is only defined for soft masks, not {self.kind!r}")
        return sigmoid(self.theta).item()

    def dense(self) -> np.ndarray:
        """Binary (N+1)x(N+1) view (read-only, built once)."""
        cached = self.__dict__.get("_dense")
        if cached is not None:
            return cached
        t = self.size
        m = np.zeros((t, t))
        m[0, :] = 1.0
        m[:, 0] = 1.0
        for i, nbrs in enumerate(self.neighbor_lists):
            m[1 + i, [1 + j for j in nbrs]] = 1.0
        m.setflags(write=False)
        self.__dict__["_dense"] = m
        return m

    def support_counts(self) -> np.ndarray:
        return np.array([len(x) for x in self.neighbor_lists])

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Row pointer and column index arrays of the full binary matrix (class row/col included)."""
        t = self.size
        indptr = np.zeros(t + 1, dtype=np.int64)
        cols: list[np.ndarray] = [np.arange(t)]
        indptr[1] = t
        for i, nbrs in enumerate(self.neighbor_lists):
            row = np.concatenate(([0], np.asarray(nbrs, dtype=np.int64) + 1))
            cols.append(row)
            indptr[i + 2] = indptr[i + 1] + row.size
        return indptr, np.concatenate(cols).astype(np.int64)


def neighbor_lists_from_dense(m: np.ndarray) -> list[list[int]]:
    """Inverse of :meth:`AttentionMask.dense` on the patch block."""
    m = np.asarray(m)
    return [[int(j) for j in np.flatnonzero(m[1 + i, 1:] != 0)] for i in range(m.shape[0] - 1)]


def build_mask(grid: PatchGrid, kind: str = "hard", r: int = 3, theta: float = 0.0) -> AttentionMask:
    """Hard or soft R x R neighbourhood mask; soft masks carry a learnable logit ``theta``."""
    _check_r(r)
    if kind not in ("hard", "soft"):
        raise MaskParameterError(f"build_mask handles hard/soft kinds, got {kind!r}")
    lists = [neighbor_indices(grid, n, r) for n in range(grid.n)]
    th = Tensor(np.array(float(theta)), requires_grad=True) if kind == "soft" else None
    return AttentionMask(kind, r, grid, lists, th)


def build_random_mask(grid: PatchGrid, keep_per_row: int, seed: int) -> AttentionMask:
    """Each patch row keeps itself plus ``keep_per_row - 1`` distinct uniformly drawn patch columns."""
    if not 1 <= keep_per_row <= grid.n:
        raise MaskParameterError(f"keep_per_row must lie in 1..{grid.n}, got {keep_per_row}")
    rng = np.random.default_rng(seed)
    lists = []
    for n in range(grid.n):
        others = np.delete(np.arange(grid.n), n)
        picked = rng.choice(others, size=keep_per_row - 1, replace=False)
        lists.append(sorted([n, *(int(j) for j in picked)]))
    # R records the square window with the same per-row density when one exists
    side = int(round(keep_per_row ** 0.5))
    r = side if side * side == keep_per_row and side % 2 == 1 else 0
    return AttentionMask("random", r, grid, lists)


def soft_mask_matrix(mask: AttentionMask) -> Tensor:
    """1 where the binary mask is 1, alpha = sigmoid(theta) elsewhere; differentiable in theta."""
    if mask.kind != "soft":
        raise ContractError(f"soft_mask_matrix needs a soft mask, got {mask.kind!r}")
    binary = mask.dense()
    return add(Tensor(binary), mul(Tensor(1.0 - binary), sigmoid(mask.theta)))


# --- schemes ------------------------------------------------------------------------

@dataclass(frozen=True)
class HeadSpec:
    kind: str = "none"
    r: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MaskParameterError(f"unknown mask kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("hard", "soft"):
            _check_r(self.r)


@dataclass
class MaskScheme:
    layers: list[list[HeadSpec]] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_heads(self) -> int:
        return len(self.layers[0]) if self.layers else 0

    def validate(self, num_layers: int, num_heads: int) -> None:
        if len(self.layers) != num_layers or any(len(row) != num_heads for row in self.layers):
            shape = [len(row) for row in self.layers]
            raise MaskParameterError(f"scheme shape {shape} does not match L={num_layers}, H={num_heads}")

    def kinds(self) -> list[list[str]]:
        return [[h.kind for h in row] for row in self.layers]

    def soft_heads(self) -> list[tuple[int, int]]:
        return [(l, h) for l, row in enumerate(self.layers) for h, s in enumerate(row) if s.kind == "soft"]

    def masked_count(self) -> int:
        return sum(s.kind != "none" for row in self.layers for s in row)

    def to_dict(self) -> dict:
        return {
            "format": SCHEME_FORMAT,
            "layers": [[{"kind": s.kind, "r": s.r} for s in row] for row in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MaskScheme":
        if doc.get("format", SCHEME_FORMAT) != SCHEME_FORMAT:
            raise MaskParameterError(f"unsupported scheme format {doc.get('format')!r}")
        return cls([[HeadSpec(h["kind"], int(h.get("r", 3))) for h in row] for row in doc["layers"]])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MaskScheme":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "MaskScheme":
        return cls.loads(Path(path).read_text())


def make_scheme(name: str, num_layers: int, num_heads: int, r: int = 3,
                layout: Sequence[Sequence[str | HeadSpec]] | None = None) -> MaskScheme:
    """Build one of the named schemes.

    sch1: head 0 hard in every layer.
    sch2: H-1 hard heads for layers 0-7, one for layers 9-19, none for 20-23 (layer 8 unmasked).
    sch3: soft on every head of layers 0-20, none on 21-23.
    custom: ``layout`` verbatim (kind strings or HeadSpec).
    """
    if num_layers < 1 or num_heads < 1:
        raise MaskParameterError(f"need L, H >= 1, got L={num_layers}, H={num_heads}")
    none = HeadSpec("none", r)
    hard = HeadSpec("hard", r)
    if name == "sch1":
        return MaskScheme([[hard] + [none] * (num_heads - 1) for _ in range(num_layers)])
    if name in ("sch2", "sch3"):
        if num_layers != 24:
            raise MaskParameterError(f"{name} is defined for 24 layers; use 'custom' for L={num_layers}")
        layers = []
        for l in range(24):
            if name == "sch2":
                k = num_heads - 1 if l <= 7 else 1 if 9 <= l <= 19 else 0
                layers.append([hard] * k + [none] * (num_heads - k))
            else:
                layers.append([HeadSpec("soft", r)] * num_heads if l <= 20 else [none] * num_heads)
        return MaskScheme(layers)
    if name == "none":
        return MaskScheme([[none] * num_heads for _ in range(num_layers)])
    if name == "custom":
        if layout is None:
            raise MaskParameterError("custom scheme needs a layout")
        rows = [[s if isinstance(s, HeadSpec) else HeadSpec(s, r) for s in row] for row in layout]
        scheme = MaskScheme(rows)
        scheme.validate(num_layers, num_heads)
        return scheme
    raise MaskParameterError(f"unknown scheme {name!r}; expected sch1, sch2, sch3, none or custom")


def instantiate(spec: HeadSpec, grid: PatchGrid, seed: int = 0, theta: float = 0.0) -> AttentionMask | None:
    """Concrete mask for one head descriptor; ``None`` for unmasked heads.

    Random heads keep R*R entries per patch row so their density matches the hard window.
    """
    if spec.kind == "none":
        return None
    if spec.kind == "random":
        return build_random_mask(grid, min(spec.r * spec.r, grid.n), seed)
    return build_mask(grid, spec.kind, spec.r, theta)


def ones_mask_lists(grid: PatchGrid) -> list[list[int]]:
    return [list(range(grid.n)) for _ in range(grid.n)]


def symmetric(lists: Iterable[Sequence[int]]) -> bool:
    sets = [set(x) for x in lists]
    return all(i in sets[j] for i, s in enumerate(sets) for j in s)
