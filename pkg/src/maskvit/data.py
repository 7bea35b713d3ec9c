"""Synthetic image tasks and the MDAT dataset container.

MDAT layout (little-endian): magic ``b"MDAT"``, u32 version, u32 count,
u32 height, u32 width, u32 channels, f32 pixels sample-major (H, W, C per
sample), then u32 labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .maskgen import PatchGrid

MDAT_MAGIC = b"MDAT"
MDAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

BRIGHT = 1.0
BACKGROUND_MAX = 0.5
MOTIF_THRESHOLD = 0.75


class DatasetError(ValueError):
    """Malformed dataset file or request."""


@dataclass
class Dataset:
    images: np.ndarray  # (count, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (count,) uint32

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise DatasetError(f"images {self.images.shape} / labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def to_bytes(self) -> bytes:
        n, h, w, c = self.images.shape
        return (_HEADER.pack(MDAT_MAGIC, MDAT_VERSION, n, h, w, c)
                + self.images.astype("<f4").tobytes() + self.labels.astype("<u4").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        if len(blob) < _HEADER.size:
            raise DatasetError("file shorter than MDAT header")
        magic, version, n, h, w, c = _HEADER.unpack_from(blob)
        if magic != MDAT_MAGIC:
            raise DatasetError(f"bad magic {magic!r}")
        if version != MDAT_VERSION:
            raise DatasetError(f"unsupported MDAT version {version}")
        npix = n * h * w * c
        if len(blob) != _HEADER.size + 4 * npix + 4 * n:
            raise DatasetError(f"expected {_HEADER.size + 4 * (npix + n)} bytes, found {len(blob)}")
        pix = np.frombuffer(blob, dtype="<f4", count=npix, offset=_HEADER.size).reshape(n, h, w, c)
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=_HEADER.size + 4 * npix)
        return cls(pix.copy(), labels.copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())


def _isolated(lit: np.ndarray, r: int, c: int) -> bool:
    return not lit[max(0, r - 1):r + 2, max(0, c - 1):c + 2].any()


def _paint(images: np.ndarray, i: int, lit: np.ndarray, patch_px: int) -> None:
    for r, c in zip(*np.nonzero(lit)):
        images[i, r * patch_px:(r + 1) * patch_px, c * patch_px:(c + 1) * patch_px, :] = BRIGHT


def gen_local_task(grid: PatchGrid, patch_px: int, samples: int, seed: int, channels: int = 1,
                   distractors: int = 3) -> Dataset:
    """Binary task: does the image contain a 2x2 block of fully bright patches?

    Background pixels are uniform in [0, 0.5). Positives carry one 2x2 patch
    block at a uniformly drawn patch offset. Every image, whatever its label,
    also gets between 0 and ``distractors`` lone bright patches (uniform count)
    with no bright 8-neighbour, so a single bright patch never implies a
    positive and no distractor can complete a block.

    With ``distractors`` below 4 the bright-patch count alone separates the
    classes. At 4 and above it no longer does and a model has to detect
    adjacency, which the small reference model learns only sporadically
    within 20 epochs.
    """
    if grid.rows < 4 or grid.cols < 4:
        raise DatasetError(f"grid must be at least 4x4, got {grid}")
    if distractors < 0:
        raise DatasetError(f"distractors must be non-negative, got {distractors}")
    h, w = grid.rows * patch_px, grid.cols * patch_px
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, BACKGROUND_MAX, size=(samples, h, w, channels)).astype(np.float32)
    labels = rng.integers(0, 2, size=samples).astype(np.uint32)
    for i in range(samples):
        while True:
            lit = np.zeros((grid.rows, grid.cols), dtype=bool)
            if labels[i]:
                r, c = rng.integers(0, grid.rows - 1), rng.integers(0, grid.cols - 1)
                lit[r:r + 2, c:c + 2] = True
            want = rng.integers(0, distractors + 1)
            placed = tries = 0
            while placed < want and tries < 1000:
                tries += 1
                r, c = rng.integers(0, grid.rows), rng.integers(0, grid.cols)
                if _isolated(lit, r, c):
                    lit[r, c] = True
                    placed += 1
            if placed == want:
                break
        _paint(images, i, lit, patch_px)
    return Dataset(images, labels)


def has_motif(image: np.ndarray, patch_px: int, threshold: float = MOTIF_THRESHOLD) -> bool:
    """Brute-force pixel scan for a (2*patch_px)-sided square whose pixels all exceed ``threshold``."""
    lit = np.all(np.asarray(image) > threshold, axis=-1)
    side = 2 * patch_px
    h, w = lit.shape
    for y in range(h - side + 1):
        for x in range(w - side + 1):
            if lit[y:y + side, x:x + side].all():
                return True
    return False


def gen_global_task(grid: PatchGrid, patch_px: int, samples: int, seed: int, channels: int = 1) -> Dataset:
    """Binary task that needs a global count: are more than half of the patches lit?

    Each lit patch gets one bright pixel; the lit-patch count is drawn uniformly
    so the two classes are balanced and the decision cannot be read off any
    single neighbourhood.
    """
    n = grid.n
    h, w = grid.rows * patch_px, grid.cols * patch_px
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, BACKGROUND_MAX, size=(samples, h, w, channels)).astype(np.float32)
    labels = np.empty(samples, dtype=np.uint32)
    half = n // 2
    for i in range(samples):
        above = rng.integers(0, 2)
        count = rng.integers(half + 1, n + 1) if above else rng.integers(1, half + 1)
        labels[i] = above
        for p in rng.choice(n, size=count, replace=False):
            r, c = divmod(int(p), grid.cols)
            y = r * patch_px + rng.integers(0, patch_px)
            x = c * patch_px + rng.integers(0, patch_px)
            images[i, y, x, :] = BRIGHT
    return Dataset(images, labels)
