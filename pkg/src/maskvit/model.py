"""Toy monolithic masked-attention ViT: embedding, pre-norm blocks, classifier, checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import HeadParams, mha_forward
from .maskgen import AttentionMask, HeadSpec, MaskScheme, PatchGrid, instantiate, make_scheme
from .numerics import (
    DimensionError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    layernorm,
    matmul,
    mul,
    reshape,
    take,
)

LN_EPS = 1e-6
INIT_STD = 0.02
CHECKPOINT_MAGIC = b"MAIT"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    grid: PatchGrid = field(default_factory=lambda: PatchGrid(8, 8))
    patch_px: int = 4
    channels: int = 1
    classes: int = 2
    ffn_ratio: int = 4
    layerscale_eps: float | None = None
    scheme: MaskScheme | None = None
    drop_path_rate: float = 0.0
    mask_seed: int = 0
    soft_init: float = 0.0

    def __post_init__(self):
        if isinstance(self.grid, (list, tuple)):
            self.grid = PatchGrid(*self.grid)
        if self.scheme is None:
            self.scheme = make_scheme("none", self.layers, self.heads)
        self.validate()

    def validate(self) -> None:
        if self.layers < 1 or self.heads < 1 or self.dim < 1:
            raise ConfigError("layers, heads and dim must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.ffn_ratio < 1:
            raise ConfigError(f"ffn_ratio must be >= 1, got {self.ffn_ratio}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if self.patch_px < 1 or self.channels < 1 or self.classes < 2:
            raise ConfigError("patch_px, channels must be >= 1 and classes >= 2")
        try:
            self.scheme.validate(self.layers, self.heads)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def tokens(self) -> int:
        return self.grid.n + 1

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.grid.rows * self.patch_px, self.grid.cols * self.patch_px, self.channels)

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "dim": self.dim,
            "grid": [self.grid.rows, self.grid.cols],
            "patch_px": self.patch_px,
            "channels": self.channels,
            "classes": self.classes,
            "ffn_ratio": self.ffn_ratio,
            "layerscale_eps": self.layerscale_eps,
            "scheme": self.scheme.to_dict(),
            "drop_path_rate": self.drop_path_rate,
            "mask_seed": self.mask_seed,
            "soft_init": self.soft_init,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        if "grid" in doc:
            g = doc["grid"]
            doc["grid"] = PatchGrid.parse(g) if isinstance(g, str) else PatchGrid(*g)
        if isinstance(doc.get("scheme"), dict):
            doc["scheme"] = MaskScheme.from_dict(doc["scheme"])
        elif isinstance(doc.get("scheme"), str):
            doc["scheme"] = make_scheme(doc["scheme"], doc.get("layers", 4), doc.get("heads", 4))
        return cls(**doc)


@dataclass
class ModelParams:
    """Named parameter tensors in a fixed, config-derived order."""

    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    def head(self, layer: int, h: int) -> HeadParams:
        p = f"blocks.{layer}.attn.h{h}"
        return HeadParams(self[p + ".wq"], self[p + ".wk"], self[p + ".wv"])

    def alphas(self) -> dict[tuple[int, int], float]:
        out = {}
        for name, t in self.tensors.items():
            if ".theta.h" in name:
                layer = int(name.split(".")[1])
                h = int(name.rsplit(".h", 1)[1])
                out[(layer, h)] = float(1.0 / (1.0 + math.exp(-float(t.data))))
        return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, d, r = config.dim, config.head_dim, config.ffn_ratio
    p = config.patch_px * config.patch_px * config.channels
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (p, D),
        "patch.b": (D,),
        "cls": (1, D),
        "pos": (config.tokens, D),
    }
    for l in range(config.layers):
        b = f"blocks.{l}"
        shapes[b + ".ln1.g"] = (D,)
        shapes[b + ".ln1.b"] = (D,)
        for h in range(config.heads):
            for w in ("wq", "wk", "wv"):
                shapes[f"{b}.attn.h{h}.{w}"] = (D, d)
        shapes[b + ".attn.wo"] = (D, D)
        shapes[b + ".attn.bo"] = (D,)
        shapes[b + ".ln2.g"] = (D,)
        shapes[b + ".ln2.b"] = (D,)
        shapes[b + ".ffn.w1"] = (D, r * D)
        shapes[b + ".ffn.b1"] = (r * D,)
        shapes[b + ".ffn.w2"] = (r * D, D)
        shapes[b + ".ffn.b2"] = (D,)
        if config.layerscale_eps is not None:
            shapes[b + ".ls1"] = (D,)
            shapes[b + ".ls2"] = (D,)
        for h, spec in enumerate(config.scheme.layers[l]):
            if spec.kind == "soft":
                shapes[f"{b}.theta.h{h}"] = ()
    shapes["norm.g"] = (D,)
    shapes["norm.b"] = (D,)
    shapes["head.w"] = (D, config.classes)
    shapes["head.b"] = (config.classes,)
    return shapes


def snap_f32(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 so checkpoints (f32 on disk) round-trip exactly."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if ".theta." in name:
            data = np.full(shape, float(config.soft_init))
        elif leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        elif leaf in ("ls1", "ls2"):
            data = np.full(shape, float(config.layerscale_eps))
        else:
            data = _trunc_normal(rng, shape, INIT_STD)
        out[name] = Tensor(snap_f32(data))
    return ModelParams(out)


def layer_masks(config: ModelConfig, params: ModelParams | None = None) -> list[list[AttentionMask | None]]:
    """Concrete masks for every head; soft masks share the parameter tensor for their logit."""
    rows = []
    for l, row in enumerate(config.scheme.layers):
        masks = []
        for h, spec in enumerate(row):
            m = _geometry(config.grid, spec.kind, spec.r, config.mask_seed, l, h)
            if m is not None and spec.kind == "soft":
                theta = params[f"blocks.{l}.theta.h{h}"] if params is not None else Tensor(np.array(config.soft_init))
                tied = replace(m, theta=theta)
                tied.__dict__["_dense"] = m.dense()
                m = tied
            masks.append(m)
        rows.append(masks)
    return rows


_GEOMETRY: dict[tuple, AttentionMask | None] = {}


def _geometry(grid: PatchGrid, kind: str, r: int, seed: int, layer: int, head: int):
    key = (grid, kind, r) if kind != "random" else (grid, kind, r, seed, layer, head)
    if key not in _GEOMETRY:
        mseed = int(np.random.SeedSequence([seed, layer, head]).generate_state(1)[0])
        _GEOMETRY[key] = instantiate(HeadSpec(kind, r), grid, seed=mseed)
    return _GEOMETRY[key]


# --- forward ------------------------------------------------------------------------

def patchify(images: np.ndarray, patch_px: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, patch_px*patch_px*C), patches row-major, pixels row-major within a patch."""
    b, hh, ww, c = images.shape
    if hh % patch_px or ww % patch_px:
        raise DimensionError(f"image {hh}x{ww} is not divisible by patch size {patch_px}")
    gr, gc = hh // patch_px, ww // patch_px
    x = images.reshape(b, gr, patch_px, gc, patch_px, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gr * gc, patch_px * patch_px * c)


def patch_embed(images, params: ModelParams, config: ModelConfig) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.shape[1:] != config.image_shape:
        raise DimensionError(f"image shape {images.shape[1:]} does not match config {config.image_shape}")
    patches = Tensor(patchify(images, config.patch_px))
    tokens = matmul(patches, params["patch.w"]) + params["patch.b"]
    cls = broadcast_to(reshape(params["cls"], (1, 1, config.dim)), (images.shape[0], 1, config.dim))
    x = concat([cls, tokens], axis=1) + params["pos"]
    return take(x, 0) if single else x


def drop_path(branch: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return branch
    keep = (rng.random((branch.shape[0],) + (1,) * (branch.ndim - 1)) >= rate) / (1.0 - rate)
    return mul(branch, Tensor(keep))


def block_forward(x: Tensor, params: ModelParams, config: ModelConfig, layer: int,
                  masks: list[AttentionMask | None], train: bool = False,
                  rng: np.random.Generator | None = None, capture: bool = False, sparse: bool = False):
    """Pre-norm block. Returns ``(x_out, per-head maps)``."""
    b = f"blocks.{layer}"
    rate = config.drop_path_rate * layer / max(1, config.layers - 1) if train else 0.0
    heads = [params.head(layer, h) for h in range(config.heads)]
    y, maps = mha_forward(layernorm(x, params[b + ".ln1.g"], params[b + ".ln1.b"], LN_EPS), heads,
                          params[b + ".attn.wo"], masks, params[b + ".attn.bo"], capture, sparse)
    if config.layerscale_eps is not None:
        y = mul(y, params[b + ".ls1"])
    x = x + drop_path(y, rate, rng)
    z = layernorm(x, params[b + ".ln2.g"], params[b + ".ln2.b"], LN_EPS)
    z = matmul(gelu(matmul(z, params[b + ".ffn.w1"]) + params[b + ".ffn.b1"]), params[b + ".ffn.w2"])
    z = z + params[b + ".ffn.b2"]
    if config.layerscale_eps is not None:
        z = mul(z, params[b + ".ls2"])
    return x + drop_path(z, rate, rng), maps


def forward(images, params: ModelParams, config: ModelConfig, capture: bool = False, train: bool = False,
            rng: np.random.Generator | None = None, sparse: bool = False):
    """Logits for one image ``(H, W, C)`` or a batch ``(B, H, W, C)``.

    With ``capture`` returns ``(logits, AttentionRecord)``.
    """
    from .metrics import AttentionRecord

    x = patch_embed(images, params, config)
    all_masks = layer_masks(config, params)
    captured = []
    for l in range(config.layers):
        x, maps = block_forward(x, params, config, l, all_masks[l], train, rng, capture, sparse)
        if capture:
            captured.append(maps)
    x = layernorm(x, params["norm.g"], params["norm.b"], LN_EPS)
    cls = take(x, (Ellipsis, 0, slice(None)))
    logits = matmul(reshape(cls, (-1, config.dim)), params["head.w"]) + params["head.b"]
    if np.asarray(images).ndim == 3:
        logits = reshape(logits, (config.classes,))
    if not capture:
        return logits
    maps = np.stack([np.stack(row) for row in captured])
    return logits, AttentionRecord(maps, config.grid, config.scheme)


# --- checkpoints ----------------------------------------------------------------------

class CheckpointError(Exception):
    """Unreadable checkpoint."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def checkpoint_bytes(params: ModelParams, config: ModelConfig, extra: dict | None = None) -> bytes:
    manifest, offset = [], 0
    for name, t in params.tensors.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += 4 * t.data.size
    header = {"config": config.to_dict(), "tensors": manifest}
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in params.tensors.values())
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)) + head + body


def save_checkpoint(params: ModelParams, config: ModelConfig, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config, extra))


def parse_checkpoint(blob: bytes) -> tuple[ModelParams, ModelConfig, dict]:
    if len(blob) < _PREAMBLE.size:
        raise CheckpointTruncatedError(f"file is {len(blob)} bytes, shorter than the preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    start = _PREAMBLE.size + hlen
    if len(blob) < start:
        raise CheckpointTruncatedError("header extends past end of file")
    header = json.loads(blob[_PREAMBLE.size:start])
    body = memoryview(blob)[start:]
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo, hi = entry["offset"], entry["offset"] + 4 * n
        if hi > len(body):
            raise CheckpointTruncatedError(f"tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(body[lo:hi], dtype="<f4").astype(np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = Tensor(arr)
    return ModelParams(tensors), ModelConfig.from_dict(header["config"]), header.get("extra", {})


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    params, config, _ = parse_checkpoint(Path(path).read_bytes())
    return params, config
