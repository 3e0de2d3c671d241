"""A small pre-norm Vision Transformer used as the frozen backbone.

Weights are plain float64 arrays whose values are exactly representable in
float32, so the on-disk format round-trips bit for bit. Arrays are marked
read-only on construction; any attempt to update the backbone in place
fails loudly.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from ._binio import as_f32_exact, pack_floats, read_file, read_header, unpack_floats, write_file
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, FileIOError, FormatError

WEIGHTS_MAGIC = b"LSPTW\0"
WEIGHTS_VERSION = 1
_HEADER_FMT = "8I"  # H, W, P, D, heads, L, mlp_ratio_x10, K
INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_h: int = 32
    image_w: int = 32
    patch: int = 8
    dim: int = 64
    heads: int = 4
    blocks: int = 6
    mlp_ratio: float = 2.0
    classes: int = 4

    def __post_init__(self):
        for name in ("image_h", "image_w", "patch", "dim", "heads", "blocks", "classes"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"vit.{name} must be a positive integer, got {v!r}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch {self.patch}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0 or round(self.mlp_ratio * 10) != self.mlp_ratio * 10:
            raise ConfigError(f"mlp_ratio must be a positive multiple of 0.1, got {self.mlp_ratio}")

    @property
    def num_patches(self) -> int:
        return (self.image_h * self.image_w) // (self.patch * self.patch)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def micro(cls, **overrides) -> "ViTConfig":
        """The desk-scale default: 32x32 images, 8px patches, D=64, 4 heads, 6 blocks."""
        return cls(**overrides)


@dataclass
class LayerWeights:
    """One pre-norm transformer layer: LN -> MHSA -> +res, LN -> MLP -> +res."""

    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def shapes(cls, dim: int, hidden: int) -> list[tuple[int, ...]]:
        D, Hd = dim, hidden
        return [
            (D,), (D,),
            (D, D), (D,), (D, D), (D,), (D, D), (D,), (D, D), (D,),
            (D,), (D,),
            (D, Hd), (Hd,), (Hd, D), (D,),
        ]  # fmt: skip

    @classmethod
    def from_arrays(cls, arrays, requires_grad: bool = False) -> "LayerWeights":
        return cls(*[Tensor(a, requires_grad=requires_grad) for a in arrays])

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator, std: float = INIT_STD,
             requires_grad: bool = False) -> "LayerWeights":
        arrays = []
        for name, shape in zip((f.name for f in fields(cls)), cls.shapes(dim, hidden)):
            if name.startswith("ln") and name.endswith("_g"):
                arrays.append(np.ones(shape))
            elif len(shape) == 2:
                arrays.append(as_f32_exact(rng.normal(0.0, std, size=shape)))
            else:
                arrays.append(np.zeros(shape))
        return cls.from_arrays(arrays, requires_grad)


@dataclass
class BackboneWeights:
    config: ViTConfig
    class_token: Tensor
    pos_embed: Tensor
    patch_w: Tensor
    patch_b: Tensor
    blocks: list[LayerWeights] = field(default_factory=list)

    def tensors(self) -> list[Tensor]:
        """All parameters in the canonical on-disk order."""
        out = [self.class_token, self.pos_embed, self.patch_w, self.patch_b]
        for b in self.blocks:
            out.extend(b.tensors())
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def checksum(self) -> str:
        return backbone_checksum(self)


def _shapes(cfg: ViTConfig) -> list[tuple[int, ...]]:
    D = cfg.dim
    out = [(1, D), (cfg.num_patches, D), (cfg.patch_dim, D), (D,)]
    for _ in range(cfg.blocks):
        out.extend(LayerWeights.shapes(D, cfg.hidden))
    return out


def _assemble(cfg: ViTConfig, arrays: list[np.ndarray]) -> BackboneWeights:
    for a in arrays:
        a.setflags(write=False)
    ts = [Tensor(a) for a in arrays]
    per = len(fields(LayerWeights))
    blocks = [LayerWeights(*ts[4 + i * per : 4 + (i + 1) * per]) for i in range(cfg.blocks)]
    return BackboneWeights(cfg, ts[0], ts[1], ts[2], ts[3], blocks)


def init_backbone(config: ViTConfig, seed: int) -> BackboneWeights:
    """Deterministic random init: N(0, 0.02) maps/embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    D = config.dim
    arrays = [
        as_f32_exact(rng.normal(0.0, INIT_STD, size=(1, D))),
        as_f32_exact(rng.normal(0.0, INIT_STD, size=(config.num_patches, D))),
        as_f32_exact(rng.normal(0.0, INIT_STD, size=(config.patch_dim, D))),
        np.zeros(D),
    ]
    for _ in range(config.blocks):
        arrays.extend(t.data for t in LayerWeights.init(D, config.hidden, rng).tensors())
    return _assemble(config, [np.array(a, dtype=np.float64) for a in arrays])


def backbone_checksum(w: BackboneWeights) -> str:
    h = hashlib.sha256()
    h.update(_config_header(w.config))
    for t in w.tensors():
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _config_header(cfg: ViTConfig) -> bytes:
    return struct.pack(
        "<" + _HEADER_FMT,
        cfg.image_h, cfg.image_w, cfg.patch, cfg.dim, cfg.heads, cfg.blocks,
        int(round(cfg.mlp_ratio * 10)), cfg.classes,
    )  # fmt: skip


def weights_file_size(cfg: ViTConfig) -> int:
    n = sum(int(np.prod(s)) for s in _shapes(cfg))
    return len(WEIGHTS_MAGIC) + 2 + struct.calcsize("<" + _HEADER_FMT) + 4 * n


def save_weights(w: BackboneWeights, path) -> None:
    """Write ``LSPTW\\0``, u16 version, u32 config fields, then float32 parameters."""
    payload = (
        WEIGHTS_MAGIC
        + struct.pack("<H", WEIGHTS_VERSION)
        + _config_header(w.config)
        + pack_floats(t.data for t in w.tensors())
    )
    write_file(path, payload)


def load_weights(path) -> BackboneWeights:
    buf = read_file(path)
    (H, W, P, D, heads, L, r10, K), off = read_header(buf, WEIGHTS_MAGIC, _HEADER_FMT, "weights")
    try:
        cfg = ViTConfig(H, W, P, D, heads, L, r10 / 10, K)
    except ConfigError as exc:
        raise FormatError(f"weights header describes an invalid model: {exc}") from None
    arrays, end = unpack_floats(buf, off, _shapes(cfg))
    if end != len(buf):
        raise FileIOError(f"weights file has {len(buf) - end} trailing bytes")
    return _assemble(cfg, arrays)


# --- forward ----------------------------------------------------------------


@dataclass
class TokenBundle:
    """[class, prompts, patches] along the token axis, each ``(B, n, D)``."""

    class_tok: Tensor
    prompt_toks: Tensor
    patch_toks: Tensor

    @property
    def lengths(self) -> tuple[int, int, int]:
        return (self.class_tok.shape[-2], self.prompt_toks.shape[-2], self.patch_toks.shape[-2])

    def concat(self) -> Tensor:
        return ad.concat_tokens([self.class_tok, self.prompt_toks, self.patch_toks])

    @classmethod
    def split(cls, seq: Tensor, lengths) -> "TokenBundle":
        return cls(*ad.split_tokens(seq, lengths))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, N, 3*P*P); patches row-major, channel-major inside a patch."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * patch * patch)


def as_batch(images, cfg: ViTConfig) -> np.ndarray:
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (3, cfg.image_h, cfg.image_w):
        raise ConfigError(
            f"image shape {x.shape} does not match config (3, {cfg.image_h}, {cfg.image_w})"
        )
    return x


def patch_embed(images, w: BackboneWeights) -> Tensor:
    """Embed every patch and add positional embeddings; returns ``(B, N, D)``."""
    x = as_batch(images, w.config)
    flat = patchify(x, w.config.patch)
    return ad.add(ad.linear(flat, w.patch_w, w.patch_b), w.pos_embed)


def self_attention(x: Tensor, lw: LayerWeights, heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention on ``(B, T, D)``; returns output and ``(B, h, T, T)`` weights."""
    B, T, D = x.shape
    dh = D // heads

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split_heads(ad.linear(x, lw.wq, lw.bq))
    k = split_heads(ad.linear(x, lw.wk, lw.bk))
    v = split_heads(ad.linear(x, lw.wv, lw.bv))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax_rows(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
    return ad.linear(ctx, lw.wo, lw.bo), attn.data


def transformer_layer(x: Tensor, lw: LayerWeights, heads: int) -> tuple[Tensor, np.ndarray]:
    a, attn = self_attention(ad.layernorm(x, lw.ln1_g, lw.ln1_b), lw, heads)
    x = ad.add(x, a)
    hmid = ad.gelu(ad.linear(ad.layernorm(x, lw.ln2_g, lw.ln2_b), lw.w1, lw.b1))
    return ad.add(x, ad.linear(hmid, lw.w2, lw.b2)), attn


def attn_block(l: int, bundle: TokenBundle, w: BackboneWeights) -> tuple[TokenBundle, np.ndarray]:
    """Run block ``l`` (1-based) over [class, prompts, patches] and re-split the output."""
    if not 1 <= l <= w.config.blocks:
        raise DimensionError(f"block index {l} outside 1..{w.config.blocks}")
    D = w.config.dim
    for part in (bundle.class_tok, bundle.prompt_toks, bundle.patch_toks):
        if part.shape[-1] != D:
            raise DimensionError(f"token width {part.shape[-1]} does not match dim {D}")
    lengths = bundle.lengths
    y, attn = transformer_layer(bundle.concat(), w.blocks[l - 1], w.config.heads)
    return TokenBundle.split(y, lengths), attn


def class_tokens(w: BackboneWeights, batch: int) -> Tensor:
    D = w.config.dim
    return ad.add(np.zeros((batch, 1, D)), w.class_token)


def plain_forward(images, w: BackboneWeights) -> Tensor:
    """Prompt-free ViT forward on [x_C, X]; returns the final class tokens ``(B, D)``."""
    X = patch_embed(images, w)
    B = X.shape[0]
    seq = ad.concat_tokens([class_tokens(w, B), X])
    for lw in w.blocks:
        seq, _ = transformer_layer(seq, lw, w.config.heads)
    xc, _ = ad.split_tokens(seq, [1, seq.shape[-2] - 1])
    return ad.reshape(xc, (B, w.config.dim))
