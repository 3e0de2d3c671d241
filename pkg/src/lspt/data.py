"""Synthetic classification tasks and the binary dataset format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from ._binio import read_file, read_header, write_file
from .errors import ConfigError, ContractError, FileIOError, FormatError

DATA_MAGIC = b"LSPTD\0"
DATA_VERSION = 1
KINDS = ("local_motif", "long_range_pair")
MOTIF_AMPLITUDE = 1.0


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "local_motif"
    classes: int = 4
    samples_per_class: int = 50
    noise_std: float = 0.1
    image_h: int = 32
    image_w: int = 32
    patch: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"data.kind must be one of {KINDS}, got {self.kind!r}")
        if self.classes < 2:
            raise ConfigError("data.classes must be at least 2")
        if self.samples_per_class < 2:
            raise ConfigError("data.samples_per_class must be at least 2")
        if self.noise_std < 0:
            raise ConfigError("data.noise_std must be non-negative")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError("image size must be divisible by the patch size")
        gh, gw = self.image_h // self.patch, self.image_w // self.patch
        if gh * gw < (2 if self.kind == "long_range_pair" else 1) or (
            self.kind == "long_range_pair" and max(gh, gw) < 2
        ):
            raise ConfigError("patch grid too small for this task kind")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)


@dataclass
class Dataset:
    images: np.ndarray  # (B, 3, H, W) float32
    labels: np.ndarray  # (B,) int64
    masks: np.ndarray  # (B, N) bool, True on class-informative patches
    classes: int
    patch: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = np.asarray(self.masks, dtype=bool)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ContractError(f"labels must lie in [0, {self.classes})")
        n = (self.images.shape[2] // self.patch) * (self.images.shape[3] // self.patch)
        if self.masks.shape != (len(self.labels), n):
            raise ContractError(f"masks must have shape ({len(self.labels)}, {n})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.masks[idx], self.classes, self.patch)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.images.astype("<f4"), self.labels.astype("<i8"), self.masks.astype(np.uint8)):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(struct.pack("<II", self.classes, self.patch))
        return h.hexdigest()


def motif_templates(count: int, patch: int, seed: int = 0) -> np.ndarray:
    """``count`` distinct P×P RGB textures with values in {-A, +A}.

    Each texture is a colour-coded grating: a random sign per channel times a
    stripe pattern whose orientation and frequency depend on the motif index.
    """
    rng = np.random.default_rng([seed, 7919])
    yy, xx = np.mgrid[0:patch, 0:patch]
    out = np.empty((count, 3, patch, patch))
    for m in range(count):
        freq = 1 + (m // 4) % max(1, patch // 2)
        orient = m % 4
        coord = (xx, yy, xx + yy, xx - yy)[orient]
        stripe = np.where((coord * freq // max(1, patch // 4)) % 2 == 0, 1.0, -1.0)
        signs = rng.choice([-1.0, 1.0], size=3)
        out[m] = signs[:, None, None] * stripe[None]
    return MOTIF_AMPLITUDE * out


def class_pairs(classes: int) -> list[tuple[int, int]]:
    """Motif pair for each class of ``long_range_pair``: class c <-> {c, c+1 mod K}.

    Every motif occurs in exactly two classes, so no single patch decides the
    label.
    """
    if classes == 2:
        return [(0, 1), (0, 2)]
    return [tuple(sorted((c, (c + 1) % classes))) for c in range(classes)]


def _corner_pairs(gh: int, gw: int) -> list[tuple[int, int]]:
    a, b = 0, gh * gw - 1
    c, d = gw - 1, (gh - 1) * gw
    pairs = [(a, b)]
    if (c, d) != (a, b) and c != d:
        pairs.append((c, d))
    return pairs


def gen_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    """Draw a class-balanced dataset; samples are grouped by class then shuffled."""
    P, K = spec.patch, spec.classes
    gh, gw = spec.image_h // P, spec.image_w // P
    N = gh * gw
    rng = np.random.default_rng(spec.seed)
    n_motifs = K if spec.kind == "local_motif" else max(p for pr in class_pairs(K) for p in pr) + 1
    templates = motif_templates(n_motifs, P, spec.seed)
    corners = _corner_pairs(gh, gw)

    B = K * spec.samples_per_class
    labels = np.repeat(np.arange(K), spec.samples_per_class)
    labels = labels[rng.permutation(B)]
    images = np.zeros((B, 3, spec.image_h, spec.image_w))
    masks = np.zeros((B, N), dtype=bool)

    def place(img, pos, motif):
        r, c = divmod(pos, gw)
        img[:, r * P : (r + 1) * P, c * P : (c + 1) * P] = templates[motif]

    for s in range(B):
        y = labels[s]
        if spec.kind == "local_motif":
            pos = int(rng.integers(N))
            place(images[s], pos, y)
            masks[s, pos] = True
        else:
            a, b = class_pairs(K)[y]
            p0, p1 = corners[int(rng.integers(len(corners)))]
            if rng.integers(2):
                a, b = b, a
            place(images[s], p0, a)
            place(images[s], p1, b)
            masks[s, [p0, p1]] = True
    if spec.noise_std > 0:
        images += rng.normal(0.0, spec.noise_std, size=images.shape)
    return Dataset(images.astype(np.float32), labels, masks, K, P)


def template_oracle(dataset: Dataset, kind: str, seed: int = 0) -> np.ndarray:
    """Brute-force label predictions by matching every patch against every template."""
    P, K = dataset.patch, dataset.classes
    n_motifs = K if kind == "local_motif" else max(p for pr in class_pairs(K) for p in pr) + 1
    templates = motif_templates(n_motifs, P, seed).reshape(n_motifs, -1)
    B, C, H, W = dataset.images.shape
    gh, gw = H // P, W // P
    patches = (
        dataset.images.astype(np.float64)
        .reshape(B, C, gh, P, gw, P)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(B, gh * gw, -1)
    )
    preds = np.empty(B, dtype=np.int64)
    pairs = class_pairs(K)
    for s in range(B):
        # distance of each patch to each template, and to the empty background
        d = ((patches[s][:, None, :] - templates[None]) ** 2).sum(-1)
        d_bg = (patches[s] ** 2).sum(-1)
        gain = d_bg - d.min(axis=1)
        if kind == "local_motif":
            pos = int(np.argmax(gain))
            preds[s] = int(np.argmin(d[pos]))
        else:
            top = np.argsort(-gain, kind="stable")[:2]
            found = tuple(sorted(int(np.argmin(d[p])) for p in top))
            preds[s] = pairs.index(found) if found in pairs else -1
    return preds


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; within each split samples keep their original order."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(dataset.classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < 2:
            raise ContractError(f"class {c} has {idx.size} samples; a split needs at least 2")
        idx = idx[rng.permutation(idx.size)]
        n_train = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        train_idx.extend(idx[:n_train])
        val_idx.extend(idx[n_train:])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


# --- file format ----------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """``LSPTD\\0``, u16 version, u32 B,H,W,K, u16 labels, packed masks, float32 images."""
    B, _, H, W = dataset.images.shape
    masks = np.packbits(dataset.masks, axis=1, bitorder="little")
    payload = (
        DATA_MAGIC
        + struct.pack("<H4I", DATA_VERSION, B, H, W, dataset.classes)
        + dataset.labels.astype("<u2").tobytes()
        + masks.tobytes()
        + np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    )
    write_file(path, payload)


def _infer_patch(H: int, W: int, mask_bytes: int) -> int:
    cands = [
        p for p in range(1, min(H, W) + 1)
        if H % p == 0 and W % p == 0 and -(-(H * W // (p * p)) // 8) == mask_bytes
    ]  # fmt: skip
    if not cands:
        raise FormatError("dataset file: mask size matches no patch size")
    return max(cands)


def load_dataset(path, patch: int | None = None) -> Dataset:
    """Read a dataset file.

    The header does not store the patch size. Without ``patch``, the largest
    patch size consistent with the mask payload is assumed.
    """
    buf = read_file(path)
    (B, H, W, K), off = read_header(buf, DATA_MAGIC, "4I", "dataset")
    if H == 0 or W == 0 or K == 0:
        raise FormatError("dataset file header has a zero dimension")
    image_bytes = 4 * B * 3 * H * W
    rest = len(buf) - off - 2 * B - image_bytes
    if rest < 0:
        raise FileIOError(f"dataset file truncated: payload shorter than B·3·H·W = {B * 3 * H * W} floats")
    if B == 0:
        mask_bytes = 0
        patch = patch or 1
    else:
        if rest % B:
            raise FormatError("dataset file: payload length inconsistent with header")
        mask_bytes = rest // B
        if patch is None:
            patch = _infer_patch(H, W, mask_bytes)
        elif -(-(H * W // (patch * patch)) // 8) != mask_bytes:
            raise FormatError(f"dataset file: masks do not match patch size {patch}")
    N = (H // patch) * (W // patch)
    labels = np.frombuffer(buf, dtype="<u2", count=B, offset=off).astype(np.int64)
    off += 2 * B
    packed = np.frombuffer(buf, dtype=np.uint8, count=B * mask_bytes, offset=off).reshape(B, mask_bytes)
    masks = np.unpackbits(packed, axis=1, count=N, bitorder="little").astype(bool)
    off += B * mask_bytes
    images = np.frombuffer(buf, dtype="<f4", count=B * 3 * H * W, offset=off).reshape(B, 3, H, W)
    if (labels >= K).any():
        raise FormatError("dataset file: label outside [0, K)")
    return Dataset(images.astype(np.float32), labels, masks, K, patch)
