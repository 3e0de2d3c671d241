"""Prompt/patch similarity maps, class attention maps, and their file exports."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, FileIOError
from .prompts import ForwardTrace


@dataclass
class DiagnosticsReport:
    cosine_maps: list[np.ndarray]
    attn_maps: list[np.ndarray]
    retention_curve: list[float] | None = None
    metadata: dict[str, str] = field(default_factory=dict)


def _prompts_for_block(trace: ForwardTrace, l: int) -> np.ndarray:
    # post-coding inputs of block l+1; the last block has none, so use its output
    bt = trace.blocks[l - 1]
    return bt.prompt_next if bt.prompt_next is not None else bt.prompt_toks


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; a zero vector has cosine 0 with everything."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return np.clip(an @ bn.T, -1.0, 1.0)


def prompt_patch_cosine(trace: ForwardTrace, sample: int = 0) -> list[np.ndarray]:
    """Per block, the prompt-averaged cosine between each patch token and the prompts."""
    if trace.num_prompts == 0:
        raise ContractError("prompt_patch_cosine needs a trace with at least one prompt token")
    maps = []
    for l in range(1, len(trace.blocks) + 1):
        P = _prompts_for_block(trace, l)[sample]
        X = trace.blocks[l - 1].patch_toks[sample]
        maps.append(cosine_matrix(P, X).mean(axis=0))
    return maps


def class_attention_map(trace: ForwardTrace, l: int, sample: int = 0, rows: str = "class") -> np.ndarray:
    """Head-averaged attention from the class token (or the prompt rows) onto the patches.

    The patch columns are renormalised to sum to 1.
    """
    if not 1 <= l <= len(trace.blocks):
        raise DimensionError(f"block {l} outside 1..{len(trace.blocks)}")
    A = trace.blocks[l - 1].attn[sample].mean(axis=0)  # (T, T)
    Np = trace.num_prompts
    if rows == "class":
        row = A[0]
    elif rows == "prompts":
        if Np == 0:
            raise ContractError("no prompt rows in this trace")
        row = A[1 : 1 + Np].mean(axis=0)
    else:
        raise ValueError(f"rows must be 'class' or 'prompts', got {rows!r}")
    patch = row[1 + Np :]
    return patch / patch.sum()


def retention_curve(cosine_maps, object_mask) -> list[float]:
    """Per block: mean cosine on masked patches minus mean on the rest."""
    if isinstance(cosine_maps, DiagnosticsReport):
        cosine_maps = cosine_maps.cosine_maps
    mask = np.asarray(object_mask, dtype=bool)
    if not mask.any():
        raise ContractError("retention_curve: object mask is empty")
    if mask.all():
        raise ContractError("retention_curve: object mask covers every patch")
    return [float(m[mask].mean() - m[~mask].mean()) for m in cosine_maps]


def build_report(trace: ForwardTrace, sample: int = 0, object_mask=None, **metadata) -> DiagnosticsReport:
    cos = prompt_patch_cosine(trace, sample)
    att = [class_attention_map(trace, l, sample) for l in range(1, len(trace.blocks) + 1)]
    ret = retention_curve(cos, object_mask) if object_mask is not None else None
    meta = {"strategy": trace.strategy.value, "sample_id": str(sample)}
    meta.update({k: str(v) for k, v in metadata.items()})
    return DiagnosticsReport(cos, att, ret, meta)


# --- export -------------------------------------------------------------------------


def grid_shape(n: int) -> tuple[int, int]:
    """(rows, cols) with rows the largest divisor of n not above sqrt(n)."""
    r = int(math.isqrt(n))
    while r > 1 and n % r:
        r -= 1
    return max(r, 1), n // max(r, 1)


def to_gray(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Linear map of min..max onto 0..255; a constant map becomes all 128."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, 128, dtype=np.uint8), lo, hi
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8), lo, hi


def write_pgm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    _write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def read_map_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = fh.read().strip().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


def _write(path, payload) -> None:
    mode = "wb" if isinstance(payload, bytes) else "w"
    try:
        with open(path, mode) as fh:
            fh.write(payload)
    except OSError as exc:
        raise FileIOError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def export_report(report: DiagnosticsReport, out_dir) -> list[str]:
    """Write PGM images, raw-value CSVs, a gray-level mapping CSV and ``index.txt``.

    Returns the written file names (relative to ``out_dir``).
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise FileIOError(f"cannot create {os.fspath(out_dir)}: {exc.strerror}") from exc
    written = []
    mapping = ["map,min,max"]
    for kind, maps in (("cosine", report.cosine_maps), ("attn", report.attn_maps)):
        for l, m in enumerate(maps, start=1):
            stem = f"{kind}_block{l:02d}"
            rows, cols = grid_shape(m.size)
            pixels, lo, hi = to_gray(m)
            write_pgm(os.path.join(out_dir, stem + ".pgm"), pixels.reshape(rows, cols))
            csv = "patch,value\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(m))
            _write(os.path.join(out_dir, stem + ".csv"), csv)
            mapping.append(f"{stem},{lo!r},{hi!r}")
            written += [stem + ".pgm", stem + ".csv"]
    _write(os.path.join(out_dir, "mapping.csv"), "\n".join(mapping) + "\n")
    written.append("mapping.csv")
    if report.retention_curve is not None:
        text = "block,score\n" + "".join(
            f"{l},{s!r}\n" for l, s in enumerate(report.retention_curve, start=1)
        )
        _write(os.path.join(out_dir, "retention.csv"), text)
        written.append("retention.csv")
    index = dict(report.metadata)
    index["blocks"] = str(len(report.cosine_maps))
    index["files"] = " ".join(written)
    _write(os.path.join(out_dir, "index.txt"), "".join(f"{k}={v}\n" for k, v in index.items()))
    written.append("index.txt")
    return written
