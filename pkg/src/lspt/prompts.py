"""Prompt-tuning strategies on top of the frozen backbone.

Prompt sets are 1-indexed in the docstrings to match block numbers: block
``l`` consumes prompt input ``X_P^{l-1}`` and, for the coded strategies, the
fresh learnable set ``P^{l+1}`` is folded into the input of block ``l+1``.
``P^1`` is the prompt input of block 1, so a bank holds exactly ``L`` sets
and every set is consumed once.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from ._binio import as_f32_exact, pack_floats, read_file, read_header, unpack_floats, write_file
from .autodiff import Tensor
from .backbone import (
    BackboneWeights,
    LayerWeights,
    TokenBundle,
    ViTConfig,
    attn_block,
    class_tokens,
    patch_embed,
    transformer_layer,
)
from .errors import ContractError, DimensionError, FileIOError, FormatError

BANK_MAGIC = b"LSPTP\0"
BANK_VERSION = 1
DEFAULT_NUM_PROMPTS = 4


class StrategyKind(str, Enum):
    LinearProbe = "LinearProbe"
    VPTShallow = "VPTShallow"
    VPTDeep = "VPTDeep"
    LSPT = "LSPT"
    LSPT_GRU = "LSPT_GRU"
    LSPT_Transformer = "LSPT_Transformer"
    LSPT_KMeans = "LSPT_KMeans"
    LSPT_GSPC_only = "LSPT_GSPC_only"
    LSPT_LPC_only = "LSPT_LPC_only"

    @classmethod
    def parse(cls, name: str) -> "StrategyKind":
        try:
            return cls(name.strip())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ContractError(f"unknown strategy {name!r}; choose from {choices}") from None

    @property
    def tag(self) -> int:
        return list(StrategyKind).index(self)


@dataclass(frozen=True)
class Coding:
    """Which spatial and temporal component sits in each slot between blocks.

    ``spatial`` is ``"mean"``, ``"kmeans"`` or ``None`` (carry the raw output
    prompts); ``temporal`` is ``"lstm"``, ``"gru"``, ``"transformer"`` or
    ``None`` (add the fresh prompts). With both slots empty nothing is
    carried and the block gets the fresh prompts alone, i.e. VPT-deep.
    """

    spatial: str | None
    temporal: str | None


CODINGS: dict[StrategyKind, Coding] = {
    StrategyKind.VPTDeep: Coding(None, None),
    StrategyKind.LSPT: Coding("mean", "lstm"),
    StrategyKind.LSPT_GRU: Coding("mean", "gru"),
    StrategyKind.LSPT_Transformer: Coding("mean", "transformer"),
    StrategyKind.LSPT_KMeans: Coding("kmeans", "lstm"),
    StrategyKind.LSPT_GSPC_only: Coding("mean", None),
    StrategyKind.LSPT_LPC_only: Coding(None, "lstm"),
}

LSTM_GATES = ("input", "forget", "cell", "output")
GRU_GATES = ("update", "reset", "candidate")


@dataclass
class RecurrentCellWeights:
    """Per-gate ``W_x (D×D)``, ``W_h (D×D)`` and bias ``b (D)``."""

    kind: str
    wx: list[Tensor]
    wh: list[Tensor]
    b: list[Tensor]

    @property
    def gates(self) -> tuple[str, ...]:
        return LSTM_GATES if self.kind == "lstm" else GRU_GATES

    def tensors(self) -> list[Tensor]:
        out = []
        for g in range(len(self.gates)):
            out.extend((self.wx[g], self.wh[g], self.b[g]))
        return out

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for g, name in enumerate(self.gates):
            out += [
                (f"{prefix}.{name}.wx", self.wx[g]),
                (f"{prefix}.{name}.wh", self.wh[g]),
                (f"{prefix}.{name}.b", self.b[g]),
            ]
        return out

    @classmethod
    def shapes(cls, kind: str, dim: int) -> list[tuple[int, ...]]:
        n = len(LSTM_GATES if kind == "lstm" else GRU_GATES)
        return [(dim, dim), (dim, dim), (dim,)] * n

    @classmethod
    def from_tensors(cls, kind: str, ts: list[Tensor]) -> "RecurrentCellWeights":
        return cls(kind, list(ts[0::3]), list(ts[1::3]), list(ts[2::3]))

    @classmethod
    def zeros(cls, kind: str, dim: int) -> "RecurrentCellWeights":
        return cls.from_tensors(kind, [Tensor(np.zeros(s), True) for s in cls.shapes(kind, dim)])

    @classmethod
    def init(cls, kind: str, dim: int, rng: np.random.Generator) -> "RecurrentCellWeights":
        bound = 1.0 / np.sqrt(dim)
        ts = [
            Tensor(as_f32_exact(rng.uniform(-bound, bound, size=s)), requires_grad=True)
            for s in cls.shapes(kind, dim)
        ]
        return cls.from_tensors(kind, ts)


@dataclass
class PromptBank:
    """Everything trainable: prompt sets, recurrent cell(s), aggregator, head."""

    strategy: StrategyKind
    prompts: list[Tensor]
    head_w: Tensor
    head_b: Tensor
    cells: list[RecurrentCellWeights] = field(default_factory=list)
    aggregator: LayerWeights | None = None
    heads: int = 1
    kmeans_iters: int = 10
    kmeans_seed: int = 0

    @property
    def num_prompts(self) -> int:
        return self.prompts[0].shape[0] if self.prompts else 0

    @property
    def dim(self) -> int:
        return self.head_w.shape[0]

    @property
    def classes(self) -> int:
        return self.head_w.shape[1]

    @property
    def cell_kind(self) -> str | None:
        return self.cells[0].kind if self.cells else None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Canonical order: prompts, cells, aggregator, head."""
        out = [(f"prompts.{i + 1}", p) for i, p in enumerate(self.prompts)]
        for c, cell in enumerate(self.cells):
            out += cell.named(f"cell.{c}")
        if self.aggregator is not None:
            out += [(f"aggregator.{f}", t) for f, t in zip(_LAYER_FIELDS, self.aggregator.tensors())]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def with_tensors(self, ts: list[Tensor]) -> "PromptBank":
        """A bank with the same layout whose parameters are ``ts`` (canonical order)."""
        ts = list(ts)
        if len(ts) != len(self.tensors()):
            raise ContractError(f"expected {len(self.tensors())} tensors, got {len(ts)}")
        it = iter(ts)
        prompts = [next(it) for _ in self.prompts]
        cells = []
        for cell in self.cells:
            cells.append(RecurrentCellWeights.from_tensors(cell.kind, [next(it) for _ in cell.tensors()]))
        agg = None
        if self.aggregator is not None:
            agg = LayerWeights(*[next(it) for _ in self.aggregator.tensors()])
        head_w, head_b = next(it), next(it)
        return PromptBank(
            self.strategy, prompts, head_w, head_b, cells, agg,
            self.heads, self.kmeans_iters, self.kmeans_seed,
        )  # fmt: skip

    def copy(self) -> "PromptBank":
        return self.with_tensors([Tensor(t.data.copy(), requires_grad=True) for t in self.tensors()])


_LAYER_FIELDS = [f for f in LayerWeights.__dataclass_fields__]


def init_bank(
    strategy: StrategyKind | str,
    config: ViTConfig,
    num_prompts: int = DEFAULT_NUM_PROMPTS,
    seed: int = 0,
    shared_cell: bool = True,
    kmeans_iters: int = 10,
) -> PromptBank:
    """Fresh trainable parameters for ``strategy`` on a backbone of shape ``config``.

    ``shared_cell=False`` builds one recurrent cell per block boundary
    (``L-1`` of them); it exists to measure what weight sharing saves.
    """
    strategy = StrategyKind(strategy)
    rng = np.random.default_rng(seed)
    D, K, L = config.dim, config.classes, config.blocks
    if num_prompts < 0:
        raise ContractError("num_prompts must be non-negative")
    n_sets = {StrategyKind.LinearProbe: 0, StrategyKind.VPTShallow: 1}.get(strategy, L)
    if strategy is StrategyKind.LinearProbe:
        num_prompts = 0
    # uniform(-v, v) with v = sqrt(6 / (fan_in + D)), fan_in = one flattened patch
    v = np.sqrt(6.0 / (config.patch_dim + D))
    prompts = [
        Tensor(as_f32_exact(rng.uniform(-v, v, size=(num_prompts, D))), requires_grad=True)
        for _ in range(n_sets)
    ]
    coding = CODINGS.get(strategy)
    cells: list[RecurrentCellWeights] = []
    if coding is not None and coding.temporal in ("lstm", "gru"):
        n_cells = 1 if shared_cell else L - 1
        cells = [RecurrentCellWeights.init(coding.temporal, D, rng) for _ in range(n_cells)]
    agg = None
    if coding is not None and coding.temporal == "transformer":
        agg = LayerWeights.init(D, config.hidden, rng, requires_grad=True)
    head_w = Tensor(as_f32_exact(rng.normal(0.0, 0.02, size=(D, K))), requires_grad=True)
    head_b = Tensor(np.zeros(K), requires_grad=True)
    return PromptBank(strategy, prompts, head_w, head_b, cells, agg, config.heads, kmeans_iters)


# --- coding components ------------------------------------------------------


def gspc(prompts_out, patches_out) -> Tensor:
    """Add the mean output patch token to every output prompt token."""
    prompts_out, patches_out = ad._as_tensor(prompts_out), ad._as_tensor(patches_out)
    if prompts_out.shape[-1] != patches_out.shape[-1] or prompts_out.shape[:-2] != patches_out.shape[:-2]:
        raise ContractError(
            f"gspc: prompts {prompts_out.shape} and patches {patches_out.shape} disagree"
        )
    if patches_out.shape[-2] < 1:
        raise ContractError("gspc: needs at least one patch token")
    return ad.add(prompts_out, ad.mean_over_rows(patches_out))


def _farthest(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray, taken: set) -> int:
    d = ((points - centroids[assign]) ** 2).sum(axis=1)
    for i in np.argsort(-d, kind="stable"):
        if int(i) not in taken:
            return int(i)
    return 0


def lloyd_kmeans(points: np.ndarray, k: int, iters: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with a deterministic initialisation.

    Initial centroids are the first ``k`` distinct rows of ``points`` taken in
    a seed-shuffled order; centroid ``j`` keeps index ``j`` throughout. An
    empty cluster is re-seeded with the point farthest from its centroid.
    Ties in assignment go to the lowest centroid index. Returns
    ``(centroids, assignment)``.
    """
    points = np.asarray(points, dtype=np.float64)
    N = points.shape[0]
    if k > N:
        raise ContractError(f"k-means: k={k} exceeds the {N} available points")
    order = np.random.default_rng(seed).permutation(N)
    chosen: list[int] = []
    for i in order:
        if all(not np.array_equal(points[i], points[j]) for j in chosen):
            chosen.append(int(i))
        if len(chosen) == k:
            break
    for i in order:  # fewer than k distinct rows: allow repeats
        if len(chosen) == k:
            break
        if int(i) not in chosen:
            chosen.append(int(i))
    centroids = points[chosen].copy()

    def assign_to(c):
        d = ((points[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)

    assign = assign_to(centroids)
    for _ in range(iters):
        new = centroids.copy()
        taken: set[int] = set()
        for j in range(k):
            members = np.flatnonzero(assign == j)
            if members.size == 0:
                far = _farthest(points, centroids, assign, taken)
                taken.add(far)
                new[j] = points[far]
                continue
            acc = points[members[0]].copy()
            for m in members[1:]:
                acc += points[m]
            new[j] = acc / members.size
        centroids = new
        nxt = assign_to(centroids)
        if np.array_equal(nxt, assign):
            break
        assign = nxt
    return centroids, assign


def gspc_kmeans(prompts_out, patches_out, iters: int = 10, seed: int = 0) -> Tensor:
    """Add k-means centroids of the patch tokens (k = number of prompts) to the prompts.

    Centroids enter as constants: no gradient flows through the clustering.
    """
    prompts_out, patches_out = ad._as_tensor(prompts_out), ad._as_tensor(patches_out)
    Np, N = prompts_out.shape[-2], patches_out.shape[-2]
    if prompts_out.shape[-1] != patches_out.shape[-1]:
        raise ContractError(f"gspc_kmeans: widths {prompts_out.shape} vs {patches_out.shape}")
    if Np > N:
        raise ContractError(f"gspc_kmeans: {Np} prompts but only {N} patch tokens")
    X = patches_out.data
    flat = X.reshape(-1, N, X.shape[-1])
    cents = np.stack([lloyd_kmeans(x, Np, iters, seed)[0] for x in flat])
    return ad.add(prompts_out, cents.reshape(X.shape[:-2] + (Np, X.shape[-1])))


def _gate(x, h, cell: RecurrentCellWeights, g: int) -> Tensor:
    return ad.add(ad.add(ad.matmul(x, cell.wx[g]), ad.matmul(h, cell.wh[g])), cell.b[g])


def _check_same(op: str, *ts: Tensor) -> None:
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ContractError(f"{op}: shape mismatch {[t.shape for t in ts]}")


def lstm_step(x, h, c, w: RecurrentCellWeights) -> tuple[Tensor, Tensor]:
    """One LSTM step applied to every token row independently.

    i, f, o = σ(x W_x + h W_h + b) per gate, g = tanh(...);
    c' = f ⊙ c + i ⊙ g, h' = o ⊙ tanh(c').
    """
    x, h, c = ad._as_tensor(x), ad._as_tensor(h), ad._as_tensor(c)
    _check_same("lstm_step", x, h, c)
    if x.shape[-1] != w.wx[0].shape[0]:
        raise ContractError(f"lstm_step: width {x.shape[-1]} vs cell {w.wx[0].shape}")
    i = ad.sigmoid(_gate(x, h, w, 0))
    f = ad.sigmoid(_gate(x, h, w, 1))
    g = ad.tanh(_gate(x, h, w, 2))
    o = ad.sigmoid(_gate(x, h, w, 3))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def gru_step(x, h, w: RecurrentCellWeights) -> Tensor:
    """Standard GRU: h' = (1 - z) ⊙ h + z ⊙ tanh(x W + (r ⊙ h) U + b)."""
    x, h = ad._as_tensor(x), ad._as_tensor(h)
    _check_same("gru_step", x, h)
    if x.shape[-1] != w.wx[0].shape[0]:
        raise ContractError(f"gru_step: width {x.shape[-1]} vs cell {w.wx[0].shape}")
    z = ad.sigmoid(_gate(x, h, w, 0))
    r = ad.sigmoid(_gate(x, h, w, 1))
    cand = ad.tanh(_gate(x, ad.mul(r, h), w, 2))
    return ad.add(ad.sub(h, ad.mul(z, h)), ad.mul(z, cand))


def transformer_aggregate(spatial_prompts, new_prompts, w: LayerWeights, heads: int = 1,
                          return_attn: bool = False):
    """One pre-norm transformer layer over [spatial; new]; keeps the new-prompt positions."""
    s, n = ad._as_tensor(spatial_prompts), ad._as_tensor(new_prompts)
    if s.shape != n.shape:
        raise ContractError(f"transformer_aggregate: shapes {s.shape} vs {n.shape}")
    squeeze = s.ndim == 2
    if squeeze:
        s, n = ad.reshape(s, (1,) + s.shape), ad.reshape(n, (1,) + n.shape)
    Np = s.shape[-2]
    y, attn = transformer_layer(ad.concat_tokens([s, n]), w, heads)
    _, out = ad.split_tokens(y, [Np, Np])
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
        attn = attn[0]
    return (out, attn) if return_attn else out


# --- the pipeline -------------------------------------------------------------


def _expand(p: Tensor, batch: int) -> Tensor:
    return ad.add(np.zeros((batch,) + p.shape), p)


def _cell_for(bank: PromptBank, l: int) -> RecurrentCellWeights:
    if not bank.cells:
        raise ContractError(f"strategy {bank.strategy.value} bank has no recurrent cell")
    return bank.cells[0] if len(bank.cells) == 1 else bank.cells[l - 1]


def build_next_inputs(
    strategy: StrategyKind | str,
    l: int,
    block_out: TokenBundle,
    bank: PromptBank,
    ctx: Tensor,
    calls: list[str] | None = None,
    coding: Coding | None = None,
) -> tuple[Tensor, Tensor]:
    """Prompt input for block ``l + 1`` and the updated context state.

    ``calls``, when given, receives the names of the components invoked.
    ``coding`` overrides the strategy's slots, e.g. ``Coding(None, None)``
    switches both codings off for an LSPT bank.
    """
    strategy = StrategyKind(strategy)
    L = len(bank.prompts) if strategy is not StrategyKind.VPTShallow else None
    if l < 1 or (L is not None and l >= L):
        raise ContractError(f"build_next_inputs: no prompt coding after block {l}")
    log = calls.append if calls is not None else (lambda name: None)
    out_p, out_x = block_out.prompt_toks, block_out.patch_toks

    if strategy is StrategyKind.LinearProbe:
        return out_p, ctx
    if strategy is StrategyKind.VPTShallow:
        log("carry")
        return out_p, ctx

    coding = coding or CODINGS[strategy]
    fresh = _expand(bank.prompts[l], out_p.shape[0])  # P^{l+1}
    if coding.spatial is None and coding.temporal is None:
        log("fresh")
        return fresh, ctx

    if coding.spatial == "mean":
        log("gspc")
        state = gspc(out_p, out_x)
    elif coding.spatial == "kmeans":
        log("gspc_kmeans")
        state = gspc_kmeans(out_p, out_x, bank.kmeans_iters, bank.kmeans_seed)
    else:
        log("identity")
        state = out_p

    if coding.temporal == "lstm":
        log("lstm_step")
        nxt, ctx = lstm_step(fresh, state, ctx, _cell_for(bank, l))
    elif coding.temporal == "gru":
        log("gru_step")
        nxt = gru_step(fresh, state, _cell_for(bank, l))
    elif coding.temporal == "transformer":
        log("transformer_aggregate")
        nxt = transformer_aggregate(state, fresh, bank.aggregator, bank.heads)
    else:
        log("add_fresh")
        nxt = ad.add(state, fresh)
    return nxt, ctx


@dataclass
class BlockTrace:
    """Arrays recorded for one block; all carry a leading batch axis."""

    class_tok: np.ndarray
    prompt_toks: np.ndarray
    patch_toks: np.ndarray
    attn: np.ndarray
    prompt_in: np.ndarray
    prompt_next: np.ndarray | None = None
    calls: list[str] = field(default_factory=list)


@dataclass
class ForwardTrace:
    strategy: StrategyKind
    blocks: list[BlockTrace]

    @property
    def num_prompts(self) -> int:
        return self.blocks[0].prompt_toks.shape[-2]

    @property
    def num_patches(self) -> int:
        return self.blocks[0].patch_toks.shape[-2]


def lspt_forward(
    images,
    backbone: BackboneWeights,
    bank: PromptBank,
    strategy: StrategyKind | str | None = None,
    trace: bool = True,
    coding: Coding | None = None,
) -> tuple[Tensor, ForwardTrace | None]:
    """Logits and per-block trace for one image ``(3, H, W)`` or a batch ``(B, 3, H, W)``.

    Logits are ``(K,)`` for a single image and ``(B, K)`` for a batch.
    ``coding`` is passed through to :func:`build_next_inputs`.
    """
    strategy = StrategyKind(strategy) if strategy is not None else bank.strategy
    cfg = backbone.config
    if bank.dim != cfg.dim or bank.classes != cfg.classes:
        raise DimensionError(
            f"bank (D={bank.dim}, K={bank.classes}) does not fit backbone (D={cfg.dim}, K={cfg.classes})"
        )
    single = np.ndim(images.data if isinstance(images, Tensor) else images) == 3
    X = patch_embed(images, backbone)
    B, D = X.shape[0], cfg.dim

    if strategy is StrategyKind.LinearProbe or bank.num_prompts == 0:
        xp = Tensor(np.zeros((B, 0, D)))
    else:
        if strategy is not StrategyKind.VPTShallow and len(bank.prompts) < cfg.blocks:
            raise ContractError(
                f"{strategy.value} needs {cfg.blocks} prompt sets, bank has {len(bank.prompts)}"
            )
        xp = _expand(bank.prompts[0], B)
    ctx = Tensor(np.zeros((B, xp.shape[-2], D)))  # C^0
    xc = class_tokens(backbone, B)

    blocks: list[BlockTrace] = []
    no_prompts = xp.shape[-2] == 0
    for l in range(1, cfg.blocks + 1):
        out, attn = attn_block(l, TokenBundle(xc, xp, X), backbone)
        calls: list[str] = []
        nxt = None
        if l < cfg.blocks:
            if no_prompts:
                nxt = out.prompt_toks
            else:
                nxt, ctx = build_next_inputs(strategy, l, out, bank, ctx, calls, coding)
        if trace:
            blocks.append(
                BlockTrace(
                    out.class_tok.data, out.prompt_toks.data, out.patch_toks.data, attn,
                    xp.data, None if nxt is None else nxt.data, calls,
                )  # fmt: skip
            )
        xc, xp, X = out.class_tok, nxt, out.patch_toks

    logits = ad.linear(ad.reshape(xc, (B, D)), bank.head_w, bank.head_b)
    if single:
        logits = ad.reshape(logits, (cfg.classes,))
    return logits, (ForwardTrace(strategy, blocks) if trace else None)


# --- parameter accounting -------------------------------------------------------


@dataclass
class Partition:
    trainable: list[tuple[str, Tensor]]
    frozen: list[tuple[str, Tensor]]
    counts: dict[str, int]


def _group(name: str) -> str:
    return name.split(".", 1)[0]


def param_partition(strategy: StrategyKind | str, bank: PromptBank,
                    backbone: BackboneWeights | None = None) -> Partition:
    """Split parameters into the trainable bank subset for ``strategy`` and the frozen backbone."""
    strategy = StrategyKind(strategy)
    coding = CODINGS.get(strategy)
    wanted = {"head"}
    if strategy is not StrategyKind.LinearProbe:
        wanted.add("prompts")
    if coding is not None and coding.temporal in ("lstm", "gru"):
        wanted.add("cell")
    if coding is not None and coding.temporal == "transformer":
        wanted.add("aggregator")
    trainable = [(n, t) for n, t in bank.named_tensors() if _group(n) in wanted]
    if strategy is StrategyKind.VPTShallow:
        trainable = [(n, t) for n, t in trainable if not n.startswith("prompts.") or n == "prompts.1"]
    frozen = []
    if backbone is not None:
        frozen = [(f"backbone.{i}", t) for i, t in enumerate(backbone.tensors())]
    counts = {g: 0 for g in ("prompts", "cell", "aggregator", "head")}
    for n, t in trainable:
        counts[_group(n)] += t.data.size
    counts["trainable"] = sum(t.data.size for _, t in trainable)
    counts["frozen"] = sum(t.data.size for _, t in frozen)
    return Partition(trainable, frozen, counts)


# --- bank file ----------------------------------------------------------------

# strategy tag (u16), then u32: n_sets, Np, D, K, cell_kind, n_cells, agg_hidden, heads,
# kmeans_iters, kmeans_seed
_BANK_FMT = "H10I"
_CELL_CODES = {None: 0, "lstm": 1, "gru": 2}


def _bank_shapes(n_sets, Np, D, K, cell_kind, n_cells, agg_hidden):
    shapes = [(Np, D)] * n_sets
    if cell_kind is not None:
        shapes += RecurrentCellWeights.shapes(cell_kind, D) * n_cells
    if agg_hidden:
        shapes += LayerWeights.shapes(D, agg_hidden)
    return shapes + [(D, K), (K,)]


def save_bank(bank: PromptBank, path) -> None:
    """``LSPTP\\0``, u16 version, layout header, then float32 parameters in canonical order."""
    agg_hidden = bank.aggregator.w1.shape[1] if bank.aggregator is not None else 0
    header = struct.pack(
        "<" + _BANK_FMT,
        bank.strategy.tag, len(bank.prompts), bank.num_prompts, bank.dim, bank.classes,
        _CELL_CODES[bank.cell_kind], len(bank.cells), agg_hidden, bank.heads,
        bank.kmeans_iters, bank.kmeans_seed,
    )  # fmt: skip
    payload = BANK_MAGIC + struct.pack("<H", BANK_VERSION) + header
    write_file(path, payload + pack_floats(t.data for t in bank.tensors()))


def load_bank(path) -> PromptBank:
    buf = read_file(path)
    fields_, off = read_header(buf, BANK_MAGIC, _BANK_FMT, "bank")
    tag, n_sets, Np, D, K, cell_code, n_cells, agg_hidden, heads, km_iters, km_seed = fields_
    kinds = list(StrategyKind)
    codes = {v: k for k, v in _CELL_CODES.items()}
    if tag >= len(kinds) or cell_code not in codes or D < 1 or K < 1:
        raise FormatError("bank file header is inconsistent")
    cell_kind = codes[cell_code]
    arrays, end = unpack_floats(buf, off, _bank_shapes(n_sets, Np, D, K, cell_kind, n_cells, agg_hidden))
    if end != len(buf):
        raise FileIOError(f"bank file has {len(buf) - end} trailing bytes")
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    it = iter(ts)
    prompts = [next(it) for _ in range(n_sets)]
    cells = []
    for _ in range(n_cells):
        per = len(RecurrentCellWeights.shapes(cell_kind, D))
        cells.append(RecurrentCellWeights.from_tensors(cell_kind, [next(it) for _ in range(per)]))
    agg = LayerWeights(*[next(it) for _ in _LAYER_FIELDS]) if agg_hidden else None
    head_w, head_b = next(it), next(it)
    return PromptBank(kinds[tag], prompts, head_w, head_b, cells, agg, heads, km_iters, km_seed)


def bank_checksum(bank: PromptBank) -> str:
    h = hashlib.sha256()
    for t in bank.tensors():
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()
