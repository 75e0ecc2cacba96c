"""Short-term modeling, long-term compression, long-short fusion and the head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor as T
from .attention import KeyRun, PairCounter, attention_block, grouped_attention
from .chunking import ChunkTokens
from .tensor import Tensor

if TYPE_CHECKING:
    from .model import Model

FUSION_OPS = ("cross_attention", "self_attention")
MEMORY_CHUNK = -1  # chunk tag of memory tokens: admissible to every query


@dataclass(frozen=True)
class StreamsConfig:
    l_sm: int = 4
    l_lc: int = 4
    t_short: int = 8
    t_long: int = 16
    fusion_op: str = "cross_attention"
    fusion_layer: int = 3
    lc_temporal_factors: tuple[int, ...] = (2, 2, 1, 1)
    lc_spatial_factor: int = 2
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "lc_temporal_factors", tuple(int(f) for f in self.lc_temporal_factors))
        if self.l_sm < 1 or self.t_short < 1 or self.t_long < 0 or self.num_classes < 2:
            raise ValueError("invalid streams configuration")
        if self.fusion_op not in FUSION_OPS:
            raise ValueError(f"fusion_op must be one of {FUSION_OPS}, got {self.fusion_op!r}")
        if not 1 <= self.fusion_layer <= self.l_sm:
            raise ValueError(f"fusion_layer must be in 1..{self.l_sm}")
        if len(self.lc_temporal_factors) != self.l_lc:
            raise ValueError("lc_temporal_factors must have l_lc entries")
        if any(f < 1 for f in self.lc_temporal_factors) or self.lc_spatial_factor < 1:
            raise ValueError("compression factors must be >= 1")
        if self.t_long % self.temporal_reduction:
            raise ValueError(f"t_long={self.t_long} is not a multiple of the temporal reduction "
                             f"{self.temporal_reduction}")

    @property
    def temporal_reduction(self) -> int:
        return math.prod(self.lc_temporal_factors)


@dataclass
class CompressedMemory:
    tokens: Tensor
    source_range: tuple[int, int]  # inclusive absolute chunk span
    grid: tuple[int, int, int]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def lc_grids(t_long: int, n_h: int, n_w: int, cfg: StreamsConfig) -> list[tuple[int, int, int]]:
    """Token grid entering each compression layer, plus the final output grid."""
    grids = [(t_long, n_h, n_w)]
    for i, f in enumerate(cfg.lc_temporal_factors):
        s = cfg.lc_spatial_factor if i == 0 else 1
        t, h, w = grids[-1]
        grids.append((t // f, h // s, w // s))
    return grids


def long_term_compress(window: Sequence[ChunkTokens], model: "Model",
                       counter: PairCounter | None = None) -> CompressedMemory | None:
    """Detach the long window's patch tokens and compress them.

    The window is right-aligned to a multiple of the total temporal reduction;
    ``None`` means nothing is left to compress and fusion is skipped.
    """
    cfg = model.cfg.streams
    usable = len(window) // cfg.temporal_reduction * cfg.temporal_reduction
    if usable == 0:
        return None
    window = list(window)[len(window) - usable:]
    ccfg = model.cfg.chunk
    x = T.stop_gradient(T.concat([c.patches for c in window], axis=0))
    grids = lc_grids(usable, ccfg.n_h, ccfg.n_w, cfg)
    for block, grid in zip(model.lc, grids):
        x = attention_block(block, x, q_grid=grid, counter=counter)
    return CompressedMemory(x, (window[0].chunk_index, window[-1].chunk_index), grids[-1])


class FusionContext:
    """Memory plus its key/value projections, computed once per step."""

    def __init__(self, model: "Model", memory: CompressedMemory | None):
        self.memory = memory
        self.kv: tuple[Tensor, Tensor] | None = None
        if memory is None:
            return
        cfg = model.cfg.streams
        if cfg.fusion_op == "cross_attention":
            self.kv = model.fusion.keys_values(memory.tokens)
        else:
            self.kv = model.sm[cfg.fusion_layer - 1].keys_values(memory.tokens)

    @property
    def active(self) -> bool:
        return self.memory is not None


def sm_layer(
    model: "Model",
    layer: int,
    chunks: Sequence[tuple[int, Tensor]],
    prior: Sequence[KeyRun],
    fusion: FusionContext | None,
    counter: PairCounter | None = None,
    dump: list | None = None,
) -> tuple[list[tuple[int, Tensor]], list[KeyRun]]:
    """One causal short-term layer for ``chunks`` given earlier chunks' keys/values.

    Returns the layer outputs and the new chunks' key/value runs. Regular
    inference passes the whole window with no ``prior``; efficient inference
    passes only the newest chunk with its cached ``prior``.
    """
    cfg = model.cfg.streams
    block = model.sm[layer]
    fused_here = fusion is not None and fusion.active and layer == cfg.fusion_layer - 1
    projected = [(idx, *block.project(x)) for idx, x in chunks]
    new_runs = [(idx, k, v) for idx, _, k, v in projected]
    key_runs = list(prior) + new_runs
    if fused_here and cfg.fusion_op == "self_attention":
        key_runs = [(MEMORY_CHUNK, *fusion.kv)] + key_runs
    atts = grouped_attention([(idx, q) for idx, q, _, _ in projected], key_runs,
                             block.scale, block.name, counter, dump)
    outs = [(idx, block.finish(x, a)) for (idx, x), a in zip(chunks, atts)]
    if fused_here and cfg.fusion_op == "cross_attention":
        outs = fuse(model, outs, fusion, counter, dump)
    return outs, new_runs


def fuse(model: "Model", sm_tokens: Sequence[tuple[int, Tensor]], fusion: FusionContext,
         counter: PairCounter | None = None, dump: list | None = None) -> list[tuple[int, Tensor]]:
    """Cross-attend each chunk's tokens to the compressed memory."""
    if fusion is None or not fusion.active:
        return list(sm_tokens)
    block = model.fusion
    queries = [(idx, block.queries(x)) for idx, x in sm_tokens]
    atts = grouped_attention(queries, [(MEMORY_CHUNK, *fusion.kv)], block.scale,
                             block.name, counter, dump)
    return [(idx, block.finish(x, a)) for (idx, x), a in zip(sm_tokens, atts)]


def head_logits(model: "Model", tokens: Tensor) -> Tensor:
    """Logits from the CLS row (last row) of one chunk's tokens, shape (1, C)."""
    n = tokens.shape[0]
    cls = T.take_rows(tokens, slice(n - 1, n))
    return T.add(T.matmul(cls, model.head["weight"]), model.head["bias"])


def short_term_forward(
    window: Sequence[ChunkTokens],
    memory: CompressedMemory | None,
    model: "Model",
    counter: PairCounter | None = None,
    dump: list | None = None,
    fusion: FusionContext | None = None,
) -> tuple[list[tuple[int, Tensor]], Tensor]:
    """Full causal pass over the short window; logits for every chunk, (n, C)."""
    if not window:
        raise ValueError("short window is empty")
    if fusion is None:
        fusion = FusionContext(model, memory)
    xs = [(c.chunk_index, c.tokens) for c in window]
    for layer in range(model.cfg.streams.l_sm):
        xs, _ = sm_layer(model, layer, xs, (), fusion, counter, dump)
    logits = T.concat([head_logits(model, x) for _, x in xs], axis=0)
    return xs, logits


def classify(logits) -> np.ndarray:
    """Softmax over classes."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
