"""Down-sampled attention blocks with chunk-granular causal masking.

A block computes ``Q = LN(X1) Wq``, ``K = LN(X2) Wk``, ``V = LN(X2) Wv``,
down-samples each with a strided per-channel convolution, attends, adds a
pooled residual of ``X1`` and finishes with a pre-norm GELU MLP.

Masked attention is evaluated per chunk: token-wise maps (norms, projections,
MLP) run on one chunk's rows at a time, and each query chunk scores every key
chunk with its own small matrix product. Both streaming engines drive this
same code path, which is what makes their outputs bit-identical.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Rng, ShapeError, Tensor

Strides = tuple[int, int, int]


class MaskError(RuntimeError):
    """A query row has no admissible key under the chunk mask."""


@dataclass(frozen=True)
class AttentionBlockConfig:
    d_model: int
    q_strides: Strides = (1, 1, 1)
    kv_strides: Strides = (1, 1, 1)
    mlp_hidden: int | None = None
    causal: bool = False

    def __post_init__(self):
        if self.d_model < 1:
            raise ValueError("d_model must be positive")
        for s in (*self.q_strides, *self.kv_strides):
            if s < 1:
                raise ValueError(f"strides must be >= 1, got {self.q_strides}/{self.kv_strides}")
        if self.mlp_hidden is not None and self.mlp_hidden % self.d_model:
            raise ValueError("mlp_hidden must be a positive multiple of d_model")
        if self.causal and self.q_strides[0] != 1:
            raise ValueError("temporal query down-sampling is not allowed with a causal mask")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 4 * self.d_model

    @property
    def downsamples(self) -> bool:
        return self.q_strides != (1, 1, 1) or self.kv_strides != (1, 1, 1)


@dataclass(frozen=True)
class ChunkMask:
    """Chunk index of every query row and key row.

    Key ``j`` is admissible for query ``i`` iff ``key_chunks[j] <= query_chunks[i]``.
    """

    query_chunks: np.ndarray
    key_chunks: np.ndarray

    def admissible(self) -> np.ndarray:
        return self.key_chunks[None, :] <= self.query_chunks[:, None]


def build_chunk_mask(query_chunks: Sequence[int], key_chunks: Sequence[int]) -> ChunkMask:
    q = np.asarray(query_chunks, dtype=np.int64)
    k = np.asarray(key_chunks, dtype=np.int64)
    return ChunkMask(q, k)


class PairCounter:
    """Counts attention-score entries computed, keyed by block label."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, label: str, n: int) -> None:
        self.counts[label] += n

    def total(self) -> int:
        return sum(self.counts.values())

    def reset(self) -> None:
        self.counts.clear()


def _vol(s: Strides) -> int:
    return s[0] * s[1] * s[2]


class AttentionBlock:
    """Weights of one attention block plus the token-wise halves of its forward."""

    def __init__(self, name: str, cfg: AttentionBlockConfig, rng: Rng):
        self.name = name
        self.cfg = cfg
        d, hdim = cfg.d_model, cfg.hidden
        p = {}
        p["norm1.gamma"] = np.ones(d)
        p["norm1.beta"] = np.zeros(d)
        p["wq"] = rng.fan_in_uniform((d, d), d)
        p["wk"] = rng.fan_in_uniform((d, d), d)
        p["wv"] = rng.fan_in_uniform((d, d), d)
        for tag, strides in (("q", cfg.q_strides), ("k", cfg.kv_strides), ("v", cfg.kv_strides)):
            if strides != (1, 1, 1):
                vol = _vol(strides)
                p[f"pool_{tag}.kernel"] = rng.fan_in_uniform((vol, d), vol)
                p[f"pool_{tag}.bias"] = np.zeros(d)
        p["norm2.gamma"] = np.ones(d)
        p["norm2.beta"] = np.zeros(d)
        p["mlp.w1"] = rng.fan_in_uniform((d, hdim), d)
        p["mlp.b1"] = np.zeros(hdim)
        p["mlp.w2"] = rng.fan_in_uniform((hdim, d), hdim)
        p["mlp.b2"] = np.zeros(d)
        self.params: dict[str, Tensor] = {k: T.parameter(v, f"{name}.{k}") for k, v in p.items()}

    def named_parameters(self):
        for k, v in self.params.items():
            yield f"{self.name}.{k}", v

    def _down(self, x: Tensor, tag: str, grid, strides: Strides) -> Tensor:
        if strides == (1, 1, 1):
            return x
        if grid is None:
            raise ShapeError(f"{self.name}: down-sampling needs a token grid")
        return T.strided_downsample(x, grid, strides, "conv",
                                    self.params[f"pool_{tag}.kernel"], self.params[f"pool_{tag}.bias"])

    def norm1(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params["norm1.gamma"], self.params["norm1.beta"])

    def project(self, x: Tensor, grid=None) -> tuple[Tensor, Tensor, Tensor]:
        """Queries, keys and values of ``x`` attending to itself."""
        h = self.norm1(x)
        q = self._down(T.matmul(h, self.params["wq"]), "q", grid, self.cfg.q_strides)
        k, v = self._kv_from_normed(h, grid)
        return q, k, v

    def queries(self, x: Tensor, grid=None) -> Tensor:
        return self._down(T.matmul(self.norm1(x), self.params["wq"]), "q", grid, self.cfg.q_strides)

    def keys_values(self, x: Tensor, grid=None) -> tuple[Tensor, Tensor]:
        return self._kv_from_normed(self.norm1(x), grid)

    def _kv_from_normed(self, h: Tensor, grid) -> tuple[Tensor, Tensor]:
        k = self._down(T.matmul(h, self.params["wk"]), "k", grid, self.cfg.kv_strides)
        v = self._down(T.matmul(h, self.params["wv"]), "v", grid, self.cfg.kv_strides)
        return k, v

    def finish(self, x: Tensor, attended: Tensor, grid=None) -> Tensor:
        """Pooled residual followed by the pre-norm MLP."""
        if self.cfg.q_strides != (1, 1, 1):
            x = T.strided_downsample(x, grid, self.cfg.q_strides, "pool")
        mixed = T.add(attended, x)
        p = self.params
        h = T.layer_norm(mixed, p["norm2.gamma"], p["norm2.beta"])
        h = T.gelu(T.add(T.matmul(h, p["mlp.w1"]), p["mlp.b1"]))
        h = T.add(T.matmul(h, p["mlp.w2"]), p["mlp.b2"])
        return T.add(mixed, h)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.cfg.d_model)


QueryRun = tuple[int, Tensor]
KeyRun = tuple[int, Tensor, Tensor]


def grouped_attention(
    query_runs: Sequence[QueryRun],
    key_runs: Sequence[KeyRun],
    scale: float,
    label: str = "",
    counter: PairCounter | None = None,
    dump: list | None = None,
) -> list[Tensor]:
    """Softmax attention between runs of rows tagged with chunk indices.

    Every query run is scored against every key run (dense, as a masked
    implementation would); only key runs whose chunk is ``<=`` the query run's
    chunk enter the softmax. Returns one attended tensor per query run. When
    ``dump`` is a list, ``(label, weights)`` of the last query run is appended.
    """
    outs = []
    n_keys = sum(k.shape[0] for _, k, _ in key_runs)
    key_t = [T.transpose(k) for _, k, _ in key_runs]
    for qi, (qc, q) in enumerate(query_runs):
        scores = [T.matmul(q, kt) for kt in key_t]
        if counter is not None:
            counter.add(label, q.shape[0] * n_keys)
        adm = [i for i, (kc, _, _) in enumerate(key_runs) if kc <= qc]
        if not adm:
            raise MaskError(f"{label or 'attention'}: query chunk {qc} has no admissible key")
        s = T.scale(T.concat([scores[i] for i in adm], axis=1), scale)
        w = T.softmax_rows(s)
        v = T.concat([key_runs[i][2] for i in adm], axis=0)
        outs.append(T.matmul(w, v))
        if dump is not None and qi == len(query_runs) - 1:
            dump.append((label, w.data))
    return outs


def _runs(chunks: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal runs of equal chunk index as ``(chunk, start, stop)``."""
    out = []
    start = 0
    for i in range(1, len(chunks) + 1):
        if i == len(chunks) or chunks[i] != chunks[start]:
            out.append((int(chunks[start]), start, i))
            start = i
    return out


def attention_block(
    block: AttentionBlock,
    x_query: Tensor,
    x_kv: Tensor | None = None,
    mask: ChunkMask | None = None,
    q_grid=None,
    kv_grid=None,
    counter: PairCounter | None = None,
    dump: list | None = None,
) -> Tensor:
    """Apply ``block`` with queries from ``x_query`` and keys/values from ``x_kv``.

    ``x_kv=None`` means self-attention. Grids are ``(t, h, w)`` layouts of the
    token rows and are required only when the block down-samples.
    """
    cfg = block.cfg
    d = cfg.d_model
    self_attn = x_kv is None
    if self_attn:
        x_kv, kv_grid = x_query, q_grid
    if x_query.ndim != 2 or x_query.shape[1] != d or x_kv.ndim != 2 or x_kv.shape[1] != d:
        raise ShapeError(f"{block.name}: expected (*, {d}) tokens, got {x_query.shape} / {x_kv.shape}")

    if mask is None:
        if self_attn:
            q, k, v = block.project(x_query, q_grid)
        else:
            q = block.queries(x_query, q_grid)
            k, v = block.keys_values(x_kv, kv_grid)
        (att,) = grouped_attention([(0, q)], [(0, k, v)], block.scale, block.name, counter, dump)
        return block.finish(x_query, att, q_grid)

    if cfg.downsamples:
        raise ShapeError(f"{block.name}: masked attention does not support down-sampling")
    if len(mask.query_chunks) != x_query.shape[0] or len(mask.key_chunks) != x_kv.shape[0]:
        raise ShapeError(f"{block.name}: mask does not cover both token sequences")
    q_runs_idx = _runs(mask.query_chunks)
    k_runs_idx = _runs(mask.key_chunks)
    q_rows = [(c, T.take_rows(x_query, slice(a, b))) for c, a, b in q_runs_idx]
    key_runs = []
    for c, a, b in k_runs_idx:
        k, v = block.keys_values(T.take_rows(x_kv, slice(a, b)))
        key_runs.append((c, k, v))
    query_runs = [(c, block.queries(x)) for c, x in q_rows]
    atts = grouped_attention(query_runs, key_runs, block.scale, block.name, counter, dump)
    return T.concat([block.finish(x, a) for (_, x), a in zip(q_rows, atts)], axis=0)
