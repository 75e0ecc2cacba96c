"""Per-chunk spatial encoding and the ring cache that reuses its results."""

from __future__ import annotations

from collections import deque
from typing import Sequence

from .attention import AttentionBlock, PairCounter, attention_block
from .chunking import ChunkTokens


class OrderingError(ValueError):
    """A chunk arrived out of stream order."""


class SpatialEncoder:
    """``L_SB`` self-attention blocks confined to one chunk's tokens.

    ``calls`` counts chunks encoded; each chunk of a stream must be encoded once.
    """

    def __init__(self, blocks: Sequence[AttentionBlock]):
        self.blocks = list(blocks)
        self.calls = 0

    def named_parameters(self):
        for b in self.blocks:
            yield from b.named_parameters()

    def __call__(self, chunk: ChunkTokens, counter: PairCounter | None = None) -> ChunkTokens:
        return spatial_encode(chunk, self, counter)


def spatial_encode(chunk: ChunkTokens, encoder: SpatialEncoder,
                   counter: PairCounter | None = None) -> ChunkTokens:
    encoder.calls += 1
    x = chunk.tokens
    for block in encoder.blocks:
        x = attention_block(block, x, counter=counter)
    return ChunkTokens(chunk.chunk_index, x)


class StreamBuffer:
    """Ring of the newest ``capacity`` encoded chunks with consecutive indices."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque[ChunkTokens] = deque(maxlen=capacity)
        self.newest_index: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def indices(self) -> list[int]:
        return [e.chunk_index for e in self.entries]

    def push(self, encoded: ChunkTokens) -> "StreamBuffer":
        expected = 0 if self.newest_index is None else self.newest_index + 1
        if self.newest_index is not None and encoded.chunk_index != expected:
            raise OrderingError(f"expected chunk {expected}, got {encoded.chunk_index}")
        self.entries.append(encoded)
        self.newest_index = encoded.chunk_index
        return self

    def window_short(self, t_short: int) -> list[ChunkTokens]:
        n = min(t_short, len(self.entries))
        return list(self.entries)[len(self.entries) - n:]

    def window_long(self, t_short: int, t_long: int) -> list[ChunkTokens]:
        avail = len(self.entries) - t_short
        n = min(t_long, max(avail, 0))
        if n == 0:
            return []
        return list(self.entries)[avail - n:avail]
