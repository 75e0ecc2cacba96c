"""Chunk embedding: frame sampling, 3D patch partition, projection, CLS token."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, ShapeError, Tensor


@dataclass(frozen=True)
class ChunkConfig:
    tau: int = 4
    t_sample: int = 2
    frame_height: int = 32
    frame_width: int = 32
    patch_h: int = 8
    patch_w: int = 8
    d_model: int = 64

    def __post_init__(self):
        if not 1 <= self.t_sample <= self.tau:
            raise ValueError(f"t_sample must be in 1..tau, got {self.t_sample} for tau={self.tau}")
        if self.frame_height % self.patch_h or self.frame_width % self.patch_w:
            raise ValueError("patch extents must divide the frame extents")

    @property
    def n_h(self) -> int:
        return self.frame_height // self.patch_h

    @property
    def n_w(self) -> int:
        return self.frame_width // self.patch_w

    @property
    def n_patches(self) -> int:
        return self.n_h * self.n_w

    @property
    def tokens_per_chunk(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.t_sample * self.patch_h * self.patch_w * 3


@dataclass(frozen=True)
class ChunkTokens:
    """Tokens of one chunk: ``n_patches`` patch rows followed by the CLS row."""

    chunk_index: int
    tokens: Tensor

    @property
    def patches(self) -> Tensor:
        return T.take_rows(self.tokens, slice(0, self.tokens.shape[0] - 1))

    @property
    def cls(self) -> Tensor:
        n = self.tokens.shape[0]
        return T.take_rows(self.tokens, slice(n - 1, n))


def sample_indices(tau: int, t: int) -> list[int]:
    return [(k * tau) // t for k in range(t)]


def sample_frames(chunk_frames: np.ndarray, cfg: ChunkConfig) -> np.ndarray:
    """Evenly pick ``t_sample`` of the chunk's ``tau`` frames."""
    frames = np.asarray(chunk_frames)
    expected = (cfg.tau, cfg.frame_height, cfg.frame_width, 3)
    if frames.shape != expected:
        raise ShapeError(f"chunk frames have shape {frames.shape}, expected {expected}")
    return frames[sample_indices(cfg.tau, cfg.t_sample)]


def patchify(sampled: np.ndarray, cfg: ChunkConfig) -> np.ndarray:
    """``(t, H, W, 3)`` -> ``(n_h*n_w, t*h*w*3)``, patches in row-major slot order."""
    t, h, w = cfg.t_sample, cfg.patch_h, cfg.patch_w
    x = sampled.reshape(t, cfg.n_h, h, cfg.n_w, w, 3)
    x = x.transpose(1, 3, 0, 2, 4, 5)
    return x.reshape(cfg.n_patches, t * h * w * 3)


class ChunkEmbedding:
    def __init__(self, cfg: ChunkConfig, phase_period: int, rng: Rng, name: str = "embed"):
        if phase_period < 1:
            raise ValueError("phase_period must be positive")
        self.cfg = cfg
        self.name = name
        d = cfg.d_model
        self.params = {
            "proj.weight": T.parameter(rng.fan_in_uniform((cfg.patch_dim, d), cfg.patch_dim)),
            "proj.bias": T.parameter(np.zeros(d)),
            "cls": T.parameter(rng.fan_in_uniform((d,), d)),
            "pos_spatial": T.parameter(rng.fan_in_uniform((cfg.n_patches, d), d)),
            "pos_phase": T.parameter(rng.fan_in_uniform((phase_period, d), d)),
        }

    @property
    def phase_period(self) -> int:
        return self.params["pos_phase"].shape[0]

    def named_parameters(self):
        for k, v in self.params.items():
            yield f"{self.name}.{k}", v

    def __call__(self, chunk_frames: np.ndarray, chunk_index: int) -> ChunkTokens:
        return embed_chunk(chunk_frames, chunk_index, self)


def embed_chunk(chunk_frames: np.ndarray, chunk_index: int, emb: ChunkEmbedding) -> ChunkTokens:
    if chunk_index < 0:
        raise ValueError("chunk_index must be nonnegative")
    cfg = emb.cfg
    p = emb.params
    patches = Tensor(patchify(sample_frames(chunk_frames, cfg), cfg))
    patch_tok = T.add(T.add(T.matmul(patches, p["proj.weight"]), p["proj.bias"]), p["pos_spatial"])
    cls = T.reshape(p["cls"], (1, cfg.d_model))
    tokens = T.concat([patch_tok, cls], axis=0)
    phase = T.take_rows(p["pos_phase"], slice(chunk_index % emb.phase_period, chunk_index % emb.phase_period + 1))
    return ChunkTokens(chunk_index, T.add(tokens, phase))
