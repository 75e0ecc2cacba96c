"""Model configuration and the container holding every learned tensor."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionBlock, AttentionBlockConfig
from .buffer import SpatialEncoder
from .chunking import ChunkConfig, ChunkEmbedding
from .streams import StreamsConfig, lc_grids
from .tensor import Rng, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    streams: StreamsConfig = field(default_factory=StreamsConfig)
    l_sb: int = 2
    long_branch: bool = True
    seed: int = 0

    def __post_init__(self):
        s, c = self.streams, self.chunk
        if s.lc_spatial_factor and (c.n_h % s.lc_spatial_factor or c.n_w % s.lc_spatial_factor):
            raise ConfigError("lc_spatial_factor must divide the patch grid")

    @property
    def d_model(self) -> int:
        return self.chunk.d_model

    @property
    def phase_period(self) -> int:
        return 2 * self.streams.t_short

    def with_streams(self, **kw) -> "ModelConfig":
        return replace(self, streams=replace(self.streams, **kw))

    def with_chunk(self, **kw) -> "ModelConfig":
        return replace(self, chunk=replace(self.chunk, **kw))

    def flat(self) -> dict:
        out = {**asdict(self.chunk), **asdict(self.streams)}
        out.update(l_sb=self.l_sb, long_branch=self.long_branch, seed=self.seed)
        return out


def micro_config(seed: int = 0) -> ModelConfig:
    """Tiny geometry used for finite-difference checks."""
    return ModelConfig(
        chunk=ChunkConfig(tau=2, t_sample=1, frame_height=8, frame_width=8, patch_h=4, patch_w=4, d_model=16),
        streams=StreamsConfig(l_sm=2, l_lc=2, t_short=2, t_long=4, fusion_layer=1,
                              lc_temporal_factors=(2, 1), lc_spatial_factor=2, num_classes=3),
        l_sb=1,
        seed=seed,
    )


class Model:
    """All weights: embedding, spatial stack, short-term stack, compressor, fusion, head."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed)
        d = cfg.d_model
        s = cfg.streams
        self.embed = ChunkEmbedding(cfg.chunk, cfg.phase_period, rng)
        plain = AttentionBlockConfig(d)
        self.spatial = SpatialEncoder([AttentionBlock(f"spatial.{i}", plain, rng) for i in range(cfg.l_sb)])
        causal = AttentionBlockConfig(d, causal=True)
        self.sm = [AttentionBlock(f"sm.{i}", causal, rng) for i in range(s.l_sm)]
        self.lc = []
        for i, f in enumerate(s.lc_temporal_factors):
            sp = s.lc_spatial_factor if i == 0 else 1
            strides = (f, sp, sp)
            self.lc.append(AttentionBlock(f"lc.{i}", AttentionBlockConfig(d, strides, strides), rng))
        self.fusion = AttentionBlock("fusion", plain, rng) if s.fusion_op == "cross_attention" else None
        self.head = {
            "weight": T.parameter(rng.fan_in_uniform((d, s.num_classes), d), "head.weight"),
            "bias": T.parameter(np.zeros(s.num_classes), "head.bias"),
        }

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.embed.named_parameters()
        yield from self.spatial.named_parameters()
        for b in self.sm:
            yield from b.named_parameters()
        for b in self.lc:
            yield from b.named_parameters()
        if self.fusion is not None:
            yield from self.fusion.named_parameters()
        for k, v in self.head.items():
            yield f"head.{k}", v

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"weights do not match config: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: shape {arr.shape} does not match config shape {p.shape}")
            self._assign(p, arr)

    @staticmethod
    def _assign(p: Tensor, arr: np.ndarray) -> None:
        arr = np.array(arr, dtype=np.float64)
        arr.flags.writeable = False
        p.data = arr

    def compressed_grid(self, t_long: int) -> tuple[int, int, int]:
        c = self.cfg.chunk
        return lc_grids(t_long, c.n_h, c.n_w, self.cfg.streams)[-1]

    def spatial_parameter_names(self) -> list[str]:
        """Parameters upstream of the stream buffer (embedding + spatial stack)."""
        return [n for n, _ in self.named_parameters() if n.startswith(("embed.", "spatial."))]
