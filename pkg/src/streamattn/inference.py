"""Streaming engines: regular (window recompute) and efficient (per-layer reuse)."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .attention import KeyRun, PairCounter
from .buffer import OrderingError, StreamBuffer
from .model import ConfigError, Model, ModelConfig
from .streams import (
    CompressedMemory,
    FusionContext,
    classify,
    head_logits,
    long_term_compress,
    short_term_forward,
    sm_layer,
)
from .tensor import Tensor, no_grad

MODES = ("regular", "efficient")

# preset -> (long branch enabled, stepping mode)
PRESETS = {
    "baseline": (False, "regular"),
    "baseline+lc": (True, "regular"),
    "baseline+ei": (False, "efficient"),
    "full": (True, "efficient"),
}


@dataclass
class StepOutput:
    chunk_index: int
    probabilities: np.ndarray
    latency_ns: int
    attention_dump: list[tuple[str, np.ndarray]] | None = None
    pair_counts: dict[str, int] = field(default_factory=dict)


class LayerCache:
    """Per short-term layer: key/value runs and outputs of the newest ``size`` chunks."""

    def __init__(self, n_layers: int, size: int):
        self.size = size
        self.kv: list[deque[KeyRun]] = [deque() for _ in range(n_layers)]
        self.outputs: list[deque[tuple[int, Tensor]]] = [deque() for _ in range(n_layers)]
        self.computed = [0] * n_layers  # chunks computed per layer
        self.last_index = [-1] * n_layers

    def append(self, layer: int, run: KeyRun, output: tuple[int, Tensor]) -> None:
        if run[0] <= self.last_index[layer]:
            raise RuntimeError(f"chunk {run[0]} recomputed at layer {layer}")
        self.last_index[layer] = run[0]
        self.computed[layer] += 1
        if self.size == 0:
            return
        self.kv[layer].append(run)
        self.outputs[layer].append(output)
        while len(self.kv[layer]) > self.size:
            self.kv[layer].popleft()
            self.outputs[layer].popleft()


class Engine:
    """One stream, processed strictly in order."""

    def __init__(
        self,
        model: Model,
        mode: str = "regular",
        lc_refresh_interval: int = 1,
        long_branch: bool | None = None,
        t_long: int | None = None,
        t_short: int | None = None,
        dump_attention: bool = False,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if lc_refresh_interval < 1:
            raise ValueError("lc_refresh_interval must be positive")
        self.model = model
        self.mode = mode
        self.lc_refresh_interval = lc_refresh_interval
        self.long_branch = model.cfg.long_branch if long_branch is None else long_branch
        s = model.cfg.streams
        self.t_short = s.t_short if t_short is None else t_short
        self.t_long = s.t_long if t_long is None else t_long
        if self.long_branch and s.fusion_op == "cross_attention" and model.fusion is None:
            raise ConfigError("cross-attention fusion needs fusion weights")
        self.dump_attention = dump_attention
        self.buffer = StreamBuffer(self.t_short + self.t_long)
        self.cache = LayerCache(s.l_sm, self.t_short - 1)
        self.counter = PairCounter()
        self.memory: CompressedMemory | None = None
        self.steps = 0
        self._spatial_base = model.spatial.calls

    @property
    def spatial_calls(self) -> int:
        """Chunks this engine has run through the spatial encoder."""
        return self.model.spatial.calls - self._spatial_base

    def _refresh_memory(self) -> None:
        if not self.long_branch:
            self.memory = None
            return
        if self.steps % self.lc_refresh_interval == 0 or self.memory is None:
            window = self.buffer.window_long(self.t_short, self.t_long)
            self.memory = long_term_compress(window, self.model, self.counter)

    def step(self, chunk_frames: np.ndarray, chunk_index: int | None = None) -> StepOutput:
        if chunk_index is None:
            chunk_index = 0 if self.buffer.newest_index is None else self.buffer.newest_index + 1
        if self.buffer.newest_index is not None and chunk_index != self.buffer.newest_index + 1:
            raise OrderingError(f"expected chunk {self.buffer.newest_index + 1}, got {chunk_index}")
        self.counter.reset()
        dump: list | None = [] if self.dump_attention else None
        start = time.perf_counter_ns()
        with no_grad():
            encoded = self.model.spatial(self.model.embed(chunk_frames, chunk_index), self.counter)
            self.buffer.push(encoded)
            self._refresh_memory()
            fusion = FusionContext(self.model, self.memory)
            if self.mode == "regular":
                window = self.buffer.window_short(self.t_short)
                _, logits = short_term_forward(window, self.memory, self.model, self.counter, dump, fusion)
                last = logits.data[-1]
            else:
                last = self._efficient(encoded.chunk_index, encoded.tokens, fusion, dump)
            probs = classify(last)
        elapsed = time.perf_counter_ns() - start
        self.steps += 1
        return StepOutput(chunk_index, probs, elapsed, dump, dict(self.counter.counts))

    def _efficient(self, idx: int, x: Tensor, fusion: FusionContext, dump) -> np.ndarray:
        for layer in range(self.model.cfg.streams.l_sm):
            prior = list(self.cache.kv[layer])
            outs, runs = sm_layer(self.model, layer, [(idx, x)], prior, fusion, self.counter, dump)
            self.cache.append(layer, runs[0], outs[0])
            x = outs[0][1]
        return head_logits(self.model, x).data[0]

    def run(self, frames: np.ndarray) -> list[StepOutput]:
        """Step through ``frames`` shaped ``(n_chunks, tau, H, W, 3)``."""
        return [self.step(f) for f in frames]


def step_regular(engine: Engine, chunk_frames: np.ndarray) -> StepOutput:
    if engine.mode != "regular":
        raise ValueError("engine is not in regular mode")
    return engine.step(chunk_frames)


def step_efficient(engine: Engine, chunk_frames: np.ndarray) -> StepOutput:
    if engine.mode != "efficient":
        raise ValueError("engine is not in efficient mode")
    return engine.step(chunk_frames)


def make_engine(
    cfg: ModelConfig,
    weights: dict[str, np.ndarray] | Model | None = None,
    mode: str | None = None,
    lc_refresh_interval: int = 1,
    preset: str | None = None,
    **kw,
) -> Engine:
    """Build an engine with an empty buffer and caches.

    ``preset`` selects one of the ablation rows (``baseline``, ``baseline+lc``,
    ``baseline+ei``, ``full``): it fixes the long branch and supplies the mode
    unless ``mode`` is given explicitly.
    """
    if isinstance(weights, Model):
        model = weights
    else:
        model = Model(cfg)
        if weights is not None:
            model.load_state_dict(weights)
    long_branch = kw.pop("long_branch", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        long_branch, preset_mode = PRESETS[preset]
        mode = mode or preset_mode
    return Engine(model, mode or "regular", lc_refresh_interval, long_branch=long_branch, **kw)
