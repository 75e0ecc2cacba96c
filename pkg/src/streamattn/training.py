"""Synthetic long-cue streams, the short-window cross-entropy and an SGD loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .inference import make_engine
from .metrics import MetricError, accuracy, mean_ap
from .model import ConfigError, Model
from .streams import long_term_compress, short_term_forward
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

# RGB of each class cue; class 0 is background and has none
_PALETTE = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.2, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.1, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.2],
])


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthTaskConfig:
    """Streams in which a colored cue at chunk ``i`` announces an action at ``i + d``.

    Each slot of ``slot_len`` chunks holds an event with probability
    ``event_rate``; the event's class is uniform over the non-background
    classes. During the labeled span a class-agnostic marker is drawn, so a
    model blind to the cue can still tell action from background.
    """

    num_classes: int = 4
    cue_distance_chunks: int = 10
    action_len_chunks: int = 4
    noise_std: float = 0.05
    stream_len_chunks: int = 400
    seed: int = 0
    event_rate: float = 0.8
    slot_len: int = 0  # 0: cue_distance + action_len + 2
    action_marker: bool = True
    tau: int = 4
    frame_height: int = 32
    frame_width: int = 32
    cue_size: int = 8

    def __post_init__(self):
        if self.cue_distance_chunks < 0 or self.action_len_chunks < 1:
            raise ConfigError("need cue_distance_chunks >= 0 and action_len_chunks >= 1")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigError(f"num_classes must be in 2..{len(_PALETTE)}")
        if not 0.0 <= self.event_rate <= 1.0:
            raise ConfigError("event_rate must be within [0, 1]")
        if self.slot_length < self.cue_distance_chunks + self.action_len_chunks:
            raise ConfigError("slot_len is shorter than one event")

    @property
    def slot_length(self) -> int:
        return self.slot_len or self.cue_distance_chunks + self.action_len_chunks + 2

    @property
    def n_slots(self) -> int:
        return self.stream_len_chunks // self.slot_length


@dataclass
class SynthStream:
    frames: np.ndarray  # (N, tau, H, W, 3) in [0, 1]
    labels: np.ndarray  # (N, C) one-hot
    events: list[tuple[int, int]]  # (cue chunk, class)

    @property
    def n_chunks(self) -> int:
        return self.frames.shape[0]


def generate_stream(cfg: SynthTaskConfig) -> SynthStream:
    d, k = cfg.cue_distance_chunks, cfg.action_len_chunks
    if cfg.stream_len_chunks < d + k or cfg.n_slots == 0:
        raise ConfigError(f"stream of {cfg.stream_len_chunks} chunks is too short for an event")
    rng = Rng(cfg.seed)
    n, c = cfg.stream_len_chunks, cfg.num_classes
    frames = np.full((n, cfg.tau, cfg.frame_height, cfg.frame_width, 3), 0.3)
    target = np.zeros(n, dtype=np.int64)
    events = []
    for slot in range(cfg.n_slots):
        if rng.random() >= cfg.event_rate:
            continue
        cls = int(rng.integers(1, c))
        cue = slot * cfg.slot_length
        events.append((cue, cls))
        frames[cue, :, :cfg.cue_size, :cfg.cue_size, :] = _PALETTE[cls]
        target[cue + d:cue + d + k] = cls
    if cfg.action_marker:
        s = cfg.cue_size
        frames[target > 0, :, -s:, -s:, :] = 1.0
    if cfg.noise_std > 0:
        frames = frames + rng.normal(frames.shape, cfg.noise_std)
    frames = np.clip(frames, 0.0, 1.0)
    labels = np.eye(c)[target]
    return SynthStream(frames, labels, events)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed cross-entropy over rows: ``-sum_i sum_j y_ij log softmax(z_i)_j``."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    ok = np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not ok:
        raise ValueError("every label row must be one-hot")
    return T.scale(T.sum_all(T.mul(T.log_softmax_rows(logits), Tensor(labels))), -1.0)


loss = cross_entropy


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 1
    steps_per_epoch: int = 100
    batch_size: int = 4
    train_t_long: int = 16
    eval_t_long_list: tuple[int, ...] = (16,)
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        object.__setattr__(self, "eval_t_long_list", tuple(int(v) for v in self.eval_t_long_list))


def forward_window(model: Model, frames: np.ndarray, first_index: int, t_short: int,
                   t_long: int, long_branch: bool) -> Tensor:
    """Regular-inference forward over one training window; logits ``(T_S, C)``.

    ``frames`` holds the window's chunks oldest first; the newest ``t_short``
    form the short window and up to ``t_long`` before them the long window.
    """
    n = frames.shape[0]
    if n < t_short:
        raise ValueError(f"window of {n} chunks is shorter than t_short={t_short}")
    encoded = [model.spatial(model.embed(f, first_index + i)) for i, f in enumerate(frames)]
    short = encoded[n - t_short:]
    memory = None
    if long_branch:
        long = encoded[max(0, n - t_short - t_long):n - t_short]
        memory = long_term_compress(long, model) if long else None
    _, logits = short_term_forward(short, memory, model)
    return logits


class SGD:
    """SGD with momentum: ``v = mu * v + g``; ``p -= lr * v``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, grad_clip: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        if self.grad_clip > 0:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.velocity[i] = self.momentum * self.velocity[i] + g
            new = p.data - self.lr * self.velocity[i]
            new.flags.writeable = False
            p.data = new


def train_step(model: Model, opt: SGD, windows: Sequence[tuple[np.ndarray, int, np.ndarray]],
               t_long: int, long_branch: bool) -> float:
    """One update on a batch of ``(frames, first_index, short_labels)`` windows.

    Each window's loss is the summed cross-entropy over its short window; the
    batch loss is their mean. Returns the pre-update loss.
    """
    t_short = model.cfg.streams.t_short
    model.zero_grad()
    total = None
    for frames, first, labels in windows:
        logits = forward_window(model, frames, first, t_short, t_long, long_branch)
        term = cross_entropy(logits, labels)
        total = term if total is None else T.add(total, term)
    total = T.scale(total, 1.0 / len(windows))
    value = float(total.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at learning rate {opt.lr}")
    T.backward(total)
    opt.step()
    return value


def sample_windows(stream: "SynthStream", rng: Rng, count: int, t_short: int,
                   t_long: int) -> list[tuple[np.ndarray, int, np.ndarray]]:
    span = t_short + t_long
    out = []
    for _ in range(count):
        end = int(rng.integers(span - 1, stream.n_chunks))
        first = end - span + 1
        out.append((stream.frames[first:end + 1], first, stream.labels[end - t_short + 1:end + 1]))
    return out


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)


def train(model: Model, stream: SynthStream, opt_cfg: TrainConfig, long_branch: bool | None = None,
          validation: SynthStream | None = None, val_mode: str = "regular",
          on_epoch: Callable[[int, Model], None] | None = None) -> TrainResult:
    """Deterministic SGD on windows drawn from ``stream``."""
    long_branch = model.cfg.long_branch if long_branch is None else long_branch
    t_short = model.cfg.streams.t_short
    t_long = opt_cfg.train_t_long if long_branch else 0
    rng = Rng(opt_cfg.seed)
    opt = SGD(model.parameters(), opt_cfg.learning_rate, opt_cfg.momentum, opt_cfg.grad_clip)
    result = TrainResult()
    for epoch in range(opt_cfg.epochs):
        for _ in range(opt_cfg.steps_per_epoch):
            batch = sample_windows(stream, rng, opt_cfg.batch_size, t_short, opt_cfg.train_t_long)
            result.losses.append(train_step(model, opt, batch, t_long, long_branch))
        recent = result.losses[-opt_cfg.steps_per_epoch:]
        log.info("epoch %d mean loss %.4f", epoch, float(np.mean(recent)))
        if validation is not None:
            m = evaluate(model, validation, opt_cfg.train_t_long, val_mode, long_branch)
            m["epoch"] = epoch
            result.validation.append(m)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return result


def predict_stream(model: Model, frames: np.ndarray, t_long: int, mode: str = "regular",
                   long_branch: bool | None = None) -> np.ndarray:
    long_branch = model.cfg.long_branch if long_branch is None else long_branch
    engine = make_engine(model.cfg, model, mode=mode, long_branch=long_branch, t_long=t_long)
    return np.stack([o.probabilities for o in engine.run(frames)])


def evaluate(model: Model, stream: SynthStream, t_long: int, mode: str = "regular",
             long_branch: bool | None = None) -> dict:
    probs = predict_stream(model, stream.frames, t_long, mode, long_branch)
    try:
        m = mean_ap(probs, stream.labels)
    except MetricError:
        m = float("nan")
    return {"t_long": t_long, "mode": mode, "accuracy": accuracy(probs, stream.labels), "map": m}


def evaluate_lengths(model: Model, stream: SynthStream, t_long_list: Sequence[int],
                     mode: str = "regular", long_branch: bool | None = None) -> list[dict]:
    """Stream the same weights with each long-window length; one row per length."""
    return [evaluate(model, stream, t, mode, long_branch) for t in t_long_list]
