"""``key = value`` run configuration files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .chunking import ChunkConfig
from .model import ModelConfig
from .streams import StreamsConfig
from .training import SynthTaskConfig, TrainConfig


class ConfigFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


SHARED = {"tau", "frame_height", "frame_width", "num_classes", "seed"}
TASK_ONLY = {"cue_distance_chunks", "action_len_chunks", "noise_std", "stream_len_chunks",
             "event_rate", "slot_len", "action_marker", "cue_size"}
EXTRA = {"lc_refresh_interval": 1, "val_stream_len_chunks": 320, "bench_t_short_list": (8, 16, 32),
         "bench_stream_chunks": 0}


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


_CHUNK = _fields(ChunkConfig)
_STREAMS = _fields(StreamsConfig)
_TRAIN = _fields(TrainConfig)
_TASK = _fields(SynthTaskConfig)
_MODEL = {"l_sb", "long_branch"}
KNOWN = set(_CHUNK) | set(_STREAMS) | set(_TRAIN) | (set(_TASK) & (TASK_ONLY | SHARED)) | _MODEL | set(EXTRA)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extra: dict = field(default_factory=lambda: dict(EXTRA))

    def with_seed(self, seed: int) -> "RunConfig":
        return build({**self.as_flat(), "seed": seed})

    def as_flat(self) -> dict:
        out = dict(self.model.flat())
        out.update({k: v for k, v in dataclasses.asdict(self.train).items()})
        out.update({k: v for k, v in dataclasses.asdict(self.task).items() if k in TASK_ONLY})
        out.update(self.extra)
        out["seed"] = self.model.seed
        return out

    def val_task(self) -> SynthTaskConfig:
        return replace(self.task, seed=self.task.seed + 1, stream_len_chunks=self.extra["val_stream_len_chunks"])


def _convert(raw: str, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def _default(name: str):
    for table, cls in ((_CHUNK, ChunkConfig), (_STREAMS, StreamsConfig), (_TRAIN, TrainConfig),
                       (_TASK, SynthTaskConfig)):
        if name in table:
            return getattr(cls(), name)
    if name == "l_sb":
        return 2
    if name == "long_branch":
        return True
    return EXTRA[name]


def parse_text(text: str) -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigFileError(f"expected 'key = value', got {body!r}", lineno)
        key, raw = (p.strip() for p in body.split("=", 1))
        if key not in KNOWN:
            raise ConfigFileError(f"unknown key {key!r}", lineno)
        try:
            values[key] = _convert(raw, _default(key))
        except ValueError as exc:
            raise ConfigFileError(f"bad value for {key!r}: {exc}", lineno) from None
    return values


def build(values: dict) -> RunConfig:
    seed = int(values.get("seed", 0))
    pick = lambda table: {k: values[k] for k in table if k in values and k != "seed"}  # noqa: E731
    try:
        chunk = ChunkConfig(**pick(_CHUNK))
        streams = StreamsConfig(**pick(_STREAMS))
        model = ModelConfig(chunk, streams, l_sb=int(values.get("l_sb", 2)),
                            long_branch=bool(values.get("long_branch", True)), seed=seed)
        task_kw = {k: values[k] for k in TASK_ONLY if k in values}
        task = SynthTaskConfig(num_classes=streams.num_classes, tau=chunk.tau,
                               frame_height=chunk.frame_height, frame_width=chunk.frame_width,
                               seed=seed, **task_kw)
        train = TrainConfig(**{**pick(_TRAIN), "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc)) from None
    extra = dict(EXTRA)
    extra.update({k: values[k] for k in EXTRA if k in values})
    return RunConfig(model, task, train, extra)


def load_config(path=None, seed: int | None = None) -> RunConfig:
    values = parse_text(Path(path).read_text(encoding="utf-8")) if path else {}
    if seed is not None:
        values["seed"] = seed
    return build(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in sorted(cfg.as_flat().items()):
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
