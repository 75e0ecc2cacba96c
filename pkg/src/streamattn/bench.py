"""Latency and attention-pair sweeps over stepping modes and short-window lengths."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .inference import make_engine
from .metrics import latency_stats
from .model import Model

BENCH_COLUMNS = ("mode", "T_S", "mean_ns", "p95_ns", "steps_per_sec", "pair_count")


@dataclass
class BenchRow:
    mode: str
    T_S: int
    mean_ns: float
    p95_ns: float
    steps_per_sec: float
    pair_count: int


def unfused_layer(model: Model) -> str:
    """Label of a short-term layer whose key set never includes memory tokens."""
    s = model.cfg.streams
    for i in range(s.l_sm):
        if s.fusion_op == "cross_attention" or i != s.fusion_layer - 1:
            return f"sm.{i}"
    raise ValueError("every short-term layer is fused")


def bench_one(model: Model, mode: str, t_short: int, frames: np.ndarray,
              long_branch: bool = False, lc_refresh_interval: int = 1) -> BenchRow:
    if frames.shape[0] < 3 * t_short:
        raise ValueError(f"bench needs at least {3 * t_short} chunks for T_S={t_short}")
    engine = make_engine(model.cfg, model, mode=mode, t_short=t_short, long_branch=long_branch,
                         lc_refresh_interval=lc_refresh_interval)
    label = unfused_layer(model)
    with threadpool_limits(1):
        outs = engine.run(frames)
    lat = [o.latency_ns for o in outs[t_short:]]
    mean, _, p95 = latency_stats(lat)
    return BenchRow(mode, t_short, mean, p95, 1e9 / mean, outs[-1].pair_counts[label])


def bench(model: Model, modes: Sequence[str], t_short_list: Sequence[int], frames: np.ndarray,
          long_branch: bool = False, repeats: int = 1) -> list[BenchRow]:
    """One row per ``(mode, T_S)``; with ``repeats > 1`` the fastest run is kept."""
    rows = []
    for t_short in t_short_list:
        for mode in modes:
            runs = [bench_one(model, mode, t_short, frames, long_branch) for _ in range(repeats)]
            rows.append(min(runs, key=lambda r: r.mean_ns))
    return rows


def write_bench_csv(path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow(astuple(r))
