"""Per-chunk average precision, calibrated AP and latency summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """The metric is undefined for the given labels."""


def _ranked(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    order = np.argsort(-scores, kind="stable")  # ties: earlier index first
    return scores[order], labels[order]


def average_precision(scores, labels) -> float:
    """Mean over positives of the precision at each positive's rank."""
    _, lab = _ranked(scores, labels)
    n_pos = int(lab.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positives")
    tp = np.cumsum(lab)
    ranks = np.arange(1, len(lab) + 1)
    return float(np.sum(tp[lab] / ranks[lab]) / n_pos)


def calibrated_ap(scores, labels) -> float:
    """AP with calibrated precision ``TP / (TP + FP / w)``, ``w = negatives / positives``."""
    _, lab = _ranked(scores, labels)
    n_pos = int(lab.sum())
    n_neg = len(lab) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("calibrated AP needs at least one positive and one negative")
    w = n_neg / n_pos
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    cprec = tp / (tp + fp / w)
    return float(np.sum(cprec[lab]) / n_pos)


def per_class_ap(probs: np.ndarray, labels: np.ndarray, calibrated: bool = False,
                 background: int | None = 0) -> dict[int, float]:
    """AP of each class with at least one positive, skipping ``background``."""
    fn = calibrated_ap if calibrated else average_precision
    target = labels.argmax(axis=1) if labels.ndim == 2 else np.asarray(labels)
    out = {}
    for c in range(probs.shape[1]):
        if c == background:
            continue
        pos = target == c
        if not pos.any() or (calibrated and pos.all()):
            continue
        out[c] = fn(probs[:, c], pos)
    return out


def mean_ap(probs, labels, calibrated: bool = False, background: int | None = 0) -> float:
    aps = per_class_ap(np.asarray(probs), np.asarray(labels), calibrated, background)
    if not aps:
        raise MetricError("no class has positives")
    return float(np.mean(list(aps.values())))


def chance_map(labels, num_classes: int, background: int | None = 0) -> float:
    """Expected mAP of random scores: mean positive rate of the scored classes."""
    target = np.asarray(labels).argmax(axis=1) if np.ndim(labels) == 2 else np.asarray(labels)
    rates = [np.mean(target == c) for c in range(num_classes) if c != background and (target == c).any()]
    return float(np.mean(rates))


def accuracy(probs, labels) -> float:
    target = np.asarray(labels).argmax(axis=1) if np.ndim(labels) == 2 else np.asarray(labels)
    return float(np.mean(np.asarray(probs).argmax(axis=1) == target))


@dataclass
class MetricReport:
    per_class_ap: dict[int, float] = field(default_factory=dict)
    map: float = float("nan")
    mcap: float = float("nan")
    accuracy: float = float("nan")
    mean_ns: float = float("nan")
    p50_ns: float = float("nan")
    p95_ns: float = float("nan")

    @property
    def steps_per_sec(self) -> float:
        return 1e9 / self.mean_ns

    @classmethod
    def build(cls, probs, labels, latencies_ns=(), warmup: int = 0) -> "MetricReport":
        probs = np.asarray(probs)
        labels = np.asarray(labels)
        rep = cls(per_class_ap=per_class_ap(probs, labels))
        if rep.per_class_ap:
            rep.map = float(np.mean(list(rep.per_class_ap.values())))
        cal = per_class_ap(probs, labels, calibrated=True)
        if cal:
            rep.mcap = float(np.mean(list(cal.values())))
        rep.accuracy = accuracy(probs, labels)
        lat = np.asarray(latencies_ns, dtype=np.float64)[warmup:]
        if lat.size:
            rep.mean_ns, rep.p50_ns, rep.p95_ns = latency_stats(lat)
        return rep


def latency_stats(latencies_ns) -> tuple[float, float, float]:
    lat = np.asarray(latencies_ns, dtype=np.float64)
    return float(lat.mean()), float(np.percentile(lat, 50)), float(np.percentile(lat, 95))
