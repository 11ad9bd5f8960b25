"""Per-frame detection metrics: AP, mAP, PR curves and compute-savings counts.

Frames are ranked by descending score; ties keep their original order
(stable sort), so results do not depend on the platform's sort.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pcnet.errors import DimensionError, ValidationError


def _ranked(scores, labels) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    order = np.argsort(-s, kind="stable")
    return y[order].astype(np.float64)


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean of precision@k over the ranks k that hold a positive."""
    hits = _ranked(scores, labels)
    npos = hits.sum()
    if npos == 0:
        raise ValidationError("average precision is undefined without positive labels")
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision @ hits / npos)


def pr_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each rank position (recall is non-decreasing)."""
    hits = _ranked(scores, labels)
    npos = hits.sum()
    if npos == 0:
        raise ValidationError("PR curve is undefined without positive labels")
    tp = np.cumsum(hits)
    return tp / npos, tp / np.arange(1, hits.size + 1)


@dataclass
class MetricsReport:
    per_class_ap: list[tuple[int, float | None]]
    mean_ap: float
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    frames_processed: int = 0
    frames_skipped: int = 0
    frames_reinitialized: int = 0
    corr_raw: float | None = None
    corr_diff: float | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def skipped_classes(self) -> list[int]:
        return [c for c, ap in self.per_class_ap if ap is None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "ap"])
        for c, ap in self.per_class_ap:
            w.writerow([c, "skipped" if ap is None else repr(ap)])
        w.writerow(["mean", repr(self.mean_ap)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def write_pr_curves(self, directory: str | Path) -> list[Path]:
        out = []
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for c, (rec, prec) in sorted(self.pr_curves.items()):
            p = directory / f"pr_class{c:03d}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["recall", "precision"])
                w.writerows(zip(map(repr, rec.tolist()), map(repr, prec.tolist())))
            out.append(p)
        return out

    def to_text(self) -> str:
        lines = [f"mean_ap = {self.mean_ap!r}"]
        lines += [f"ap[{c}] = {'skipped (no positives)' if ap is None else repr(ap)}" for c, ap in self.per_class_ap]
        total = self.frames_processed + self.frames_skipped
        if total:
            lines.append(f"frames_processed = {self.frames_processed}")
            lines.append(f"frames_skipped = {self.frames_skipped}")
            lines.append(f"frames_reinitialized = {self.frames_reinitialized}")
        if self.corr_raw is not None:
            lines.append(f"corr_raw = {self.corr_raw!r}")
            lines.append(f"corr_diff = {self.corr_diff!r}")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def mean_ap(predictions, labels, with_curves: bool = False) -> MetricsReport:
    """Per-class AP over all frames; mAP averages the classes that have positives.

    Inputs are T×a or N×T×a (sequences are pooled).
    """
    P = np.asarray(predictions, dtype=np.float64)
    Y = np.asarray(labels)
    if P.shape != Y.shape:
        raise DimensionError(f"predictions {P.shape} and labels {Y.shape} differ")
    if P.ndim < 2:
        raise DimensionError(f"predictions must be T×a, got {P.shape}")
    a = P.shape[-1]
    P = P.reshape(-1, a)
    Y = Y.reshape(-1, a)
    per_class: list[tuple[int, float | None]] = []
    curves = {}
    for c in range(a):
        if not Y[:, c].any():
            per_class.append((c, None))
            continue
        per_class.append((c, average_precision(P[:, c], Y[:, c])))
        if with_curves:
            curves[c] = pr_curve(P[:, c], Y[:, c])
    aps = [ap for _, ap in per_class if ap is not None]
    if not aps:
        raise ValidationError("no class has a positive frame; mAP is undefined")
    report = MetricsReport(per_class, float(np.mean(aps)), curves)
    if len(aps) < a:
        report.notes.append(f"{a - len(aps)} class(es) without positives excluded from mAP")
    return report


def compute_savings(action_log) -> tuple[float, float]:
    """Fractions of frames (after each stream's first) that were skipped / reinitialized.

    Accepts one per-frame action list or a list of them.
    """
    logs = [action_log] if action_log and isinstance(action_log[0], str) else list(action_log)
    tail = [a for log in logs for a in log[1:]]
    if not logs or not any(logs):
        raise ValidationError("action log is empty")
    if not tail:
        return 0.0, 0.0
    n = len(tail)
    return tail.count("skipped") / n, tail.count("reinitialized") / n


def savings_counts(action_log) -> tuple[int, int, int]:
    """(processed, skipped, reinitialized) frame counts over all frames."""
    logs = [action_log] if action_log and isinstance(action_log[0], str) else list(action_log)
    flat = [a for log in logs for a in log]
    skipped = flat.count("skipped")
    return len(flat) - skipped, skipped, flat.count("reinitialized")
