"""Classification metrics, ROC AUC, and FGSM/PGD robustness evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .objectives import cross_entropy

REPORT_FIELDS = ("accuracy", "precision", "recall", "f1", "auc_roc", "n_samples", "degenerate_flags")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def n(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    @property
    def correct(self) -> int:
        return int(self.tp.sum())


def confusion(preds, truth, k: int) -> ConfusionCounts:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ValueError(f"preds and truth lengths differ: {preds.shape} vs {truth.shape}")
    for name, arr in (("preds", preds), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} contains labels outside [0, {k})")
    tp = np.array([np.sum((preds == c) & (truth == c)) for c in range(k)])
    fp = np.array([np.sum((preds == c) & (truth != c)) for c in range(k)])
    fn = np.array([np.sum((preds != c) & (truth == c)) for c in range(k)])
    tn = len(truth) - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc_roc: float
    n_samples: int
    degenerate_flags: list[str] = field(default_factory=list)
    per_class: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _ratio(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def _f1(p: float, r: float, flag: str, flags: list[str]) -> float:
    return _ratio(2 * p * r, p + r, flag, flags)


def auc_mann_whitney(scores, positive) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_threshold_sweep(scores, positive) -> float:
    """Trapezoidal area under the ROC curve traced over distinct thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    tpr, fpr = [0.0], [0.0]
    for thr in np.unique(scores)[::-1]:
        above = scores >= thr
        tpr.append(np.sum(above & positive) / n_pos)
        fpr.append(np.sum(above & ~positive) / n_neg)
    area = 0.0
    for i in range(1, len(tpr)):
        area += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2.0
    return float(area)


def metrics(counts: ConfusionCounts, scores, truth) -> MetricsReport:
    """Accuracy plus precision/recall/F1/AUC.

    Binary problems treat class 1 as positive and ``scores`` may be a vector of
    positive-class scores. With more classes, precision and recall are
    macro-averaged one-vs-rest, F1 is the harmonic mean of those two, and AUC
    is the macro one-vs-rest average (``scores`` must then be ``(n, K)``).
    Empty denominators give 0 and add a flag.
    """
    truth = np.asarray(truth, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    k = counts.num_classes
    n = len(truth)
    if n != counts.n:
        raise ValueError(f"counts cover {counts.n} samples, truth has {n}")
    flags: list[str] = []
    accuracy = _ratio(counts.correct, n, "accuracy_empty", flags)
    per_class = []
    for c in range(k):
        tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
        p = _ratio(tp, tp + fp, f"precision_undefined_class_{c}", flags)
        r = _ratio(tp, tp + fn, f"recall_undefined_class_{c}", flags)
        per_class.append({"class": c, "precision": p, "recall": r,
                          "f1": _f1(p, r, f"f1_undefined_class_{c}", flags),
                          "tp": tp, "fp": fp, "fn": fn, "tn": int(counts.tn[c])})
    if k == 2:
        precision, recall = per_class[1]["precision"], per_class[1]["recall"]
        f1 = per_class[1]["f1"]
    else:
        precision = math.fsum(pc["precision"] for pc in per_class) / k
        recall = math.fsum(pc["recall"] for pc in per_class) / k
        f1 = _f1(precision, recall, "f1_undefined_macro", flags)
    auc = _auc(scores, truth, k, flags)
    return MetricsReport(float(accuracy), float(precision), float(recall), float(f1), auc, n, flags, per_class)


def _auc(scores: np.ndarray, truth: np.ndarray, k: int, flags: list[str]) -> float:
    if k == 2:
        s = scores[:, 1] if scores.ndim == 2 else scores
        pos = truth == 1
        if pos.all() or not pos.any():
            flags.append("auc_undefined")
            return 0.0
        return auc_mann_whitney(s, pos)
    if scores.ndim != 2 or scores.shape[1] != k:
        raise ValueError(f"multi-class AUC needs (n, {k}) scores, got {scores.shape}")
    vals = []
    for c in range(k):
        pos = truth == c
        if pos.all() or not pos.any():
            flags.append(f"auc_undefined_class_{c}")
            continue
        vals.append(auc_mann_whitney(scores[:, c], pos))
    if not vals:
        flags.append("auc_undefined")
        return 0.0
    return float(np.mean(vals))


def argmax_rows(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)


def report_from_probs(probs: np.ndarray, truth) -> MetricsReport:
    truth = np.asarray(truth, dtype=np.int64)
    k = probs.shape[1]
    preds = argmax_rows(probs)
    return metrics(confusion(preds, truth, k), probs, truth)


# ------------------------------------------------------------------ attacks

Forward = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "fgsm"
    epsilon: float = 0.1
    pgd_steps: int | None = None
    pgd_step_size: float | None = None

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("attack epsilon must be positive")
        has_pgd = self.pgd_steps is not None and self.pgd_step_size is not None
        if self.kind == "pgd" and not has_pgd:
            raise ValueError("pgd attacks need pgd_steps and pgd_step_size")
        if self.kind == "fgsm" and (self.pgd_steps is not None or self.pgd_step_size is not None):
            raise ValueError("fgsm attacks take no pgd fields")
        if self.kind == "pgd" and (self.pgd_steps < 1 or self.pgd_step_size <= 0):
            raise ValueError("pgd_steps must be >= 1 and pgd_step_size positive")

    @classmethod
    def default_pgd(cls, epsilon: float = 0.1) -> AttackSpec:
        return cls("pgd", epsilon, 10, epsilon / 4)


def input_gradient(forward: Forward, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    xt = tape.leaf(x)
    loss = cross_entropy(forward(xt), labels).scalar
    g, = ad.gradients(loss, [xt])
    if not np.all(np.isfinite(g.data)):
        raise FloatingPointError("non-finite input gradient")
    return g.numpy()


def task_loss(forward: Forward, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy at ``x``."""
    p = forward(Tensor(x)).data
    return -np.log(np.clip((p * labels).sum(axis=1), 1e-12, None))


def fgsm(forward: Forward, x: np.ndarray, labels: np.ndarray, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    g = input_gradient(forward, x, labels)
    return x + eps * np.sign(g)


def pgd(forward: Forward, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
        trace: list | None = None) -> np.ndarray:
    if spec.kind != "pgd":
        raise ValueError("pgd needs an AttackSpec of kind 'pgd'")
    lo, hi = x - spec.epsilon, x + spec.epsilon
    cur = x
    for _ in range(spec.pgd_steps):
        g = input_gradient(forward, cur, labels)
        cur = np.clip(cur + spec.pgd_step_size * np.sign(g), lo, hi)
        if trace is not None:
            trace.append(cur)
    return cur


def attack(forward: Forward, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if spec.kind == "fgsm":
        return fgsm(forward, x, labels, spec.epsilon)
    return pgd(forward, x, labels, spec)


def robustness_curve(forward: Forward, x: np.ndarray, labels: np.ndarray, grid: Sequence[float],
                     kind: str = "fgsm", seed: int = 0,
                     pgd_steps: int = 10) -> list[tuple[float, MetricsReport]]:
    """Metrics under each perturbation level; ``kind`` is fgsm, pgd or noise."""
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("perturbation grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 0:
        raise ValueError("perturbation grid must be non-negative and increasing")
    truth = labels.argmax(axis=1)
    rows = []
    for level in grid:
        if level == 0:
            xs = x
        elif kind == "fgsm":
            xs = fgsm(forward, x, labels, level)
        elif kind == "pgd":
            xs = pgd(forward, x, labels, AttackSpec("pgd", level, pgd_steps, level / 4))
        elif kind == "noise":
            rng = np.random.default_rng([seed, int(round(level * 1e6))])
            xs = x + level * rng.standard_normal(x.shape)
        else:
            raise ValueError(f"unknown perturbation kind {kind!r}")
        rows.append((level, report_from_probs(forward(Tensor(xs)).data, truth)))
    return rows


def curve_csv(kind: str, rows: Sequence[tuple[float, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "level", "accuracy", "precision", "recall", "f1", "auc_roc", "n_samples"])
    for level, r in rows:
        w.writerow([kind, repr(level), repr(r.accuracy), repr(r.precision), repr(r.recall),
                    repr(r.f1), repr(r.auc_roc), r.n_samples])
    return buf.getvalue()
