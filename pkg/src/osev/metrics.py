"""Open-set evaluation: openness-weighted macro-F1, AUC, ECE, confusion.

A scored sample is an :class:`OpenSetRecord` holding the K known-class
probabilities, a scalar rejection score (higher means more likely unknown)
and the ground-truth label, where label K stands for "unknown".  The headline
number is the openness-weighted macro-F1

    maF1 = sum_i w_i * F1_i / sum_i w_i,    w_i = 1 - sqrt(2K / (2K + i)),

swept over the number of unknown classes mixed into the test set, with each
sweep point averaged over randomized unknown-class selections.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "OpenSetRecord",
    "OpennessPoint",
    "confusion_and_top_confusions",
    "ece",
    "macro_f1",
    "open_maf1_curve",
    "open_predictions",
    "openness",
    "read_score_dump",
    "roc_auc",
    "write_score_dump",
]


@dataclass(frozen=True)
class OpenSetRecord:
    """Scored sample: known-class probabilities, rejection score, true label.

    ``label`` is a known-class index in [0, K) or exactly K for unknown.
    """

    probs: np.ndarray
    score: float
    label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 1 or self.probs.shape[0] < 2:
            raise ValueError(f"probs must be a K>=2 vector, got shape {self.probs.shape}")
        if not np.all(np.isfinite(self.probs)) or not math.isfinite(self.score):
            raise ValueError("record contains non-finite values")
        if not 0 <= self.label <= self.probs.shape[0]:
            raise ValueError(f"label {self.label} out of range for K={self.probs.shape[0]}")

    @property
    def num_known(self) -> int:
        return int(self.probs.shape[0])

    @property
    def is_unknown(self) -> bool:
        return self.label == self.num_known


def openness(num_known: int, num_unknown: int) -> float:
    """1 - sqrt(2K / (2K + i)); zero when no unknown classes are present."""
    if num_known < 1:
        raise ValueError(f"need at least one known class, got {num_known}")
    if num_unknown < 0:
        raise ValueError(f"unknown-class count must be >= 0, got {num_unknown}")
    return 1.0 - math.sqrt(2.0 * num_known / (2.0 * num_known + num_unknown))


def open_predictions(records, tau: float) -> np.ndarray:
    """(K+1)-way predictions: label K when score > tau, else argmax of probs."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    k = records[0].num_known
    preds = np.empty(len(records), dtype=np.int64)
    for i, r in enumerate(records):
        if r.num_known != k:
            raise ValueError("records disagree on the number of known classes")
        preds[i] = k if r.score > tau else int(np.argmax(r.probs))
    return preds


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean F1 over classes present in preds or labels.

    A class with zero precision and zero recall contributes F1 = 0; classes
    absent from both arrays are skipped entirely.
    """
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"preds and labels must be matching non-empty 1-D arrays, got {p.shape} and {y.shape}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if p.min() < 0 or p.max() >= num_classes or y.min() < 0 or y.max() >= num_classes:
        raise ValueError("class index out of range")
    scores = []
    for c in range(num_classes):
        in_pred = p == c
        in_label = y == c
        if not in_pred.any() and not in_label.any():
            continue
        tp = float(np.sum(in_pred & in_label))
        precision = tp / in_pred.sum() if in_pred.any() else 0.0
        recall = tp / in_label.sum() if in_label.any() else 0.0
        f1 = 0.0 if precision + recall == 0.0 else 2.0 * precision * recall / (precision + recall)
        scores.append(f1)
    return float(np.mean(scores))


@dataclass(frozen=True)
class OpennessPoint:
    num_unknown: int
    omega: float
    f1_mean: float
    f1_std: float
    f1_values: tuple[float, ...]


def open_maf1_curve(
    known_records,
    unknown_by_class: dict[int, list[OpenSetRecord]],
    tau: float,
    num_selections: int = 10,
    seed: int = 0,
    max_unknown: int | None = None,
) -> tuple[list[OpennessPoint], float, float, str | None]:
    """Openness sweep of (K+1)-way macro-F1 with randomized unknown subsets.

    For each i in 1..U, ``num_selections`` random i-subsets of the unknown
    classes (without replacement, seeded per (i, selection)) are mixed with
    the known records and scored at threshold tau.  Returns the per-point
    curve, the openness-weighted scalar over selection means, the standard
    deviation of that scalar across aligned selections, and a truncation note
    when max_unknown cut the sweep short.
    """
    known_records = list(known_records)
    if not known_records:
        raise ValueError("no known records")
    class_ids = sorted(unknown_by_class)
    if not class_ids:
        raise ValueError("no unknown classes")
    if num_selections < 1:
        raise ValueError(f"num_selections must be >= 1, got {num_selections}")
    k = known_records[0].num_known
    note = None
    limit = len(class_ids)
    if max_unknown is not None and max_unknown < limit:
        limit = max_unknown
        note = f"sweep truncated to {limit} of {len(class_ids)} unknown classes"
    known_labels = [min(r.label, k) for r in known_records]

    points: list[OpennessPoint] = []
    for i in range(1, limit + 1):
        f1s = []
        for s in range(num_selections):
            rng = np.random.default_rng([seed, 7001, i, s])
            chosen = sorted(int(c) for c in rng.choice(class_ids, size=i, replace=False))
            records = list(known_records)
            labels = list(known_labels)
            for c in chosen:
                records.extend(unknown_by_class[c])
                labels.extend([k] * len(unknown_by_class[c]))
            preds = open_predictions(records, tau)
            f1s.append(macro_f1(preds, np.asarray(labels), k + 1))
        arr = np.asarray(f1s)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        points.append(
            OpennessPoint(
                num_unknown=i,
                omega=openness(k, i),
                f1_mean=float(arr.mean()),
                f1_std=std,
                f1_values=tuple(float(v) for v in arr),
            )
        )

    omegas = np.asarray([pt.omega for pt in points])
    means = np.asarray([pt.f1_mean for pt in points])
    scalar = float((omegas * means).sum() / omegas.sum())
    per_trial = np.asarray(
        [
            (omegas * np.asarray([pt.f1_values[s] for pt in points])).sum() / omegas.sum()
            for s in range(num_selections)
        ]
    )
    scalar_std = float(per_trial.std(ddof=1)) if num_selections > 1 else 0.0
    return points, scalar, scalar_std, note


def roc_auc(scores_known, scores_unknown) -> float:
    """Probability an unknown sample outscores a known one, ties counting half.

    Computed with midranks, which agrees exactly with brute-force pair
    counting.
    """
    k = np.asarray(scores_known, dtype=np.float64)
    u = np.asarray(scores_unknown, dtype=np.float64)
    if k.size == 0 or u.size == 0:
        raise ValueError("both score sets must be non-empty")
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(u))):
        raise ValueError("scores must be finite")
    ranks = rankdata(np.concatenate([u, k]))
    rank_sum = ranks[: u.size].sum()
    return float((rank_sum - u.size * (u.size + 1) / 2.0) / (u.size * k.size))


def ece(confidences, correct, num_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins.

    A confidence of exactly 1.0 lands in the last bin; empty bins contribute
    nothing.
    """
    c = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if c.shape != ok.shape or c.ndim != 1 or c.size == 0:
        raise ValueError(f"confidences and flags must be matching non-empty 1-D arrays, got {c.shape} and {ok.shape}")
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise ValueError("confidences must lie in [0, 1]")
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    idx = np.minimum((c * num_bins).astype(np.int64), num_bins - 1)
    n = c.size
    total = 0.0
    for m in range(num_bins):
        mask = idx == m
        if not mask.any():
            continue
        total += (mask.sum() / n) * abs(ok[mask].mean() - c[mask].mean())
    return float(total)


def confusion_and_top_confusions(
    preds,
    labels,
    num_known: int,
    unknown_ids=None,
) -> tuple[np.ndarray, list[dict]]:
    """Row-normalized (K+1)x(K+1) confusion matrix plus worst unknown leaks.

    Rows are true labels, columns predictions; each non-empty row sums to 1.
    When ``unknown_ids`` gives the original class of every unknown-labeled
    sample (and None elsewhere), the second element ranks unknown classes by
    the fraction of their samples predicted as some known class, each with its
    most frequent known target (lowest index on ties).
    """
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"preds and labels must be matching 1-D arrays, got {p.shape} and {y.shape}")
    side = num_known + 1
    if p.min(initial=0) < 0 or p.max(initial=0) >= side or y.min(initial=0) < 0 or y.max(initial=0) >= side:
        raise ValueError("class index out of range")
    counts = np.zeros((side, side))
    np.add.at(counts, (y, p), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)

    top: list[dict] = []
    if unknown_ids is not None:
        ids = np.asarray([(-1 if v is None else int(v)) for v in unknown_ids])
        if ids.shape != y.shape:
            raise ValueError(f"unknown_ids shape {ids.shape} does not match labels {y.shape}")
        for cls in sorted(set(ids[ids >= 0].tolist())):
            mask = ids == cls
            as_known = p[mask] < num_known
            rate = float(as_known.mean())
            if as_known.any():
                target_counts = np.bincount(p[mask][as_known], minlength=num_known)
                target = int(np.argmax(target_counts))
            else:
                target = None
            top.append({"unknown_class": int(cls), "rate": rate, "target": target})
        top.sort(key=lambda d: (-d["rate"], d["unknown_class"]))
    return matrix, top


def write_score_dump(path, records) -> Path:
    """One JSON object per line: {probs, score, label}, label K as "unknown"."""
    p = Path(path)
    with open(p, "w", encoding="utf-8") as fh:
        for r in records:
            label = "unknown" if r.is_unknown else int(r.label)
            fh.write(
                json.dumps(
                    {"probs": [float(v) for v in r.probs], "score": float(r.score), "label": label},
                    sort_keys=True,
                )
            )
            fh.write("\n")
    return p


def read_score_dump(path) -> list[OpenSetRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                probs = obj["probs"]
                score = obj["score"]
                label = obj["label"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed score record: {exc}") from exc
            k = len(probs)
            records.append(OpenSetRecord(probs=np.asarray(probs), score=float(score), label=k if label == "unknown" else int(label)))
    return records
