"""Confusion counting and the seven pixel-wise evaluation metrics.

The positive class is the ego street.  Every metric is an exact single
division of two integer tallies; a metric whose denominator is zero is
reported as None ("undefined"), never coerced to 0.

Average precision follows the 11-point interpolation on the grid
r ∈ {0, 0.1, …, 1}.  The interpolation rule is "strict" by default: each
term takes the maximum measured precision at recall r̃ > r.  Taken
literally the r = 1 term would be vacuous (no recall exceeds 1), so the
term admits r̃ ≥ 1 — the measured full-recall precision.  rule="pascal"
uses r̃ ≥ r everywhere instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError

AP_RULES = ("strict", "pascal")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn,
            self.fp + other.fp, self.fn + other.fn,
        )

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricReport:
    acc: float | None
    pre: float | None
    rec: float | None
    fpr: float | None
    fnr: float | None
    f1: float | None
    ap: float | None = None

    def as_dict(self):
        return {
            "acc": self.acc, "pre": self.pre, "rec": self.rec,
            "fpr": self.fpr, "fnr": self.fnr, "f1": self.f1, "ap": self.ap,
        }


def confusion(predicted, truth):
    """Per-pixel confusion tally between two binary masks."""
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise DimensionError(
            f"prediction shape {p.shape} does not match truth shape {t.shape}"
        )
    p = p.astype(bool)
    t = t.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def _ratio(num, den):
    return num / den if den else None


def basic_metrics(counts, ap=None):
    """ACC, PRE, REC, FPR, FNR, F1 from a confusion tally."""
    if counts.total == 0:
        raise ArgumentError("cannot compute metrics over zero pixels")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    return MetricReport(
        acc=_ratio(tp + tn, counts.total),
        pre=_ratio(tp, tp + fp),
        rec=_ratio(tp, tp + fn),
        fpr=_ratio(fp, fp + tn),
        fnr=_ratio(fn, fn + tp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        ap=ap,
    )


def aggregate(per_image_counts, ap=None):
    """Micro-average: sum confusion counts across images, then compute."""
    counts_list = list(per_image_counts)
    if not counts_list:
        raise ArgumentError("cannot aggregate an empty list of counts")
    total = counts_list[0]
    for c in counts_list[1:]:
        total = total + c
    return basic_metrics(total, ap=ap)


def ap_from_arrays(scores, truths, rule="strict"):
    """11-point average precision from parallel score/truth arrays.

    Returns None when there is no positive ground-truth item.  The
    precision-recall curve is traced by descending score threshold; items
    with equal scores enter the prediction set together.
    """
    if rule not in AP_RULES:
        raise ArgumentError(f"unknown AP rule {rule!r}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truths = np.asarray(truths).reshape(-1).astype(bool)
    if scores.shape != truths.shape:
        raise DimensionError(
            f"{scores.size} scores vs {truths.size} truth bits"
        )
    positives = int(np.count_nonzero(truths))
    if positives == 0:
        return None

    # Tallies per distinct threshold, highest first.
    uniq, inverse = np.unique(scores, return_inverse=True)
    group_all = np.bincount(inverse, minlength=uniq.size)
    group_pos = np.bincount(inverse, weights=truths, minlength=uniq.size).astype(np.int64)
    tp = np.cumsum(group_pos[::-1])
    predicted = np.cumsum(group_all[::-1])

    precisions = tp / predicted
    total = 0.0
    for k in range(11):
        if rule == "pascal" or k == 10:
            eligible = 10 * tp >= k * positives
        else:
            eligible = 10 * tp > k * positives
        total += float(precisions[eligible].max()) if eligible.any() else 0.0
    return total / 11.0


def average_precision(scored_items, rule="strict"):
    """AP over (probability, truth bit) pairs; None without any positive."""
    items = list(scored_items)
    if not items:
        return None
    scores = np.array([s for s, _ in items], dtype=np.float64)
    truths = np.array([t for _, t in items])
    return ap_from_arrays(scores, truths, rule=rule)


# ---------------------------------------------------------------------------
# report formatting
# ---------------------------------------------------------------------------

_TABLE_COLUMNS = ("F1", "TN", "FP", "FN", "TP", "ACC")


def _pct(value):
    return "n/a" if value is None else f"{100.0 * value:.1f}"


def format_table(rows):
    """Aligned text table of (label, counts, report) rows.

    Count columns are percentages of each row's evaluated pixels; F1 and
    ACC come from the report.  All values are percent with one decimal.
    """
    body = []
    for label, counts, report in rows:
        total = counts.total
        body.append([
            label,
            _pct(report.f1),
            _pct(counts.tn / total if total else None),
            _pct(counts.fp / total if total else None),
            _pct(counts.fn / total if total else None),
            _pct(counts.tp / total if total else None),
            _pct(report.acc),
        ])
    header = [""] + [c for c in _TABLE_COLUMNS]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        cells = [row[0].ljust(widths[0])]
        cells += [row[i].rjust(widths[i]) for i in range(1, len(row))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)
