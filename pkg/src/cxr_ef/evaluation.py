"""Per-class metrics, confidence buckets and demographic subgroup reports.

The positive class is ReducedEF throughout: a false positive is a
ReducedEF prediction on a PreservedEF study.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .cohort import CohortManifest, Label, Race, Sex, SchemaError

DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class PredictionRecord:
    study_id: str
    p_reduced: float
    truth: Label

    def __post_init__(self):
        p = float(self.p_reduced)
        # float64 sigmoid saturates to exactly 0/1 beyond |logit| ~ 37
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p_reduced must lie in [0, 1], got {self.p_reduced}")
        object.__setattr__(self, "p_reduced", p)
        object.__setattr__(self, "truth", Label(self.truth))

    @property
    def predicted(self) -> Label:
        # ties at exactly 0.5 go to PreservedEF
        return Label.REDUCED if self.p_reduced > DECISION_THRESHOLD else Label.PRESERVED

    @property
    def correct(self) -> bool:
        return self.predicted is self.truth


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def correct(self) -> int:
        return self.tp + self.tn

    @property
    def errors(self) -> int:
        return self.fp + self.fn


def _require(preds) -> list[PredictionRecord]:
    preds = list(preds)
    if not preds:
        raise ValueError("no predictions")
    return preds


def confusion_counts(preds: Iterable[PredictionRecord]) -> ConfusionCounts:
    tp = fp = fn = tn = 0
    for p in _require(preds):
        if p.predicted is Label.REDUCED:
            if p.truth is Label.REDUCED:
                tp += 1
            else:
                fp += 1
        elif p.truth is Label.REDUCED:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both are 0."""
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "support": self.support,
                "precision_undefined": self.precision_undefined, "recall_undefined": self.recall_undefined}


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[Label, ClassMetrics]
    accuracy: float
    misclassification_rate: float
    total: int
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        return {
            "per_class": {lab.value: m.to_dict() for lab, m in self.per_class.items()},
            "overall": {"accuracy": self.accuracy, "misclassification_rate": self.misclassification_rate,
                        "total": self.total, "correct": self.counts.correct, "misclassified": self.counts.errors,
                        "tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn, "tn": self.counts.tn},
        }


def _class_metrics(hits: int, predicted: int, actual: int) -> ClassMetrics:
    precision = hits / predicted if predicted else 0.0
    recall = hits / actual if actual else 0.0
    return ClassMetrics(precision, recall, f1_score(precision, recall), actual,
                        precision_undefined=predicted == 0, recall_undefined=actual == 0)


def report_from_counts(c: ConfusionCounts) -> MetricsReport:
    n = c.total
    if n == 0:
        raise ValueError("no predictions")
    per_class = {
        Label.REDUCED: _class_metrics(c.tp, c.tp + c.fp, c.tp + c.fn),
        Label.PRESERVED: _class_metrics(c.tn, c.tn + c.fn, c.tn + c.fp),
    }
    mis = c.errors / n
    # 1 - mis (not correct / n) makes accuracy + mis == 1 and accuracy == 1 - mis hold exactly
    return MetricsReport(per_class, 1.0 - mis, mis, n, c)


def classification_report(preds: Iterable[PredictionRecord]) -> MetricsReport:
    """Precision/recall/F1 per class plus accuracy and misclassification rate.

    Empty denominators give 0 with the matching ``*_undefined`` flag set.
    """
    return report_from_counts(confusion_counts(preds))


def misclassification_rate(preds: Iterable[PredictionRecord]) -> float:
    c = confusion_counts(preds)
    return c.errors / c.total


def format_percent(rate: float, decimals: int = 1) -> str:
    """``0.3119...`` -> ``'31.2%'`` (half-up)."""
    scale = 10 ** decimals
    return f"{math.floor(rate * 100 * scale + 0.5) / scale:.{decimals}f}%"


@dataclass(frozen=True)
class BucketCounts:
    hi: int
    lo: int
    mid: int

    @property
    def total(self) -> int:
        return self.hi + self.lo + self.mid


@dataclass(frozen=True)
class ConfidenceBuckets:
    overall: BucketCounts
    misclassified: BucketCounts
    hi_threshold: float = 0.9
    lo_threshold: float = 0.1

    def to_dict(self) -> dict:
        return {
            "hi_threshold": self.hi_threshold, "lo_threshold": self.lo_threshold,
            "overall": {"hi": self.overall.hi, "lo": self.overall.lo, "mid": self.overall.mid},
            "misclassified": {"hi": self.misclassified.hi, "lo": self.misclassified.lo,
                              "mid": self.misclassified.mid},
        }


def confidence_buckets(preds: Iterable[PredictionRecord], hi_threshold: float = 0.9,
                       lo_threshold: float = 0.1) -> ConfidenceBuckets:
    """Bucket raw P(ReducedEF): ``> hi``, ``< lo`` and the rest, overall and for errors."""
    if not 0.0 < lo_threshold < hi_threshold < 1.0:
        raise ValueError(f"need 0 < lo_threshold < hi_threshold < 1, got lo={lo_threshold}, hi={hi_threshold}")
    counts = [[0, 0, 0], [0, 0, 0]]
    for p in preds:
        slot = 0 if p.p_reduced > hi_threshold else 1 if p.p_reduced < lo_threshold else 2
        counts[0][slot] += 1
        if not p.correct:
            counts[1][slot] += 1
    return ConfidenceBuckets(BucketCounts(*counts[0]), BucketCounts(*counts[1]), hi_threshold, lo_threshold)


# -- subgroups -----------------------------------------------------------------------

FACETS = ("race", "sex")


@dataclass(frozen=True)
class SubgroupEntry:
    report: MetricsReport
    low_support: bool


@dataclass(frozen=True)
class SubgroupReport:
    facet: str
    groups: dict[str, SubgroupEntry]
    min_support: int

    def to_dict(self) -> dict:
        return {name: {**entry.report.to_dict(), "low_support": entry.low_support}
                for name, entry in self.groups.items()}


def subgroup_report(preds: Iterable[PredictionRecord], manifest: CohortManifest, facet: str,
                    min_support: int = 5, include_unknown: bool = False) -> SubgroupReport:
    """Per-group classification reports keyed by race category or sex.

    Groups smaller than ``min_support`` are kept and flagged.  Unknown
    race/sex is left out unless ``include_unknown``.
    """
    if facet not in FACETS:
        raise ValueError(f"facet must be one of {FACETS}, got {facet!r}")
    studies = manifest.by_study()
    grouped: dict[str, list[PredictionRecord]] = {}
    for p in preds:
        rec = studies.get(p.study_id)
        if rec is None:
            raise KeyError(f"prediction for study {p.study_id!r} not found in the manifest")
        value = rec.race_ethnicity if facet == "race" else rec.sex
        if value in (Race.UNKNOWN, Sex.UNKNOWN) and not include_unknown:
            continue
        grouped.setdefault(value.display, []).append(p)
    order = [v.display for v in (Race if facet == "race" else Sex)]
    groups = {name: SubgroupEntry(classification_report(grouped[name]), len(grouped[name]) < min_support)
              for name in order if name in grouped}
    return SubgroupReport(facet, groups, min_support)


# -- rendering / files -------------------------------------------------------------

def render_table(rows: Sequence[tuple[str, MetricsReport]], title: str = "") -> str:
    """Per-class P/R/F1 rows, two decimals, one block per named report."""
    head = f"{'':<30} {'Class':<13} {'Precision':>9} {'Recall':>7} {'F1-score':>8} {'Support':>8}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for name, rep in rows:
        for i, lab in enumerate(Label):
            m = rep.per_class[lab]
            lines.append(f"{name if i == 0 else '':<30} {lab.display:<13} {m.precision:>9.2f} "
                         f"{m.recall:>7.2f} {m.f1:>8.2f} {m.support:>8d}")
        lines.append("-" * len(head))
    return "\n".join(lines) + "\n"


def render_overall(report: MetricsReport, buckets: ConfidenceBuckets | None = None) -> str:
    c = report.counts
    lines = [f"Of the total {report.total} samples, {c.correct} were correctly classified and "
             f"{c.errors} were misclassified (misclassification rate {format_percent(report.misclassification_rate)})."]
    if buckets is not None:
        o, m = buckets.overall, buckets.misclassified
        lines.append(f"p > {buckets.hi_threshold:g}: {o.hi}; p < {buckets.lo_threshold:g}: {o.lo}; other: {o.mid}.")
        lines.append(f"Among misclassified: p > {buckets.hi_threshold:g}: {m.hi}; "
                     f"p < {buckets.lo_threshold:g}: {m.lo}; other: {m.mid}.")
    return "\n".join(lines) + "\n"


def metrics_json(report: MetricsReport, buckets: ConfidenceBuckets | None = None,
                 subgroups: Sequence[SubgroupReport] = ()) -> dict:
    d = report.to_dict()
    return {
        "per_class": d["per_class"],
        "overall": d["overall"],
        "buckets": buckets.to_dict() if buckets is not None else None,
        "subgroups": {s.facet: s.to_dict() for s in subgroups},
    }


def dumps_metrics(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


PREDICTIONS_HEADER = ["study_id", "p_reduced", "predicted", "truth"]


def predictions_to_csv(preds: Iterable[PredictionRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PREDICTIONS_HEADER)
    for p in preds:
        writer.writerow([p.study_id, repr(p.p_reduced), p.predicted.value, p.truth.value])
    return buf.getvalue()


def write_predictions(preds: Iterable[PredictionRecord], path) -> None:
    Path(path).write_text(predictions_to_csv(preds), encoding="utf-8", newline="")


def read_predictions(path) -> list[PredictionRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"predictions file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in PREDICTIONS_HEADER:
            if col not in (reader.fieldnames or []):
                raise SchemaError(col, source=str(path))
        out = []
        for row in reader:
            rec = PredictionRecord(row["study_id"], float(row["p_reduced"]), Label(row["truth"]))
            if rec.predicted.value != row["predicted"]:
                raise ValueError(f"{path}: study {rec.study_id} has predicted={row['predicted']!r} "
                                 f"inconsistent with p_reduced={rec.p_reduced}")
            out.append(rec)
    return out
