"""Per-class precision, cohort averages and baseline comparisons.

"Precision" here is per-class test accuracy (recall): the share of a
class's test samples that the model labels correctly, as a percentage.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

COHORTS = (("overall", 1.0), ("first50", 0.5), ("first20", 0.2))

REPORT_HEADER = "# precision = per-class test accuracy (recall), percent"


def precision_from_predictions(y_true, y_pred, classes: Sequence[int]) -> dict[int, float]:
    """Percent of each class's samples predicted correctly; NaN if it has none."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    out = {}
    for c in classes:
        mask = y_true == c
        n = int(mask.sum())
        out[int(c)] = 100.0 * float((y_pred[mask] == c).sum()) / n if n else math.nan
    return out


def per_class_precision(model, images, labels, seen_classes: Sequence[int],
                        batch_size: int = 1024) -> dict[int, float]:
    labels = np.asarray(labels)
    keep = np.isin(labels, list(seen_classes))
    images, labels = np.asarray(images)[keep], labels[keep]
    preds = [model.predict(images[i:i + batch_size], seen_classes)
             for i in range(0, len(images), batch_size)]
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return precision_from_predictions(labels, preds, seen_classes)


def cohort_average(precisions: Sequence[float], fraction: float) -> float:
    """Mean over the first ceil(fraction * K) classes, in first-appearance order.

    Classes with undefined (NaN) precision are skipped.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if len(precisions) == 0:
        raise ValueError("cohort_average of an empty class list")
    k = math.ceil(fraction * len(precisions) - 1e-9)
    cohort = [p for p in list(precisions)[:k] if not math.isnan(p)]
    return float(np.mean(cohort)) if cohort else math.nan


@dataclass(frozen=True)
class Comparison:
    absolute_change: float
    relative_change: float  # NaN when the baseline is 0

    def formatted(self) -> str:
        rel = "undefined" if math.isnan(self.relative_change) else f"{self.relative_change:.2f}"
        return f"{self.absolute_change:.2f}/{rel}"


def compare(baseline: float, variant: float) -> Comparison:
    absolute = variant - baseline
    relative = 100.0 * absolute / baseline if baseline > 0 else math.nan
    return Comparison(absolute, relative)


@dataclass
class CohortReport:
    class_ids: list[int]
    first_seen_task: list[int]
    precision: list[float]

    def cohort(self, name: str) -> float:
        return cohort_average(self.precision, dict(COHORTS)[name])

    @property
    def overall(self) -> float:
        return self.cohort("overall")

    @property
    def first50(self) -> float:
        return self.cohort("first50")

    @property
    def first20(self) -> float:
        return self.cohort("first20")

    def summary(self) -> dict[str, float]:
        return {name: self.cohort(name) for name, _ in COHORTS}

    @classmethod
    def build(cls, precisions: dict[int, float], class_order: Sequence[int],
              first_seen: dict[int, int]) -> "CohortReport":
        order = [c for c in class_order if c in precisions]
        return cls(order, [first_seen[c] for c in order], [precisions[c] for c in order])


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_report(report: CohortReport, path) -> None:
    lines = [REPORT_HEADER, "class_id,first_seen_task,precision"]
    lines += [f"{c},{t},{_fmt(p)}" for c, t, p in
              zip(report.class_ids, report.first_seen_task, report.precision)]
    s = report.summary()
    lines += ["", "overall,first50,first20", ",".join(_fmt(s[k]) for k, _ in COHORTS)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> CohortReport:
    path = Path(path)
    ids, tasks, prec = [], [], []
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["class_id", "first_seen_task", "precision"]:
        raise ValueError(f"{path}: missing report header")
    for row in rows[1:]:
        if row[0] == "overall":
            break
        ids.append(int(row[0]))
        tasks.append(int(row[1]))
        prec.append(float(row[2]))
    return CohortReport(ids, tasks, prec)


def average_reports(reports: Sequence[CohortReport]) -> CohortReport:
    """Class-wise mean over runs that share the same class order."""
    first = reports[0]
    for r in reports[1:]:
        if r.class_ids != first.class_ids:
            raise ValueError("cannot average reports with different class orders")
    prec = np.mean([r.precision for r in reports], axis=0)
    return CohortReport(list(first.class_ids), list(first.first_seen_task), [float(p) for p in prec])


def compare_reports(baseline: CohortReport, variant: CohortReport) -> dict[str, Comparison]:
    if baseline.class_ids != variant.class_ids:
        raise ValueError(
            f"cohort mismatch: baseline classes {baseline.class_ids} vs variant {variant.class_ids}"
        )
    return {name: compare(baseline.cohort(name), variant.cohort(name)) for name, _ in COHORTS}


def write_comparison(baseline: CohortReport, variant: CohortReport, path) -> dict[str, Comparison]:
    comps = compare_reports(baseline, variant)
    lines = ["cohort,baseline,variant,abs_change,rel_change"]
    for name, _ in COHORTS:
        c = comps[name]
        lines.append(f"{name},{baseline.cohort(name):.2f},{variant.cohort(name):.2f},"
                     f"{c.absolute_change:.2f},"
                     + ("undefined" if math.isnan(c.relative_change) else f"{c.relative_change:.2f}"))
    Path(path).write_text("\n".join(lines) + "\n")
    return comps
