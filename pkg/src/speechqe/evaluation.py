"""Rank-correlation and error-span-detection scoring.

Spearman is the primary measurement; correlations against constant inputs
are reported as absent rather than coerced to zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import stats

from .core import (
    DataError,
    ErrorSpan,
    MetricKind,
    QEExample,
    Severity,
    SpeechQEError,
    SystemPrediction,
    spans_in_bounds,
)

logger = logging.getLogger(__name__)


class UndefinedCorrelationError(SpeechQEError):
    pass


class InsufficientDataError(SpeechQEError):
    pass


@dataclass
class CorrelationReport:
    system_id: str
    label_kind: MetricKind
    n_used: int
    n_excluded: int
    spearman: Optional[float]
    pearson: Optional[float] = None
    kendall: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "system_id": self.system_id,
            "label_kind": self.label_kind.value,
            "n_used": self.n_used,
            "n_excluded": self.n_excluded,
            "spearman": self.spearman,
            "pearson": self.pearson,
            "kendall": self.kendall,
        }


@dataclass
class ESDReport:
    system_id: str
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "system_id": self.system_id,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


# --- correlation kernels ----------------------------------------------------

def fractional_ranks(v: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties receiving the average of their positions."""
    a = np.asarray(v, dtype=float)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a), dtype=float)
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        raise InsufficientDataError("need two equal-length vectors of length >= 2")
    xd = x - x.mean()
    yd = y - y.mean()
    denom = np.sqrt((xd * xd).sum() * (yd * yd).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("constant input vector")
    return float(np.dot(xd, yd) / denom)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of fractional ranks (average ranks on ties)."""
    if len(x) != len(y) or len(x) < 2:
        raise InsufficientDataError("need two equal-length vectors of length >= 2")
    return pearson(fractional_ranks(x), fractional_ranks(y))


def kendall(x: Sequence[float], y: Sequence[float]) -> float:
    tau = stats.kendalltau(x, y).statistic
    if tau is None or np.isnan(tau):
        raise UndefinedCorrelationError("kendall tau undefined")
    return float(tau)


# --- correlation over a corpus ----------------------------------------------

def correlate(
    predictions: Iterable[SystemPrediction],
    corpus: Sequence[QEExample],
    label_kind: MetricKind,
    with_secondary: bool = False,
) -> CorrelationReport:
    """Correlate oriented labels against predicted scores.

    Examples without a usable (prediction score, label) pair are excluded and
    counted; orientation is applied through the stored oriented label values.
    """
    by_id: Dict[str, SystemPrediction] = {}
    system_id = ""
    for p in predictions:
        by_id[p.example_id] = p
        system_id = p.system_id
    xs, ys = [], []
    n_excluded = 0
    for ex in corpus:
        pred = by_id.get(ex.example_id)
        label = ex.labels.get(label_kind)
        if pred is None or pred.score is None or label is None:
            n_excluded += 1
            continue
        xs.append(pred.score)
        ys.append(label.oriented_value)
    if n_excluded:
        logger.info("correlate(%s, %s): excluded %d of %d examples",
                    system_id, label_kind.value, n_excluded, len(corpus))
    if len(xs) < 2:
        raise InsufficientDataError(
            f"only {len(xs)} usable pairs for system {system_id!r}")
    report = CorrelationReport(
        system_id=system_id,
        label_kind=label_kind,
        n_used=len(xs),
        n_excluded=n_excluded,
        spearman=_or_absent(spearman, xs, ys),
    )
    if with_secondary:
        report.pearson = _or_absent(pearson, xs, ys)
        report.kendall = _or_absent(kendall, xs, ys)
    return report


def _or_absent(fn, xs, ys) -> Optional[float]:
    try:
        return fn(xs, ys)
    except UndefinedCorrelationError:
        return None


def load_da_records(path) -> List[dict]:
    """Load human direct-assessment records: JSONL of {example_id, system_id, da_score}."""
    records = []
    seen: Set[Tuple[str, str]] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (rec["example_id"], rec["system_id"])
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate DA record for {key}")
            seen.add(key)
            records.append(rec)
    return records


def correlate_human_da(
    predictions: Iterable[SystemPrediction],
    da_records: Sequence[dict],
    with_secondary: bool = False,
) -> CorrelationReport:
    """Correlate system scores against human DA; DA scores are never flipped."""
    by_id: Dict[str, SystemPrediction] = {}
    system_id = ""
    for p in predictions:
        by_id[p.example_id] = p
        system_id = p.system_id
    xs, ys = [], []
    n_excluded = 0
    for rec in da_records:
        key = f"{rec['example_id']}::{rec['system_id']}"
        pred = by_id.get(key)
        if pred is None or pred.score is None:
            n_excluded += 1
            continue
        xs.append(pred.score)
        ys.append(float(rec["da_score"]))
    if len(xs) < 2:
        raise InsufficientDataError(
            f"only {len(xs)} usable DA pairs for system {system_id!r}")
    report = CorrelationReport(
        system_id=system_id,
        label_kind=MetricKind.HUMAN_DA,
        n_used=len(xs),
        n_excluded=n_excluded,
        spearman=_or_absent(spearman, xs, ys),
    )
    if with_secondary:
        report.pearson = _or_absent(pearson, xs, ys)
        report.kendall = _or_absent(kendall, xs, ys)
    return report


# --- error span detection F1 ------------------------------------------------

def _span_chars(spans: Sequence[ErrorSpan], severity_weighted: bool) -> Dict[int, int]:
    chars: Dict[int, int] = {}
    for s in spans:
        w = 2 if severity_weighted and s.severity == Severity.MAJOR else 1
        for i in range(s.start, s.end):
            chars[i] = max(chars.get(i, 0), w)
    return chars


def esd_counts(
    pred: Sequence[ErrorSpan],
    gold: Sequence[ErrorSpan],
    hyp_len: int,
    severity_weighted: bool = False,
) -> Tuple[int, int, int]:
    """(weighted intersection, pred char count, gold char count) for one hypothesis."""
    if not spans_in_bounds(list(pred), hyp_len) or not spans_in_bounds(list(gold), hyp_len):
        raise InvalidSpanError(f"span out of bounds for hypothesis of length {hyp_len}")
    p = _span_chars(pred, severity_weighted)
    g = _span_chars(gold, severity_weighted)
    inter = sum(min(p[i], g[i]) for i in p.keys() & g.keys())
    return inter, sum(p.values()), sum(g.values())


class InvalidSpanError(SpeechQEError):
    pass


def _prf(inter: int, n_pred: int, n_gold: int) -> Tuple[float, float, float]:
    # Both empty means "no errors" was correctly predicted: count it as perfect.
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = inter / n_pred if n_pred else 0.0
    recall = inter / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def esd_f1(
    pred: Sequence[ErrorSpan],
    gold: Sequence[ErrorSpan],
    hyp_len: int,
    severity_weighted: bool = False,
) -> Tuple[float, float, float]:
    """Character-level precision, recall, F1 for one hypothesis."""
    return _prf(*esd_counts(pred, gold, hyp_len, severity_weighted))


def corpus_esd_report(
    system_id: str,
    pairs: Iterable[Tuple[Sequence[ErrorSpan], Sequence[ErrorSpan], int]],
    average: str = "micro",
    severity_weighted: bool = False,
) -> ESDReport:
    """Aggregate ESD scores over (pred, gold, hyp_len) triples.

    Micro-averaging sums character counts across the corpus; macro averages
    per-hypothesis P/R/F1.
    """
    if average not in ("micro", "macro"):
        raise ValueError(f"unknown averaging mode {average!r}")
    if average == "micro":
        ti = tp = tg = 0
        for pred, gold, hyp_len in pairs:
            i, p, g = esd_counts(pred, gold, hyp_len, severity_weighted)
            ti, tp, tg = ti + i, tp + p, tg + g
        precision, recall, f1 = _prf(ti, tp, tg)
    else:
        rows = [esd_f1(pred, gold, hyp_len, severity_weighted) for pred, gold, hyp_len in pairs]
        if not rows:
            raise InsufficientDataError("no span pairs to average")
        precision = float(np.mean([r[0] for r in rows]))
        recall = float(np.mean([r[1] for r in rows]))
        f1 = float(np.mean([r[2] for r in rows]))
    return ESDReport(system_id=system_id, precision=precision, recall=recall, f1=f1)


# --- report grid ------------------------------------------------------------

def build_report_grid(reports: Sequence[CorrelationReport]) -> Tuple[str, dict]:
    """Render correlation reports as an aligned table plus a JSON-able document.

    Rows are systems, columns are label kinds; ordering is deterministic.
    """
    systems = sorted({r.system_id for r in reports})
    kinds = sorted({r.label_kind for r in reports}, key=lambda k: k.value)
    cell: Dict[Tuple[str, MetricKind], CorrelationReport] = {
        (r.system_id, r.label_kind): r for r in reports
    }
    header = ["system"] + [k.value for k in kinds]
    rows = []
    for sys_id in systems:
        row = [sys_id]
        for k in kinds:
            r = cell.get((sys_id, k))
            if r is None:
                row.append("-")
            elif r.spearman is None:
                row.append("absent")
            else:
                row.append(f"{r.spearman:.4f}")
        rows.append(row)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in [header] + rows]
    doc = {
        "columns": [k.value for k in kinds],
        "rows": [
            {
                "system_id": sys_id,
                "cells": {
                    k.value: (cell[(sys_id, k)].to_dict() if (sys_id, k) in cell else None)
                    for k in kinds
                },
            }
            for sys_id in systems
        ],
    }
    return "\n".join(lines) + "\n", doc
