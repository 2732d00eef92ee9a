"""Shared domain types for speech translation quality estimation.

Score orientation is normalized so that higher always means better;
MetricX-style scores (lower = better) are flipped by negating them.
All character indices are Unicode code-point indices, never bytes.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


class SpeechQEError(Exception):
    """Base class for errors raised by this package."""


class InvalidValueError(SpeechQEError):
    pass


class ParseError(SpeechQEError):
    pass


class DataError(SpeechQEError):
    pass


class MetricKind(str, Enum):
    XCOMET_LIKE = "xcomet_like"
    METRICX_LIKE = "metricx_like"
    HUMAN_DA = "human_da"
    CUSTOM = "custom"


class Severity(str, Enum):
    MINOR = "minor"
    MAJOR = "major"


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


# Language pairs are open-ended strings; these two are the ones exercised
# by the shipped fixtures.
ES2EN = "es2en"
EN2DE = "en2de"


def normalize_score(raw: float, kind: MetricKind) -> float:
    """Orient a raw metric score so that higher means better.

    MetricX-style scores are negated; everything else passes through.
    """
    if not math.isfinite(raw):
        raise InvalidValueError(f"non-finite score: {raw!r}")
    if kind == MetricKind.METRICX_LIKE:
        return -raw
    return raw


@dataclass(frozen=True)
class SpeechSegment:
    """One utterance: audio features plus gold transcript and reference."""

    id: str
    audio: np.ndarray  # float32, shape (frames, feature_width)
    transcript: str  # gold source text
    reference: str  # reference target text
    lang_pair: str
    domain: str  # e.g. "covost2", "fleurs", "iwslt-acl"
    split: Split
    frame_rate_hz: float = 100.0

    def __post_init__(self):
        if self.audio.ndim != 2 or self.audio.shape[0] == 0:
            raise DataError(f"segment {self.id}: audio must be a non-empty frame matrix")


@dataclass(frozen=True)
class Hypothesis:
    text: str  # translation hypothesis
    st_system_id: str


@dataclass(frozen=True)
class QualityLabel:
    metric_kind: MetricKind
    raw_value: float
    oriented_value: float  # higher = better

    @classmethod
    def from_raw(cls, kind: MetricKind, raw: float) -> "QualityLabel":
        if kind == MetricKind.XCOMET_LIKE and not 0.0 <= raw <= 1.0:
            raise InvalidValueError(f"xcomet-style score out of [0,1]: {raw}")
        return cls(metric_kind=kind, raw_value=raw, oriented_value=normalize_score(raw, kind))


@dataclass(frozen=True, order=True)
class ErrorSpan:
    """Character interval [start, end) in the hypothesis, with severity."""

    start: int
    end: int
    severity: Severity = field(compare=False, default=Severity.MINOR)

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise InvalidValueError(f"bad span bounds [{self.start}, {self.end})")


@dataclass(frozen=True)
class QEExample:
    segment: SpeechSegment
    hypothesis: Hypothesis
    labels: Dict[MetricKind, QualityLabel]
    gold_spans: Optional[List[ErrorSpan]] = None

    @property
    def example_id(self) -> str:
        return f"{self.segment.id}::{self.hypothesis.st_system_id}"


@dataclass(frozen=True)
class SystemPrediction:
    example_id: str
    system_id: str
    score: Optional[float] = None
    spans: Optional[List[ErrorSpan]] = None
    raw_output: Optional[str] = None  # generated text / intermediate transcript

    def __post_init__(self):
        if self.score is None and self.spans is None:
            raise InvalidValueError("prediction must carry a score or spans")


# --- canonical text formats -------------------------------------------------
#
# Score: decimal with two fractional digits, e.g. "0.93".
# Spans: one line per span, `- "<substring>" — <minor|major>`;
#        the no-error case is the literal line `no errors`.

_NUMBER_RE = re.compile(r"[-+]?\d+(?:\.\d+)?")
_SPAN_LINE_RE = re.compile(r'^\s*-\s*"(.+)"\s*—\s*(minor|major)\s*$')

NO_ERRORS_LINE = "no errors"


def format_score(score: float) -> str:
    return f"{score:.2f}"


def parse_score_from_text(generated: str) -> float:
    """Extract the first decimal number from generated text, clamped to [0, 1]."""
    m = _NUMBER_RE.search(generated)
    if m is None:
        raise ParseError(f"no numeric score in {generated!r}")
    return min(1.0, max(0.0, float(m.group())))


def format_spans(spans: List[ErrorSpan], hypothesis: str) -> str:
    if not spans:
        return NO_ERRORS_LINE
    lines = []
    for s in sorted(spans):
        lines.append(f'- "{hypothesis[s.start:s.end]}" — {s.severity.value}')
    return "\n".join(lines)


def parse_spans_from_text(generated: str, hypothesis: str) -> List[ErrorSpan]:
    """Recover error spans from generated text.

    Each quoted substring is located in the hypothesis by leftmost match that
    does not overlap an already-placed span; unlocatable spans are dropped
    (counted in the log). Unparseable lines are skipped silently.
    """
    if not hypothesis:
        raise InvalidValueError("hypothesis must be non-empty")
    spans: List[ErrorSpan] = []
    dropped = 0
    for line in generated.splitlines():
        m = _SPAN_LINE_RE.match(line)
        if m is None:
            continue
        substring, severity = m.group(1), Severity(m.group(2))
        pos = _leftmost_free_match(hypothesis, substring, spans)
        if pos is None:
            dropped += 1
            continue
        spans.append(ErrorSpan(pos, pos + len(substring), severity))
    if dropped:
        logger.warning("dropped %d unlocatable span(s)", dropped)
    return canonicalize_spans(spans)


def _leftmost_free_match(hypothesis: str, substring: str, taken: List[ErrorSpan]) -> Optional[int]:
    start = 0
    while True:
        pos = hypothesis.find(substring, start)
        if pos == -1:
            return None
        end = pos + len(substring)
        if all(end <= t.start or pos >= t.end for t in taken):
            return pos
        start = pos + 1


def canonicalize_spans(spans: List[ErrorSpan]) -> List[ErrorSpan]:
    """Sort spans and merge overlaps, keeping the higher severity on overlap."""
    if not spans:
        return []
    merged: List[ErrorSpan] = []
    for s in sorted(spans):
        if merged and s.start < merged[-1].end:
            prev = merged[-1]
            severity = Severity.MAJOR if Severity.MAJOR in (prev.severity, s.severity) else Severity.MINOR
            merged[-1] = ErrorSpan(prev.start, max(prev.end, s.end), severity)
        else:
            merged.append(s)
    return merged


def spans_in_bounds(spans: List[ErrorSpan], hyp_len: int) -> bool:
    return all(0 <= s.start < s.end <= hyp_len for s in spans)
