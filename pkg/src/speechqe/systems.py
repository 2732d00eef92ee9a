"""Cascaded speech-QE systems: ASR into text-QE, plus the gold-transcript upper bound.

Both cascaded and end-to-end systems expose the same scoring surface
(id, score(audio, hypothesis), optional detect_spans) so evaluation treats
them uniformly. Intermediate ASR transcripts are always kept on the
prediction for later qualitative analysis.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Protocol, Sequence

import numpy as np

from .core import (
    ErrorSpan,
    QEExample,
    Severity,
    SpeechQEError,
    SystemPrediction,
)


class StageError(SpeechQEError):
    """A cascaded component failed; `stage` names the failing component."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ASRHandle:
    id: str
    transcribe: Callable[[np.ndarray], str]
    quality_tier: str = "unknown"


@dataclass(frozen=True)
class TextQEHandle:
    id: str
    score: Callable[[str, str], float]  # (t, h) -> score
    detect_spans: Optional[Callable[[str, str], List[ErrorSpan]]] = None


class SpeechQESystem(Protocol):
    id: str

    def score(self, audio: np.ndarray, hypothesis: str,
              example_id: str = "") -> Optional[SystemPrediction]: ...


def cascaded_score(
    audio: np.ndarray,
    hypothesis: str,
    asr: ASRHandle,
    qe: TextQEHandle,
    example_id: str = "",
    system_id: str = "",
) -> SystemPrediction:
    if audio.shape[0] == 0:
        raise StageError("asr", ValueError("empty audio"))
    try:
        transcript = asr.transcribe(audio)
    except Exception as e:
        raise StageError("asr", e) from e
    try:
        score = qe.score(transcript, hypothesis)
    except Exception as e:
        raise StageError("qe", e) from e
    return SystemPrediction(
        example_id=example_id,
        system_id=system_id or f"{asr.id}+{qe.id}",
        score=score,
        raw_output=transcript,
    )


def gold_cascaded_score(
    transcript: str,
    hypothesis: str,
    qe: TextQEHandle,
    example_id: str = "",
    system_id: str = "",
) -> SystemPrediction:
    """Cascade upper bound: the text-QE run directly on the gold transcript."""
    try:
        score = qe.score(transcript, hypothesis)
    except Exception as e:
        raise StageError("qe", e) from e
    return SystemPrediction(
        example_id=example_id,
        system_id=system_id or f"gold+{qe.id}",
        score=score,
        raw_output=transcript,
    )


def cascaded_detect_spans(
    audio: np.ndarray,
    hypothesis: str,
    asr: ASRHandle,
    esd: TextQEHandle,
    example_id: str = "",
    system_id: str = "",
) -> SystemPrediction:
    if esd.detect_spans is None:
        raise SpeechQEError(f"text-QE handle {esd.id} has no span detector")
    if audio.shape[0] == 0:
        raise StageError("asr", ValueError("empty audio"))
    try:
        transcript = asr.transcribe(audio)
    except Exception as e:
        raise StageError("asr", e) from e
    try:
        spans = esd.detect_spans(transcript, hypothesis)
    except Exception as e:
        raise StageError("qe", e) from e
    return SystemPrediction(
        example_id=example_id,
        system_id=system_id or f"{asr.id}+{esd.id}",
        spans=spans,
        raw_output=transcript,
    )


@dataclass(frozen=True)
class CascadedSystem:
    """SpeechQESystem built from an (ASR, text-QE) pair."""

    asr: ASRHandle
    qe: TextQEHandle

    @property
    def id(self) -> str:
        return f"{self.asr.id}+{self.qe.id}"

    def score(self, audio: np.ndarray, hypothesis: str,
              example_id: str = "") -> SystemPrediction:
        return cascaded_score(audio, hypothesis, self.asr, self.qe,
                              example_id=example_id, system_id=self.id)

    def detect_spans(self, audio: np.ndarray, hypothesis: str,
                     example_id: str = "") -> SystemPrediction:
        return cascaded_detect_spans(audio, hypothesis, self.asr, self.qe,
                                     example_id=example_id, system_id=self.id)


@dataclass(frozen=True)
class GoldCascadeSystem:
    """Scores against the gold transcript; needs the example, not just audio."""

    qe: TextQEHandle

    @property
    def id(self) -> str:
        return f"gold+{self.qe.id}"

    def score_example(self, example: QEExample) -> SystemPrediction:
        return gold_cascaded_score(
            example.segment.transcript, example.hypothesis.text, self.qe,
            example_id=example.example_id, system_id=self.id)


def score_corpus(system, corpus: Sequence[QEExample]) -> List[SystemPrediction]:
    """Run one system over a corpus; unscoreable examples are skipped."""
    predictions = []
    for ex in corpus:
        if hasattr(system, "score_example"):
            pred = system.score_example(ex)
        else:
            pred = system.score(ex.segment.audio, ex.hypothesis.text,
                                example_id=ex.example_id)
        if pred is not None:
            predictions.append(pred)
    return predictions


# --- prediction persistence -------------------------------------------------

def write_predictions(predictions: Sequence[SystemPrediction], path: str,
                      cascaded: bool = False) -> None:
    """Write predictions as JSONL; cascaded systems also get a transcript field."""
    ordered = sorted(predictions, key=lambda p: p.example_id)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for p in ordered:
            rec = {
                "example_id": p.example_id,
                "system_id": p.system_id,
                "score": p.score,
                "spans": None if p.spans is None else [
                    {"start": s.start, "end": s.end, "severity": s.severity.value}
                    for s in p.spans
                ],
                "raw_output": p.raw_output,
            }
            if cascaded:
                rec["transcript"] = p.raw_output
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            f.write("\n")
    os.replace(tmp, path)


def read_predictions(path: str) -> List[SystemPrediction]:
    predictions = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            spans = rec.get("spans")
            predictions.append(SystemPrediction(
                example_id=rec["example_id"],
                system_id=rec["system_id"],
                score=rec.get("score"),
                spans=None if spans is None else [
                    ErrorSpan(s["start"], s["end"], Severity(s["severity"])) for s in spans
                ],
                raw_output=rec.get("raw_output"),
            ))
    return predictions
