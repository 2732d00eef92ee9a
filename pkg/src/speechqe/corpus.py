"""Corpus construction: subsampling, hypothesis generation, labeling, persistence.

Corpora are JSON-lines files (one example per line, sorted by segment and
system id) with a JSON manifest beside them; reloading the manifest plus the
raw data reproduces the corpus bit-exactly.
"""

from __future__ import annotations

import json
import logging
import os
import random
import statistics as pystats
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import stubs
from .core import (
    DataError,
    ErrorSpan,
    Hypothesis,
    MetricKind,
    QEExample,
    QualityLabel,
    Severity,
    SpeechQEError,
    SpeechSegment,
    Split,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class SizeError(SpeechQEError):
    pass


class CorpusFormatError(SpeechQEError):
    pass


@dataclass(frozen=True)
class STSystemHandle:
    id: str
    quality_tier: str
    generate: Callable[[SpeechSegment], Hypothesis]


@dataclass(frozen=True)
class MetricHandle:
    kind: MetricKind
    score: Callable[[Optional[str], str, str], float]  # (t, h, r) -> raw


@dataclass
class CorpusManifest:
    lang_pair: str
    domains: List[str]
    split_sizes: Dict[str, int]
    st_system_ids: List[str]
    metric_kinds: List[str]
    subsample_seed: int
    n_subsampled: int
    created_at: float
    schema_version: int = SCHEMA_VERSION
    frame_width: int = stubs.FRAME_WIDTH
    frame_rate_hz: float = stubs.FRAME_RATE_HZ

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        return cls(**d)


def _creation_time() -> float:
    # Honor SOURCE_DATE_EPOCH so repeated builds can be byte-identical.
    env = os.environ.get("SOURCE_DATE_EPOCH")
    return float(env) if env else time.time()


def subsample(segments: Sequence[SpeechSegment], n: int, seed: int) -> List[SpeechSegment]:
    """Seeded shuffle-then-prefix subsample, restored to original relative order."""
    if n > len(segments):
        raise SizeError(f"cannot subsample {n} from {len(segments)} segments")
    indices = list(range(len(segments)))
    random.Random(seed).shuffle(indices)
    keep = sorted(indices[:n])
    return [segments[i] for i in keep]


def generate_hypotheses(
    segments: Sequence[SpeechSegment],
    systems: Sequence[STSystemHandle],
) -> List[Tuple[SpeechSegment, Hypothesis]]:
    pairs: List[Tuple[SpeechSegment, Hypothesis]] = []
    failures = 0
    for system in systems:
        for segment in segments:
            try:
                hyp = system.generate(segment)
            except Exception:
                failures += 1
                logger.exception("ST system %s failed on segment %s", system.id, segment.id)
                continue
            pairs.append((segment, hyp))
    if failures:
        logger.warning("skipped %d failed (segment, system) pairs", failures)
    return pairs


def label_examples(
    pairs: Sequence[Tuple[SpeechSegment, Hypothesis]],
    metrics: Sequence[MetricHandle],
    gold_span_fn: Optional[Callable[[str, str], List[ErrorSpan]]] = None,
) -> List[QEExample]:
    examples: List[QEExample] = []
    dropped = 0
    for segment, hyp in pairs:
        if not segment.reference:
            raise DataError(f"segment {segment.id} has no reference")
        labels: Dict[MetricKind, QualityLabel] = {}
        try:
            for metric in metrics:
                raw = metric.score(segment.transcript, hyp.text, segment.reference)
                labels[metric.kind] = QualityLabel.from_raw(metric.kind, raw)
        except Exception:
            dropped += 1
            logger.exception("metric failed on example %s::%s", segment.id, hyp.st_system_id)
            continue
        gold_spans = gold_span_fn(hyp.text, segment.reference) if gold_span_fn and hyp.text else None
        examples.append(QEExample(segment=segment, hypothesis=hyp, labels=labels, gold_spans=gold_spans))
    if dropped:
        logger.warning("dropped %d examples on metric failure", dropped)
    return examples


def compute_statistics(corpus: Sequence[QEExample]) -> dict:
    """Per (lang_pair, split, st_system): counts, label mean/stdev, hypothesis length."""
    if not corpus:
        raise DataError("cannot compute statistics of an empty corpus")
    groups: Dict[Tuple[str, str, str], List[QEExample]] = {}
    for ex in corpus:
        key = (ex.segment.lang_pair, ex.segment.split.value, ex.hypothesis.st_system_id)
        groups.setdefault(key, []).append(ex)
    out = {}
    for (lang, split, system), members in sorted(groups.items()):
        label_stats = {}
        kinds = sorted({k for ex in members for k in ex.labels}, key=lambda k: k.value)
        for kind in kinds:
            vals = [ex.labels[kind].oriented_value for ex in members if kind in ex.labels]
            label_stats[kind.value] = {
                "mean": pystats.fmean(vals),
                "stdev": pystats.pstdev(vals),
            }
        out[f"{lang}/{split}/{system}"] = {
            "count": len(members),
            "labels": label_stats,
            "hyp_len_mean": pystats.fmean(len(ex.hypothesis.text) for ex in members),
        }
    return out


# --- persistence ------------------------------------------------------------

def _example_to_record(ex: QEExample) -> dict:
    return {
        "id": ex.example_id,
        "lang_pair": ex.segment.lang_pair,
        "domain": ex.segment.domain,
        "split": ex.segment.split.value,
        "audio_path": f"synth://{ex.segment.id}",
        "transcript": ex.segment.transcript,
        "reference": ex.segment.reference,
        "hypothesis": ex.hypothesis.text,
        "st_system": ex.hypothesis.st_system_id,
        "labels": {
            kind.value: {"raw": label.raw_value, "oriented": label.oriented_value}
            for kind, label in sorted(ex.labels.items(), key=lambda kv: kv[0].value)
        },
        "gold_spans": None if ex.gold_spans is None else [
            {"start": s.start, "end": s.end, "severity": s.severity.value}
            for s in ex.gold_spans
        ],
    }


def _record_to_example(rec: dict) -> QEExample:
    segment_id = rec["id"].rsplit("::", 1)[0]
    segment = SpeechSegment(
        id=segment_id,
        audio=stubs.synthesize_features(rec["transcript"]),
        transcript=rec["transcript"],
        reference=rec["reference"],
        lang_pair=rec["lang_pair"],
        domain=rec["domain"],
        split=Split(rec["split"]),
        frame_rate_hz=stubs.FRAME_RATE_HZ,
    )
    labels = {
        MetricKind(kind): QualityLabel(
            metric_kind=MetricKind(kind),
            raw_value=v["raw"],
            oriented_value=v["oriented"],
        )
        for kind, v in rec["labels"].items()
    }
    gold = rec.get("gold_spans")
    gold_spans = None if gold is None else [
        ErrorSpan(s["start"], s["end"], Severity(s["severity"])) for s in gold
    ]
    return QEExample(segment=segment, hypothesis=Hypothesis(rec["hypothesis"], rec["st_system"]),
                     labels=labels, gold_spans=gold_spans)


def write_corpus(corpus: Sequence[QEExample], path: str,
                 manifest: Optional[CorpusManifest] = None) -> None:
    ordered = sorted(corpus, key=lambda ex: (ex.segment.id, ex.hypothesis.st_system_id))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for ex in ordered:
            f.write(json.dumps(_example_to_record(ex), ensure_ascii=False, sort_keys=True))
            f.write("\n")
    os.replace(tmp, path)
    if manifest is not None:
        write_manifest(manifest, manifest_path(path))


def manifest_path(corpus_path: str) -> str:
    return f"{corpus_path}.manifest.json"


def write_manifest(manifest: CorpusManifest, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, ensure_ascii=False, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> CorpusManifest:
    with open(path, encoding="utf-8") as f:
        return CorpusManifest.from_dict(json.load(f))


def read_corpus(path: str) -> List[QEExample]:
    manifest_file = manifest_path(path)
    if os.path.exists(manifest_file):
        manifest = read_manifest(manifest_file)
        if manifest.schema_version != SCHEMA_VERSION:
            raise CorpusFormatError(
                f"{path}: schema version {manifest.schema_version} != {SCHEMA_VERSION}")
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                examples.append(_record_to_example(json.loads(line)))
            except (KeyError, ValueError, TypeError) as e:
                raise CorpusFormatError(f"{path}:{lineno}: malformed example ({e})") from e
    return examples


def build_manifest(
    corpus: Sequence[QEExample],
    subsample_seed: int,
    n_subsampled: int,
) -> CorpusManifest:
    split_sizes: Dict[str, int] = {}
    for ex in corpus:
        split_sizes[ex.segment.split.value] = split_sizes.get(ex.segment.split.value, 0) + 1
    return CorpusManifest(
        lang_pair=corpus[0].segment.lang_pair if corpus else "",
        domains=sorted({ex.segment.domain for ex in corpus}),
        split_sizes=split_sizes,
        st_system_ids=sorted({ex.hypothesis.st_system_id for ex in corpus}),
        metric_kinds=sorted({k.value for ex in corpus for k in ex.labels}),
        subsample_seed=subsample_seed,
        n_subsampled=n_subsampled,
        created_at=_creation_time(),
    )
