"""Desk-scale stand-ins for the heavyweight components.

Audio features are synthesized from text: each character maps to a fixed
pseudo-random embedding repeated for a few frames, so a nearest-neighbor
decoder can recover the transcript exactly. ST systems are noise-injecting
copies of the reference, ASR stubs are character-corrupting decoders, and
the reference metric is a character n-gram similarity in [0, 1].
"""

from __future__ import annotations

import difflib
import random
import string
import zlib
from typing import Callable, List, Optional

import numpy as np

from .core import ErrorSpan, Hypothesis, Severity, SpeechSegment, Split

FRAME_WIDTH = 16
FRAMES_PER_CHAR = 2
FRAME_RATE_HZ = 100.0

# Characters the synthetic audio channel can carry. Includes the accented
# letters that show up in Spanish/German fixtures.
AUDIO_CHARSET = (
    string.ascii_letters + string.digits + " .,;:!?'\"-"
    + "áéíóúüñÁÉÍÓÚÜÑäöüßÄÖÜ"
)


def _char_embedding(ch: str) -> np.ndarray:
    seed = zlib.crc32(ch.encode("utf-8"))
    rng = np.random.default_rng(seed)
    return rng.standard_normal(FRAME_WIDTH).astype(np.float32)


_EMBEDDINGS = {ch: _char_embedding(ch) for ch in AUDIO_CHARSET}
_EMBED_MATRIX = np.stack([_EMBEDDINGS[ch] for ch in AUDIO_CHARSET])


def synthesize_features(text: str) -> np.ndarray:
    """Deterministic (frames, FRAME_WIDTH) features for a transcript."""
    if not text:
        raise ValueError("cannot synthesize features for empty text")
    frames = []
    for ch in text:
        emb = _EMBEDDINGS.get(ch, _EMBEDDINGS[" "])
        frames.extend([emb] * FRAMES_PER_CHAR)
    return np.stack(frames)


def decode_features(audio: np.ndarray) -> str:
    """Nearest-neighbor inverse of synthesize_features."""
    chars = []
    for i in range(0, audio.shape[0], FRAMES_PER_CHAR):
        frame = audio[i:i + FRAMES_PER_CHAR].mean(axis=0)
        idx = int(np.argmin(((_EMBED_MATRIX - frame) ** 2).sum(axis=1)))
        chars.append(AUDIO_CHARSET[idx])
    return "".join(chars)


# --- text corruption --------------------------------------------------------

def corrupt_text(text: str, rate: float, seed: int) -> str:
    """Substitute letters at the given rate; deterministic per (text, seed)."""
    if rate <= 0.0:
        return text
    rng = random.Random(seed ^ zlib.crc32(text.encode("utf-8")))
    out = []
    for ch in text:
        if ch.isalpha() and rng.random() < rate:
            out.append(rng.choice(string.ascii_lowercase))
        else:
            out.append(ch)
    return "".join(out)


# --- ASR stubs --------------------------------------------------------------

def perfect_asr_transcribe(audio: np.ndarray) -> str:
    return decode_features(audio)


def make_corrupting_asr_transcribe(rate: float, seed: int) -> Callable[[np.ndarray], str]:
    def transcribe(audio: np.ndarray) -> str:
        return corrupt_text(decode_features(audio), rate, seed)
    return transcribe


# --- toy metrics ------------------------------------------------------------

def char_ngram_similarity(a: str, b: str, n: int = 3) -> float:
    """Dice coefficient over character n-gram multisets, in [0, 1]."""
    def grams(s: str):
        padded = f" {s} "
        counts = {}
        for i in range(max(0, len(padded) - n + 1)):
            g = padded[i:i + n]
            counts[g] = counts.get(g, 0) + 1
        return counts

    ga, gb = grams(a), grams(b)
    total = sum(ga.values()) + sum(gb.values())
    if total == 0:
        return 1.0 if a == b else 0.0
    overlap = sum(min(c, gb.get(g, 0)) for g, c in ga.items())
    return 2.0 * overlap / total


def reference_metric_score(t: Optional[str], h: str, r: str) -> float:
    """Toy reference-based metric playing the xcomet_like role."""
    return char_ngram_similarity(h, r)


def overlap_qe_score(t: str, h: str) -> float:
    """Toy reference-free QE: source/hypothesis n-gram overlap."""
    return char_ngram_similarity(t, h)


# --- gold error spans via diff ----------------------------------------------

MAJOR_SPAN_MIN_LEN = 5  # regions longer than 4 characters count as major


def diff_error_spans(hypothesis: str, reference: str) -> List[ErrorSpan]:
    """Insertion/substitution regions of the hypothesis relative to the reference."""
    spans: List[ErrorSpan] = []
    sm = difflib.SequenceMatcher(a=reference, b=hypothesis, autojunk=False)
    for op, _i1, _i2, j1, j2 in sm.get_opcodes():
        if op in ("replace", "insert") and j2 > j1:
            severity = Severity.MAJOR if (j2 - j1) >= MAJOR_SPAN_MIN_LEN else Severity.MINOR
            spans.append(ErrorSpan(j1, j2, severity))
    return spans


def overlap_qe_detect_spans(t: str, h: str) -> List[ErrorSpan]:
    """Toy text ESD: diff the hypothesis against the (transcribed) source."""
    return diff_error_spans(h, t)


# --- ST system stubs --------------------------------------------------------

def make_noise_translator(system_id: str, rate: float, seed: int):
    """ST stub: the reference with character noise at the given rate."""
    def generate(segment: SpeechSegment) -> Hypothesis:
        return Hypothesis(text=corrupt_text(segment.reference, rate, seed), st_system_id=system_id)
    return generate


def make_echo_translator(system_id: str):
    """ST stub returning the transcript verbatim (identity-echo contract)."""
    def generate(segment: SpeechSegment) -> Hypothesis:
        return Hypothesis(text=segment.transcript, st_system_id=system_id)
    return generate


# --- synthetic segments -----------------------------------------------------

_WORDS = (
    "casa perro tiempo ciudad agua libro camino fuerza mundo noche "
    "campo premio nombre carta fuego viento playa monte valle puente "
    "voz luz mar sol rio pan flor cielo tierra sombra"
).split()


def make_synthetic_segments(
    n: int,
    seed: int,
    lang_pair: str = "es2en",
    domain: str = "synthetic",
    split: Split = Split.TEST,
    min_words: int = 4,
    max_words: int = 9,
) -> List[SpeechSegment]:
    """Deterministic word-salad segments; the toy 'translation' echoes the transcript."""
    rng = random.Random(seed)
    segments = []
    for i in range(n):
        text = " ".join(rng.choice(_WORDS) for _ in range(rng.randint(min_words, max_words)))
        segments.append(SpeechSegment(
            id=f"{domain}-{seed}-{i:05d}",
            audio=synthesize_features(text),
            transcript=text,
            reference=text,
            lang_pair=lang_pair,
            domain=domain,
            split=split,
            frame_rate_hz=FRAME_RATE_HZ,
        ))
    return segments
