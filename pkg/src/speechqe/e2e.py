"""End-to-end speech-QE model: frozen speech encoder, convolutional modality
adapter with a bottleneck, and a small decoder-only language model whose
attention projections can carry low-rank (LoRA) deltas.

The desk-scale encoder is a frozen random-weight conv stack whose weights are
derived from a fixed seed, so checkpoints and tests are reproducible. The LM
is trainable from scratch and consumes a spliced sequence of text-token and
speech embeddings.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    DataError,
    ParseError,
    SystemPrediction,
    parse_score_from_text,
    parse_spans_from_text,
)

logger = logging.getLogger(__name__)

PROMPT_VERSION = "v1"


class TemplateError(DataError):
    pass


class Task(str, Enum):
    SPEECHQE = "speechqe"
    ASR = "asr"
    ST = "st"
    SPEECH_ESD = "speech_esd"
    TEXTQE = "textqe"  # text-only baseline, no audio placeholder


def load_prompt(task: Task, version: str = PROMPT_VERSION) -> str:
    ref = resources.files("speechqe").joinpath(f"prompts/{version}/{task.value}.txt")
    return ref.read_text(encoding="utf-8")


# --- tokenizer --------------------------------------------------------------

PAD, BOS, EOS, UNK = 0, 1, 2, 3

_CHARS = "".join(chr(c) for c in range(32, 127)) + "\n—áéíóúüñÁÉÍÓÚÜÑäöüßÄÖÜ"


class CharTokenizer:
    """Fixed character-level vocabulary shared by all desk-scale models."""

    def __init__(self):
        self.chars = _CHARS
        self.char_to_id = {c: i + 4 for i, c in enumerate(self.chars)}

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 4

    def encode(self, text: str) -> List[int]:
        return [self.char_to_id.get(c, UNK) for c in text]

    def decode(self, ids: List[int]) -> str:
        return "".join(self.chars[i - 4] for i in ids if i >= 4)


# --- speech encoder ---------------------------------------------------------

class SpeechEncoder(nn.Module):
    """Frozen random-weight conv stack standing in for a pretrained encoder."""

    def __init__(self, feat_dim: int, enc_dim: int, seed: int):
        super().__init__()
        self.conv1 = nn.Conv1d(feat_dim, enc_dim, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(enc_dim, enc_dim, kernel_size=3, padding=1)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p.shape[-1] if p.dim() == 1 else int(np.prod(p.shape[1:]))
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(max(fan_in, 1)))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, feat_dim) -> (B, T, enc_dim)
        h = x.transpose(1, 2)
        h = F.gelu(self.conv1(h))
        h = self.conv2(h)
        return h.transpose(1, 2)


# --- modality adapter -------------------------------------------------------

@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int
    lm_dim: int
    channels: int = 32
    kernel_sizes: Tuple[int, int, int] = (3, 3, 3)
    strides: Tuple[int, int, int] = (2, 2, 2)
    paddings: Tuple[int, int, int] = (1, 1, 1)
    bottleneck_dim: int = 16


class ModalityAdapter(nn.Module):
    """Three 1-D convolutions (time compression), a residual bottleneck, and a
    final projection into the LM embedding space."""

    def __init__(self, config: AdapterConfig):
        super().__init__()
        self.config = config
        convs = []
        in_ch = config.in_dim
        for k, s, p in zip(config.kernel_sizes, config.strides, config.paddings):
            convs.append(nn.Conv1d(in_ch, config.channels, kernel_size=k, stride=s, padding=p))
            in_ch = config.channels
        self.convs = nn.ModuleList(convs)
        self.bottleneck_down = nn.Linear(config.channels, config.bottleneck_dim)
        self.bottleneck_up = nn.Linear(config.bottleneck_dim, config.channels)
        self.proj = nn.Linear(config.channels, config.lm_dim)
        # Zero-init the up-projection: the adapter starts as conv + projection
        # with an inactive bottleneck branch.
        nn.init.zeros_(self.bottleneck_up.weight)
        nn.init.zeros_(self.bottleneck_up.bias)

    def output_length(self, length: int) -> int:
        for k, s, p in zip(self.config.kernel_sizes, self.config.strides, self.config.paddings):
            length = max(length, k - 2 * p)  # mirror internal right-padding
            length = (length + 2 * p - k) // s + 1
        return length

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, in_dim) -> (B, S, lm_dim)
        h = x.transpose(1, 2)
        for conv, k, p in zip(self.convs, self.config.kernel_sizes, self.config.paddings):
            min_len = k - 2 * p
            if h.shape[-1] < min_len:
                h = F.pad(h, (0, min_len - h.shape[-1]))
            h = F.gelu(conv(h))
        h = h.transpose(1, 2)
        h = h + self.bottleneck_up(F.gelu(self.bottleneck_down(h)))
        return self.proj(h)


# --- LoRA -------------------------------------------------------------------

@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 16
    alpha: float = 32.0
    targets: Tuple[str, ...] = ("q", "k", "v", "o")

    def __post_init__(self):
        bad = set(self.targets) - {"q", "k", "v", "o"}
        if bad:
            raise ValueError(f"unknown LoRA targets: {sorted(bad)}")


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank delta (zero at init)."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        in_f, out_f = base.in_features, base.out_features
        self.lora_a = nn.Parameter(torch.randn(rank, in_f) / math.sqrt(in_f))
        self.lora_b = nn.Parameter(torch.zeros(out_f, rank))
        self.scaling = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)


# --- tiny decoder-only LM ---------------------------------------------------

@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 1024


class SelfAttention(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        self.q_proj = nn.Linear(config.d_model, config.d_model)
        self.k_proj = nn.Linear(config.d_model, config.d_model)
        self.v_proj = nn.Linear(config.d_model, config.d_model)
        self.o_proj = nn.Linear(config.d_model, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        def split(t):
            return t.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        out = out.transpose(1, 2).reshape(b, l, d)
        return self.o_proj(out)


class Block(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = SelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, config.d_ff),
            nn.GELU(),
            nn.Linear(config.d_ff, config.d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TinyLM(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        self.embed_tokens = nn.Embedding(config.vocab_size, config.d_model)
        self.embed_pos = nn.Embedding(config.max_len, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size)

    def forward(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        # inputs_embeds: (B, L, d_model) -> logits (B, L, vocab)
        l = inputs_embeds.shape[1]
        if l > self.config.max_len:
            raise DataError(f"sequence length {l} exceeds max_len {self.config.max_len}")
        pos = self.embed_pos(torch.arange(l, device=inputs_embeds.device))
        h = inputs_embeds + pos
        for block in self.blocks:
            h = block(h)
        return self.lm_head(self.ln_f(h))


_PROJ_ATTR = {"q": "q_proj", "k": "k_proj", "v": "v_proj", "o": "o_proj"}


def apply_lora(lm: TinyLM, config: LoRAConfig) -> None:
    """Wrap the targeted attention projections; freezes every base LM weight."""
    for p in lm.parameters():
        p.requires_grad_(False)
    for block in lm.blocks:
        for target in config.targets:
            attr = _PROJ_ATTR[target]
            base = getattr(block.attn, attr)
            if isinstance(base, LoRALinear):
                continue
            setattr(block.attn, attr, LoRALinear(base, config.rank, config.alpha))


def lora_parameters(lm: TinyLM):
    for name, p in lm.named_parameters():
        if "lora_a" in name or "lora_b" in name:
            yield p


# --- full model -------------------------------------------------------------

@dataclass(frozen=True)
class E2EConfig:
    feat_dim: int
    enc_dim: int
    encoder_seed: int
    adapter: AdapterConfig
    lm: LMConfig
    prompt_version: str = PROMPT_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "E2EConfig":
        d = dict(d)
        a = dict(d.pop("adapter"))
        for key in ("kernel_sizes", "strides", "paddings"):
            a[key] = tuple(a[key])
        lm = dict(d.pop("lm"))
        return cls(adapter=AdapterConfig(**a), lm=LMConfig(**lm), **d)


class E2EModel(nn.Module):
    """Speech encoder (frozen) -> modality adapter -> tiny LM."""

    def __init__(self, config: E2EConfig):
        super().__init__()
        self.config = config
        self.tokenizer = CharTokenizer()
        if config.lm.vocab_size != self.tokenizer.vocab_size:
            raise DataError("LM vocab size must match the character tokenizer")
        self.encoder = SpeechEncoder(config.feat_dim, config.enc_dim, config.encoder_seed)
        self.adapter = ModalityAdapter(config.adapter)
        self.lm = TinyLM(config.lm)
        self.lora_config: Optional[LoRAConfig] = None

    def enable_lora(self, config: LoRAConfig) -> None:
        apply_lora(self.lm, config)
        self.lora_config = config

    def encode_audio(self, audio) -> torch.Tensor:
        """(T, feat_dim) features -> (S, lm_dim) speech embeddings."""
        x = torch.as_tensor(np.asarray(audio), dtype=torch.float32).unsqueeze(0)
        states = self.encoder(x)
        return self.adapter(states).squeeze(0)


@dataclass
class AssembledInput:
    embeds: torch.Tensor  # (L, d_model)
    labels: torch.Tensor  # (L,) target token ids, -100 elsewhere
    target_mask: torch.Tensor  # (L,) bool

    @property
    def length(self) -> int:
        return self.embeds.shape[0]


_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


def assemble_input(
    model: E2EModel,
    task: Task,
    audio: Optional[np.ndarray],
    text_fields: Dict[str, str],
    target: Optional[str] = None,
) -> AssembledInput:
    """Splice speech embeddings into the tokenized prompt at {audio}.

    The label vector marks response positions only (-100 everywhere else);
    when a target is given its tokens plus EOS are appended as the response.
    """
    template = load_prompt(task, model.config.prompt_version)
    names = set(_PLACEHOLDER_RE.findall(template))
    for name in names - {"audio"}:
        if not text_fields.get(name):
            raise TemplateError(f"unbound or empty template field {name!r} for task {task.value}")
    tok = model.tokenizer
    emb = model.lm.embed_tokens

    if "audio" in names:
        if audio is None:
            raise TemplateError(f"task {task.value} requires audio")
        prefix_t, suffix_t = template.split("{audio}", 1)
        speech = model.encode_audio(audio)
        parts = [
            emb(torch.tensor([BOS] + tok.encode(_fill(prefix_t, text_fields)))),
            speech,
            emb(torch.tensor(tok.encode(_fill(suffix_t, text_fields)))) if suffix_t else
            torch.zeros(0, model.config.lm.d_model),
        ]
    else:
        parts = [emb(torch.tensor([BOS] + tok.encode(_fill(template, text_fields))))]
    prompt_len = sum(p.shape[0] for p in parts)

    labels = [-100] * prompt_len
    if target is not None:
        target_ids = tok.encode(target) + [EOS]
        parts.append(emb(torch.tensor(target_ids)))
        labels.extend(target_ids)
    labels_t = torch.tensor(labels, dtype=torch.long)
    return AssembledInput(
        embeds=torch.cat(parts, dim=0),
        labels=labels_t,
        target_mask=labels_t != -100,
    )


def _fill(fragment: str, text_fields: Dict[str, str]) -> str:
    def sub(m):
        return text_fields[m.group(1)]
    return _PLACEHOLDER_RE.sub(sub, fragment)


@torch.no_grad()
def generate(
    model: E2EModel,
    audio: Optional[np.ndarray],
    task: Task,
    text_fields: Dict[str, str],
    max_new_tokens: int = 500,
    temperature: float = 0.1,
    seed: Optional[int] = None,
) -> str:
    """Autoregressive decoding: greedy at temperature 0, else seeded sampling."""
    model.eval()
    asm = assemble_input(model, task, audio, text_fields)
    embeds = asm.embeds
    gen: Optional[torch.Generator] = None
    if temperature > 0:
        gen = torch.Generator()
        gen.manual_seed(seed if seed is not None else torch.seed() % (2**63))
    out_ids: List[int] = []
    for _ in range(max_new_tokens):
        logits = model.lm(embeds.unsqueeze(0))[0, -1]
        if temperature <= 0:
            next_id = int(torch.argmax(logits))
        else:
            probs = F.softmax(logits / temperature, dim=-1)
            next_id = int(torch.multinomial(probs, 1, generator=gen))
        if next_id == EOS:
            break
        out_ids.append(next_id)
        embeds = torch.cat([embeds, model.lm.embed_tokens(torch.tensor([next_id]))], dim=0)
    return model.tokenizer.decode(out_ids)


def e2e_score(
    model: E2EModel,
    audio: np.ndarray,
    hypothesis: str,
    system_id: str = "e2e",
    example_id: str = "",
    temperature: float = 0.0,
    seed: Optional[int] = None,
) -> Optional[SystemPrediction]:
    """Score via generation; returns None (a missing prediction) if no number parses."""
    text = generate(model, audio, Task.SPEECHQE, {"hypothesis": hypothesis},
                    temperature=temperature, seed=seed)
    try:
        score = parse_score_from_text(text)
    except ParseError:
        logger.warning("unparseable score output for %s: %r", example_id, text)
        return None
    return SystemPrediction(example_id=example_id, system_id=system_id,
                            score=score, raw_output=text)


def e2e_detect_spans(
    model: E2EModel,
    audio: np.ndarray,
    hypothesis: str,
    system_id: str = "e2e",
    example_id: str = "",
    temperature: float = 0.0,
    seed: Optional[int] = None,
) -> SystemPrediction:
    text = generate(model, audio, Task.SPEECH_ESD, {"hypothesis": hypothesis},
                    temperature=temperature, seed=seed)
    spans = parse_spans_from_text(text, hypothesis)
    return SystemPrediction(example_id=example_id, system_id=system_id,
                            spans=spans, raw_output=text)


@dataclass
class E2ESystem:
    """SpeechQESystem wrapper around a trained end-to-end model."""

    model: E2EModel
    id: str = "e2e"
    temperature: float = 0.0
    seed: Optional[int] = None

    def score(self, audio: np.ndarray, hypothesis: str,
              example_id: str = "") -> Optional[SystemPrediction]:
        return e2e_score(self.model, audio, hypothesis, system_id=self.id,
                         example_id=example_id, temperature=self.temperature, seed=self.seed)

    def detect_spans(self, audio: np.ndarray, hypothesis: str,
                     example_id: str = "") -> SystemPrediction:
        return e2e_detect_spans(self.model, audio, hypothesis, system_id=self.id,
                                example_id=example_id, temperature=self.temperature,
                                seed=self.seed)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str, model: E2EModel, manifest: dict) -> None:
    os.makedirs(path, exist_ok=True)
    cfg = {
        "model": model.config.to_dict(),
        "lora": None if model.lora_config is None else dataclasses.asdict(model.lora_config),
    }
    _atomic_json(os.path.join(path, "config.json"), cfg)
    tmp = os.path.join(path, "model.pt.tmp")
    torch.save(model.state_dict(), tmp)
    os.replace(tmp, os.path.join(path, "model.pt"))
    _atomic_json(os.path.join(path, "manifest.json"), manifest)


def load_checkpoint(path: str) -> Tuple[E2EModel, dict]:
    with open(os.path.join(path, "config.json"), encoding="utf-8") as f:
        cfg = json.load(f)
    model = E2EModel(E2EConfig.from_dict(cfg["model"]))
    if cfg.get("lora"):
        lora = dict(cfg["lora"])
        lora["targets"] = tuple(lora["targets"])
        model.enable_lora(LoRAConfig(**lora))
    state = torch.load(os.path.join(path, "model.pt"), weights_only=True)
    model.load_state_dict(state)
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    return model, manifest


def _atomic_json(path: str, doc: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, path)
