"""Multitask LM training: single-phase and two-phase strategies, freeze
regimes, and the text-only QE baseline.

Task mixing is per-batch categorical sampling; the optimizer is AdamW with a
constant learning rate and global-norm gradient clipping. A NaN loss aborts
the run, leaving the last good checkpoint on disk.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .core import DataError, MetricKind, QEExample, SpeechQEError, format_score, format_spans
from .e2e import (
    AssembledInput,
    E2EModel,
    LoRAConfig,
    Task,
    assemble_input,
    generate,
    lora_parameters,
    save_checkpoint,
)
from .systems import TextQEHandle
from .core import parse_score_from_text

logger = logging.getLogger(__name__)

GRAD_CLIP_NORM = 1.0
SNAPSHOT_INTERVAL = 50


class TrainingDivergedError(SpeechQEError):
    def __init__(self, step: int, checkpoint: Optional[str]):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    total_steps: int
    learning_rate: float = 5e-5
    weight_decay: float = 0.05
    batch_size: int = 8
    lora: Optional[LoRAConfig] = None
    adapter_frozen: bool = False
    # Full-LM updates are a desk-scale regime: the tiny LM starts from
    # scratch, so LoRA-only updates cannot reach high-confidence outputs.
    train_lm_full: bool = False
    tasks: Tuple[str, ...] = ("asr", "st", "speechqe")
    task_mixing_weights: Optional[Dict[str, float]] = None
    seed: int = 0

    def __post_init__(self):
        if not self.tasks:
            raise DataError("tasks must be non-empty")
        if self.total_steps <= 0:
            raise DataError("total_steps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lora = d.get("lora")
        if lora:
            lora = dict(lora)
            if "targets" in lora:
                lora["targets"] = tuple(lora["targets"])
            d["lora"] = LoRAConfig(**lora)
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


class TaskSampler:
    """Seeded categorical sampler over tasks, normalized mixing weights."""

    def __init__(self, tasks: Sequence[str], weights: Optional[Dict[str, float]], seed: int):
        self.tasks = list(tasks)
        if weights is None:
            w = [1.0] * len(self.tasks)
        else:
            w = [weights.get(t, 0.0) for t in self.tasks]
        total = sum(w)
        if total <= 0:
            raise DataError("task mixing weights must have positive mass")
        self.weights = [x / total for x in w]
        self.rng = random.Random(seed)

    def sample(self) -> str:
        return self.rng.choices(self.tasks, weights=self.weights, k=1)[0]


def make_task_example(task: Task, example: QEExample) -> Tuple[Dict[str, str], str]:
    """(prompt text fields, target string) for one training instance."""
    seg = example.segment
    if task == Task.ASR:
        if not seg.transcript:
            raise DataError("asr task requires field 'transcript'")
        return {}, seg.transcript
    if task == Task.ST:
        if not seg.reference:
            raise DataError("st task requires field 'reference'")
        return {}, seg.reference
    if task == Task.SPEECHQE:
        label = _score_label(example)
        if label is None:
            raise DataError("speechqe task requires field 'labels'")
        return {"hypothesis": example.hypothesis.text}, format_score(label)
    if task == Task.SPEECH_ESD:
        if example.gold_spans is None:
            raise DataError("speech_esd task requires field 'gold_spans'")
        return ({"hypothesis": example.hypothesis.text},
                format_spans(example.gold_spans, example.hypothesis.text))
    if task == Task.TEXTQE:
        label = _score_label(example)
        if label is None:
            raise DataError("textqe task requires field 'labels'")
        return ({"transcript": seg.transcript, "hypothesis": example.hypothesis.text},
                format_score(label))
    raise DataError(f"unknown task {task!r}")


def _score_label(example: QEExample) -> Optional[float]:
    for kind in (MetricKind.XCOMET_LIKE, MetricKind.CUSTOM, MetricKind.HUMAN_DA,
                 MetricKind.METRICX_LIKE):
        if kind in example.labels:
            return example.labels[kind].oriented_value
    return None


@dataclass
class Batch:
    embeds: torch.Tensor  # (B, L, D), right-padded with zeros
    labels: torch.Tensor  # (B, L), -100 on prompt and padding


def collate(items: Sequence[AssembledInput], d_model: int) -> Batch:
    max_len = max(it.length for it in items)
    embeds = torch.zeros(len(items), max_len, d_model)
    labels = torch.full((len(items), max_len), -100, dtype=torch.long)
    for i, it in enumerate(items):
        embeds[i, :it.length] = it.embeds
        labels[i, :it.length] = it.labels
    return Batch(embeds=embeds, labels=labels)


def build_batch(model: E2EModel, task: Task, examples: Sequence[QEExample]) -> Batch:
    items = []
    for ex in examples:
        fields, target = make_task_example(task, ex)
        audio = None if task == Task.TEXTQE else ex.segment.audio
        items.append(assemble_input(model, task, audio, fields, target=target))
    return collate(items, model.config.lm.d_model)


def lm_loss(model: E2EModel, batch: Batch) -> torch.Tensor:
    """Mean next-token NLL over target-masked positions only."""
    if not (batch.labels != -100).any():
        raise DataError("batch has no target positions")
    logits = model.lm(batch.embeds)
    return F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]),
        batch.labels[:, 1:].reshape(-1),
        ignore_index=-100,
    )


# --- freeze regimes ---------------------------------------------------------

def configure_trainable(model: E2EModel, config: TrainConfig) -> List[torch.nn.Parameter]:
    """Apply the freeze regime: encoder always frozen, adapter per config,
    LM base frozen with LoRA deltas trainable iff a LoRA config is present."""
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    for p in model.adapter.parameters():
        p.requires_grad_(not config.adapter_frozen)
    if config.train_lm_full:
        for p in model.lm.parameters():
            p.requires_grad_(True)
    elif config.lora is not None:
        if model.lora_config is None:
            model.enable_lora(config.lora)
        for p in model.lm.parameters():
            p.requires_grad_(False)
        for p in lora_parameters(model.lm):
            p.requires_grad_(True)
    else:
        for p in model.lm.parameters():
            p.requires_grad_(False)
    return [p for p in model.parameters() if p.requires_grad]


def _eligible(corpus: Sequence[QEExample], task: Task) -> List[QEExample]:
    out = []
    for ex in corpus:
        try:
            make_task_example(task, ex)
        except DataError:
            continue
        out.append(ex)
    return out


def run_training(
    model: E2EModel,
    config: TrainConfig,
    corpus: Sequence[QEExample],
    out_dir: Optional[str] = None,
    log_path: Optional[str] = None,
) -> float:
    """Run the training loop; returns the final step's loss."""
    params = configure_trainable(model, config)
    if not params:
        raise DataError("no trainable parameters under this configuration")
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    sampler = TaskSampler(config.tasks, config.task_mixing_weights, config.seed)
    data_rng = random.Random(config.seed + 1)
    eligible = {t: _eligible(corpus, Task(t)) for t in config.tasks}
    for t, exs in eligible.items():
        if not exs:
            raise DataError(f"no examples usable for task {t!r}")

    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    snapshot = None
    loss_val = float("nan")
    try:
        model.train()
        for step in range(config.total_steps):
            if out_dir and step % SNAPSHOT_INTERVAL == 0:
                snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
            task = sampler.sample()
            examples = data_rng.choices(eligible[task], k=config.batch_size)
            batch = build_batch(model, Task(task), examples)
            loss = lm_loss(model, batch)
            loss_val = float(loss.detach())
            if not torch.isfinite(loss):
                ckpt = None
                if out_dir and snapshot is not None:
                    model.load_state_dict(snapshot)
                    ckpt = os.path.join(out_dir, "last_good")
                    save_checkpoint(ckpt, model, {"phase": "aborted", "step": step})
                raise TrainingDivergedError(step, ckpt)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
            optimizer.step()
            if log_f:
                log_f.write(json.dumps({"step": step, "task": task, "loss": loss_val}) + "\n")
    finally:
        if log_f:
            log_f.close()
    return loss_val


def train_single_phase(
    model: E2EModel,
    config: TrainConfig,
    corpus: Sequence[QEExample],
    out_dir: str,
    log_path: Optional[str] = None,
) -> str:
    """All tasks in one phase; the LM is updated only if the config says so
    (via LoRA deltas or, at desk scale, full updates)."""
    required = {"asr", "st", "speechqe"}
    if not required.issubset(config.tasks):
        raise DataError(f"single-phase training requires tasks {sorted(required)}")
    final_loss = run_training(model, config, corpus, out_dir=out_dir, log_path=log_path)
    ckpt = os.path.join(out_dir, "single")
    save_checkpoint(ckpt, model, {
        "phase": "single",
        "config": config.to_dict(),
        "final_loss": final_loss,
    })
    return ckpt


def train_two_phase(
    model: E2EModel,
    phase1: TrainConfig,
    phase2: TrainConfig,
    corpus: Sequence[QEExample],
    out_dir: str,
    log_path: Optional[str] = None,
) -> str:
    """Adapter-only ASR/ST pretraining, then LoRA training on speech QE."""
    if set(phase1.tasks) != {"asr", "st"} or phase1.lora is not None:
        raise DataError("phase 1 must train exactly {asr, st} without LoRA")
    if "speechqe" not in phase2.tasks or phase2.lora is None:
        raise DataError("phase 2 must include speechqe and a LoRA config")
    run_training(model, phase1, corpus, out_dir=out_dir,
                 log_path=f"{log_path}.phase1" if log_path else None)
    phase1_ckpt = os.path.join(out_dir, "phase1")
    save_checkpoint(phase1_ckpt, model, {"phase": "phase1", "config": phase1.to_dict()})
    final_loss = run_training(model, phase2, corpus, out_dir=out_dir,
                              log_path=f"{log_path}.phase2" if log_path else None)
    ckpt = os.path.join(out_dir, "phase2")
    save_checkpoint(ckpt, model, {
        "phase": "two-phase",
        "phase1": phase1.to_dict(),
        "phase2": phase2.to_dict(),
        "adapter_frozen_in_phase2": phase2.adapter_frozen,
        "final_loss": final_loss,
    })
    return ckpt


def train_text_qe_baseline(
    model: E2EModel,
    config: TrainConfig,
    text_corpus: Sequence[QEExample],
    out_dir: Optional[str] = None,
    system_id: str = "text-lm-qe",
) -> TextQEHandle:
    """Text-only QE fine-tuning: same LM, no speech components in the prompt."""
    if tuple(config.tasks) != ("textqe",):
        raise DataError("text baseline trains the textqe task only")
    if config.lora is None and not config.train_lm_full:
        config = dataclasses.replace(config, train_lm_full=True)
    run_training(model, config, text_corpus, out_dir=out_dir)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "text_qe"), model,
                        {"phase": "text-qe-baseline", "config": config.to_dict()})

    def score(t: str, h: str) -> float:
        text = generate(model, None, Task.TEXTQE,
                        {"transcript": t, "hypothesis": h}, temperature=0.0)
        return parse_score_from_text(text)

    return TextQEHandle(id=system_id, score=score)
