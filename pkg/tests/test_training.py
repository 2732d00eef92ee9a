import json
import math
import types

import numpy as np
import pytest
import torch

from speechqe import training, stubs
from speechqe.core import (
    DataError,
    ErrorSpan,
    Hypothesis,
    MetricKind,
    QEExample,
    QualityLabel,
    Severity,
    SpeechSegment,
    Split,
)
from speechqe.e2e import LoRAConfig, Task, load_checkpoint, lora_parameters
from speechqe.training import (
    Batch,
    TaskSampler,
    TrainConfig,
    TrainingDivergedError,
    configure_trainable,
    lm_loss,
    make_task_example,
    run_training,
    train_single_phase,
    train_text_qe_baseline,
    train_two_phase,
)
from tests.conftest import make_toy_corpus, make_toy_model


def make_example(score=0.93, with_spans=False):
    seg = SpeechSegment(
        id="seg0",
        audio=stubs.synthesize_features("hola mundo"),
        transcript="hola mundo",
        reference="hello world",
        lang_pair="es2en",
        domain="unit",
        split=Split.TRAIN,
    )
    labels = {MetricKind.XCOMET_LIKE: QualityLabel.from_raw(MetricKind.XCOMET_LIKE, score)}
    spans = [ErrorSpan(0, 5, Severity.MAJOR)] if with_spans else None
    return QEExample(segment=seg, hypothesis=Hypothesis("hullo world", "st-a"),
                     labels=labels, gold_spans=spans)


class TestMakeTaskExample:
    def test_speechqe_target_is_canonical_score(self):
        fields, target = make_task_example(Task.SPEECHQE, make_example(0.93))
        assert fields == {"hypothesis": "hullo world"}
        assert target == "0.93"

    def test_asr_target_is_transcript(self):
        fields, target = make_task_example(Task.ASR, make_example())
        assert (fields, target) == ({}, "hola mundo")

    def test_st_target_is_reference(self):
        fields, target = make_task_example(Task.ST, make_example())
        assert (fields, target) == ({}, "hello world")

    def test_textqe_includes_transcript_field(self):
        fields, target = make_task_example(Task.TEXTQE, make_example(0.5))
        assert fields == {"transcript": "hola mundo", "hypothesis": "hullo world"}
        assert target == "0.50"

    def test_esd_target_formats_gold_spans(self):
        _, target = make_task_example(Task.SPEECH_ESD, make_example(with_spans=True))
        assert target == '- "hullo" — major'

    def test_esd_without_spans_rejected(self):
        with pytest.raises(DataError):
            make_task_example(Task.SPEECH_ESD, make_example(with_spans=False))

    def test_speechqe_without_labels_rejected(self):
        ex = make_example()
        ex = QEExample(segment=ex.segment, hypothesis=ex.hypothesis, labels={})
        with pytest.raises(DataError):
            make_task_example(Task.SPEECHQE, ex)


class StubLM:
    """Model stand-in whose `lm` returns fixed logits for loss closed forms."""

    def __init__(self, logits_fn):
        self.lm = logits_fn


class TestLMLoss:
    def make_batch(self, labels):
        labels = torch.tensor(labels, dtype=torch.long)
        embeds = torch.zeros(*labels.shape, 4)
        return Batch(embeds=embeds, labels=labels)

    def test_uniform_logits_give_log_vocab(self):
        vocab = 11
        model = StubLM(lambda e: torch.zeros(e.shape[0], e.shape[1], vocab))
        batch = self.make_batch([[-100, 3, 5, -100]])
        loss = lm_loss(model, batch)
        assert float(loss) == pytest.approx(math.log(vocab), abs=1e-6)

    def test_confident_correct_logits_give_near_zero(self):
        vocab = 7
        labels = [[-100, 2, 4, -100]]

        def logits_fn(e):
            out = torch.zeros(e.shape[0], e.shape[1], vocab)
            # position t predicts label at t+1
            out[0, 0, 2] = 50.0
            out[0, 1, 4] = 50.0
            return out

        loss = lm_loss(StubLM(logits_fn), self.make_batch(labels))
        assert float(loss) < 1e-6

    def test_padding_positions_excluded(self):
        vocab = 5
        # same target positions, extra -100 padding must not change the mean
        a = self.make_batch([[-100, 1, 2, -100]])
        b = self.make_batch([[-100, 1, 2, -100, -100, -100]])
        model = StubLM(lambda e: torch.ones(e.shape[0], e.shape[1], vocab))
        assert float(lm_loss(model, a)) == pytest.approx(float(lm_loss(model, b)))

    def test_all_masked_batch_rejected(self):
        model = StubLM(lambda e: torch.zeros(e.shape[0], e.shape[1], 5))
        with pytest.raises(DataError):
            lm_loss(model, self.make_batch([[-100, -100]]))


class TestTaskSampler:
    def test_frequencies_match_weights_within_2pct(self):
        weights = {"asr": 0.5, "st": 0.3, "speechqe": 0.2}
        sampler = TaskSampler(["asr", "st", "speechqe"], weights, seed=123)
        n = 10_000
        counts = {t: 0 for t in weights}
        for _ in range(n):
            counts[sampler.sample()] += 1
        for t, w in weights.items():
            assert abs(counts[t] / n - w) <= 0.02

    def test_same_seed_same_stream(self):
        a = TaskSampler(["x", "y"], None, seed=5)
        b = TaskSampler(["x", "y"], None, seed=5)
        assert [a.sample() for _ in range(50)] == [b.sample() for _ in range(50)]

    def test_zero_mass_rejected(self):
        with pytest.raises(DataError):
            TaskSampler(["a"], {"a": 0.0}, seed=0)


class TestFreezeRegimes:
    def test_default_trains_adapter_only(self, toy_model):
        cfg = TrainConfig(total_steps=1)
        params = configure_trainable(toy_model, cfg)
        adapter_ids = {id(p) for p in toy_model.adapter.parameters()}
        assert {id(p) for p in params} == adapter_ids
        assert all(not p.requires_grad for p in toy_model.lm.parameters())

    def test_lora_regime_trains_deltas_and_adapter(self, toy_model):
        cfg = TrainConfig(total_steps=1, lora=LoRAConfig(rank=2, alpha=4.0))
        params = configure_trainable(toy_model, cfg)
        delta_ids = {id(p) for p in lora_parameters(toy_model.lm)}
        adapter_ids = {id(p) for p in toy_model.adapter.parameters()}
        assert {id(p) for p in params} == delta_ids | adapter_ids

    def test_frozen_adapter_with_lora(self, toy_model):
        cfg = TrainConfig(total_steps=1, lora=LoRAConfig(rank=2, alpha=4.0),
                          adapter_frozen=True)
        params = configure_trainable(toy_model, cfg)
        assert {id(p) for p in params} == {id(p) for p in lora_parameters(toy_model.lm)}

    def test_encoder_frozen_in_every_regime(self, toy_model):
        for cfg in (TrainConfig(total_steps=1),
                    TrainConfig(total_steps=1, train_lm_full=True),
                    TrainConfig(total_steps=1, lora=LoRAConfig(rank=2, alpha=4.0))):
            configure_trainable(toy_model, cfg)
            assert all(not p.requires_grad for p in toy_model.encoder.parameters())

    def test_fully_frozen_config_rejected(self, toy_model):
        cfg = TrainConfig(total_steps=1, adapter_frozen=True)
        with pytest.raises(DataError):
            run_training(toy_model, cfg, make_toy_corpus(n_segments=2))


class TestRunTraining:
    def test_loss_decreases(self, tmp_path):
        model = make_toy_model(torch_seed=0)
        corpus = make_toy_corpus(n_segments=8, seed=1)
        log = str(tmp_path / "log.jsonl")
        cfg = TrainConfig(total_steps=60, learning_rate=2e-3, batch_size=4,
                          tasks=("asr",), train_lm_full=True, seed=0)
        run_training(model, cfg, corpus, log_path=log)
        losses = [json.loads(l)["loss"] for l in open(log)]
        assert len(losses) == 60
        assert sum(losses[-5:]) / 5 < sum(losses[:5]) / 5

    def test_identical_seed_identical_log(self, tmp_path):
        logs = []
        for name in ("a", "b"):
            model = make_toy_model(torch_seed=0)
            corpus = make_toy_corpus(n_segments=6, seed=2)
            log = str(tmp_path / f"{name}.jsonl")
            cfg = TrainConfig(total_steps=15, learning_rate=1e-3, batch_size=2,
                              tasks=("asr", "st"), train_lm_full=True, seed=9)
            run_training(model, cfg, corpus, log_path=log)
            logs.append(open(log, "rb").read())
        assert logs[0] == logs[1]

    def test_divergence_aborts_with_last_good_checkpoint(self, tmp_path, toy_model,
                                                         monkeypatch):
        corpus = make_toy_corpus(n_segments=4)
        calls = {"n": 0}
        real = training.lm_loss

        def nan_after_two(model, batch):
            calls["n"] += 1
            if calls["n"] > 2:
                return torch.tensor(float("nan"))
            return real(model, batch)

        monkeypatch.setattr(training, "lm_loss", nan_after_two)
        cfg = TrainConfig(total_steps=10, tasks=("asr",), train_lm_full=True)
        with pytest.raises(TrainingDivergedError) as exc:
            run_training(toy_model, cfg, corpus, out_dir=str(tmp_path))
        assert exc.value.step == 2
        loaded, manifest = load_checkpoint(exc.value.checkpoint)
        assert manifest["phase"] == "aborted"

    def test_task_without_usable_examples_rejected(self, toy_model):
        corpus = make_toy_corpus(n_segments=2, with_spans=False)
        cfg = TrainConfig(total_steps=1, tasks=("speech_esd",), train_lm_full=True)
        with pytest.raises(DataError):
            run_training(toy_model, cfg, corpus)


class TestSinglePhase:
    def test_requires_core_task_set(self, toy_model):
        cfg = TrainConfig(total_steps=1, tasks=("asr", "st"))
        with pytest.raises(DataError):
            train_single_phase(toy_model, cfg, make_toy_corpus(n_segments=2), "unused")

    def test_checkpoint_written_and_loadable(self, tmp_path):
        model = make_toy_model(torch_seed=0)
        corpus = make_toy_corpus(n_segments=4)
        cfg = TrainConfig(total_steps=6, learning_rate=1e-3, batch_size=2,
                          train_lm_full=True, seed=0)
        ckpt = train_single_phase(model, cfg, corpus, str(tmp_path))
        loaded, manifest = load_checkpoint(ckpt)
        assert manifest["phase"] == "single"
        assert manifest["config"]["total_steps"] == 6
        for pa, pb in zip(model.lm.parameters(), loaded.lm.parameters()):
            assert torch.equal(pa, pb)


class TestTwoPhase:
    def run(self, tmp_path, adapter_frozen):
        model = make_toy_model(torch_seed=0)
        corpus = make_toy_corpus(n_segments=6, seed=4)
        p1 = TrainConfig(total_steps=12, learning_rate=1e-3, batch_size=2,
                         tasks=("asr", "st"), seed=0)
        p2 = TrainConfig(total_steps=12, learning_rate=1e-3, batch_size=2,
                         tasks=("speechqe",), lora=LoRAConfig(rank=2, alpha=4.0),
                         adapter_frozen=adapter_frozen, seed=0)
        ckpt = train_two_phase(model, p1, p2, corpus, str(tmp_path))
        phase1, _ = load_checkpoint(str(tmp_path / "phase1"))
        phase2, _ = load_checkpoint(ckpt)
        return phase1, phase2

    @staticmethod
    def adapter_bytes(model):
        return b"".join(p.detach().numpy().tobytes() for p in model.adapter.parameters())

    def test_frozen_adapter_unchanged_in_phase2(self, tmp_path):
        phase1, phase2 = self.run(tmp_path, adapter_frozen=True)
        assert self.adapter_bytes(phase1) == self.adapter_bytes(phase2)

    def test_trainable_adapter_changes_in_phase2(self, tmp_path):
        phase1, phase2 = self.run(tmp_path, adapter_frozen=False)
        assert self.adapter_bytes(phase1) != self.adapter_bytes(phase2)

    def test_lm_base_bits_unchanged_under_lora(self, tmp_path):
        phase1, phase2 = self.run(tmp_path, adapter_frozen=True)
        delta_ids = {id(p) for p in lora_parameters(phase2.lm)}
        base2 = {n: p for n, p in phase2.lm.named_parameters() if id(p) not in delta_ids}
        base1 = dict(phase1.lm.named_parameters())
        for name, p2 in base2.items():
            key = name.replace(".base.", ".")
            assert torch.equal(base1[key], p2), name

    def test_lora_deltas_actually_move(self, tmp_path):
        _, phase2 = self.run(tmp_path, adapter_frozen=True)
        moved = any(p.abs().sum() > 0 for p in lora_parameters(phase2.lm))
        assert moved

    def test_phase_contracts_enforced(self, toy_model, tmp_path):
        corpus = make_toy_corpus(n_segments=2)
        good1 = TrainConfig(total_steps=1, tasks=("asr", "st"))
        good2 = TrainConfig(total_steps=1, tasks=("speechqe",),
                            lora=LoRAConfig(rank=2, alpha=4.0))
        with pytest.raises(DataError):
            train_two_phase(toy_model, TrainConfig(total_steps=1, tasks=("asr",)),
                            good2, corpus, str(tmp_path))
        with pytest.raises(DataError):
            train_two_phase(toy_model, good1,
                            TrainConfig(total_steps=1, tasks=("speechqe",)),
                            corpus, str(tmp_path))


class TestTextQEBaseline:
    def test_returns_scoring_handle(self):
        model = make_toy_model(torch_seed=0)
        corpus = make_toy_corpus(n_segments=4)
        cfg = TrainConfig(total_steps=5, learning_rate=1e-3, batch_size=2,
                          tasks=("textqe",), seed=0)
        handle = train_text_qe_baseline(model, cfg, corpus)
        assert handle.id == "text-lm-qe"
        score = handle.score("hola mundo", "hello world")
        assert 0.0 <= score <= 1.0

    def test_rejects_extra_tasks(self, toy_model):
        cfg = TrainConfig(total_steps=1, tasks=("textqe", "asr"))
        with pytest.raises(DataError):
            train_text_qe_baseline(toy_model, cfg, make_toy_corpus(n_segments=2))


class TestTrainConfigSerialization:
    def test_roundtrip_with_lora(self):
        cfg = TrainConfig(total_steps=10, lora=LoRAConfig(rank=2, alpha=4.0,
                                                          targets=("q", "v")),
                          tasks=("asr", "speechqe"),
                          task_mixing_weights={"asr": 0.25, "speechqe": 0.75})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid_steps_rejected(self):
        with pytest.raises(DataError):
            TrainConfig(total_steps=0)
