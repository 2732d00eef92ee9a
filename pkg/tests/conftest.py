import random

import pytest
import torch

from speechqe import corpus as corpus_mod
from speechqe import e2e, stubs
from speechqe.core import MetricKind


def make_toy_corpus(n_segments=16, seed=3, noise_rate=0.2, with_spans=False,
                    min_words=3, max_words=5, split=None):
    kwargs = {} if split is None else {"split": split}
    segs = stubs.make_synthetic_segments(n_segments, seed=seed,
                                         min_words=min_words, max_words=max_words,
                                         **kwargs)
    systems = [corpus_mod.STSystemHandle(
        id=f"noise{noise_rate}", quality_tier=f"noise-{noise_rate}",
        generate=stubs.make_noise_translator(f"noise{noise_rate}", noise_rate, seed + 1))]
    pairs = corpus_mod.generate_hypotheses(segs, systems)
    metrics = [corpus_mod.MetricHandle(MetricKind.XCOMET_LIKE, stubs.reference_metric_score)]
    span_fn = stubs.diff_error_spans if with_spans else None
    return corpus_mod.label_examples(pairs, metrics, gold_span_fn=span_fn)


def make_toy_model(torch_seed=0, enc_dim=24, d_model=64, channels=32, bottleneck=16):
    torch.manual_seed(torch_seed)
    tok = e2e.CharTokenizer()
    config = e2e.E2EConfig(
        feat_dim=stubs.FRAME_WIDTH,
        enc_dim=enc_dim,
        encoder_seed=7,
        adapter=e2e.AdapterConfig(in_dim=enc_dim, lm_dim=d_model,
                                  channels=channels, bottleneck_dim=bottleneck),
        lm=e2e.LMConfig(vocab_size=tok.vocab_size, d_model=d_model),
    )
    return e2e.E2EModel(config)


@pytest.fixture
def toy_corpus():
    return make_toy_corpus()


@pytest.fixture
def toy_model():
    return make_toy_model()
