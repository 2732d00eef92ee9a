"""Command-line entry point: build-corpus, train, score, evaluate, report.

Every command is deterministic given (inputs, seed): outputs are rewritten
byte-identically on re-runs, and all randomness flows from the single --seed
flag, which is recorded in output manifests.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, List, Optional

from . import corpus as corpus_mod
from . import stubs
from .core import (
    DataError,
    MetricKind,
    ParseError,
    QEExample,
    SpeechQEError,
    SpeechSegment,
    Split,
)
from .evaluation import (
    CorrelationReport,
    InsufficientDataError,
    build_report_grid,
    correlate,
    correlate_human_da,
    corpus_esd_report,
    load_da_records,
)
from .systems import (
    ASRHandle,
    CascadedSystem,
    GoldCascadeSystem,
    TextQEHandle,
    read_predictions,
    score_corpus,
    write_predictions,
)


def _qe_handle(name: str) -> TextQEHandle:
    if name == "overlap":
        return TextQEHandle(id="overlap-qe", score=stubs.overlap_qe_score,
                            detect_spans=stubs.overlap_qe_detect_spans)
    raise ConfigError(f"unknown text-QE handle {name!r}")


class ConfigError(SpeechQEError):
    pass


def load_run_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e


def _write_json(path: str, doc) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


# --- build-corpus -----------------------------------------------------------

def read_raw_segments(path: str) -> List[SpeechSegment]:
    segments = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                segments.append(SpeechSegment(
                    id=rec["id"],
                    audio=stubs.synthesize_features(rec["transcript"]),
                    transcript=rec["transcript"],
                    reference=rec["reference"],
                    lang_pair=rec["lang_pair"],
                    domain=rec["domain"],
                    split=Split(rec["split"]),
                    frame_rate_hz=stubs.FRAME_RATE_HZ,
                ))
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed raw segment ({e})") from e
    return segments


def _metric_handles(kinds: List[str]) -> List[corpus_mod.MetricHandle]:
    handles = []
    for kind in kinds:
        if kind == "xcomet_like":
            handles.append(corpus_mod.MetricHandle(
                MetricKind.XCOMET_LIKE, stubs.reference_metric_score))
        elif kind == "metricx_like":
            # MetricX-style toy: error count in [0, 25], lower = better.
            handles.append(corpus_mod.MetricHandle(
                MetricKind.METRICX_LIKE,
                lambda t, h, r: 25.0 * (1.0 - stubs.reference_metric_score(t, h, r))))
        else:
            raise ConfigError(f"unknown metric kind {kind!r}")
    return handles


def cmd_build_corpus(config: dict, seed: int, out: str) -> int:
    raw_path = config.get("raw_segments")
    if not raw_path:
        raise ConfigError("build-corpus requires 'raw_segments' in the config")
    segments = read_raw_segments(raw_path)
    n = config.get("n_subsample", len(segments))
    segments = corpus_mod.subsample(segments, n, seed)

    st_handles = []
    for i, spec in enumerate(config.get("st_systems", [{"id": "echo", "rate": 0.0}])):
        rate = float(spec.get("rate", 0.0))
        st_handles.append(corpus_mod.STSystemHandle(
            id=spec["id"],
            quality_tier=f"noise-{rate}",
            generate=stubs.make_noise_translator(spec["id"], rate, seed * 1000 + i),
        ))
    metrics = _metric_handles(config.get("metrics", ["xcomet_like"]))
    pairs = corpus_mod.generate_hypotheses(segments, st_handles)
    gold_span_fn = stubs.diff_error_spans if config.get("gold_spans", True) else None
    examples = corpus_mod.label_examples(pairs, metrics, gold_span_fn=gold_span_fn)

    os.makedirs(out, exist_ok=True)
    corpus_path = os.path.join(out, "corpus.jsonl")
    manifest = corpus_mod.build_manifest(examples, subsample_seed=seed, n_subsampled=n)
    corpus_mod.write_corpus(examples, corpus_path, manifest=manifest)
    _write_json(os.path.join(out, "statistics.json"),
                corpus_mod.compute_statistics(examples))
    print(f"wrote {len(examples)} examples to {corpus_path}")
    return 0


# --- score ------------------------------------------------------------------

def _build_system(spec: dict, seed: int):
    kind = spec.get("type")
    if kind == "gold-cascade":
        return GoldCascadeSystem(qe=_qe_handle(spec.get("qe", "overlap"))), True
    if kind == "cascaded":
        asr_spec = spec.get("asr", {"kind": "echo"})
        if asr_spec.get("kind") == "echo":
            asr = ASRHandle(id=asr_spec.get("id", "echo-asr"),
                            transcribe=stubs.perfect_asr_transcribe,
                            quality_tier="perfect")
        elif asr_spec.get("kind") == "corrupt":
            rate = float(asr_spec["rate"])
            asr = ASRHandle(
                id=asr_spec.get("id", f"asr-noise{rate}"),
                transcribe=stubs.make_corrupting_asr_transcribe(
                    rate, asr_spec.get("asr_seed", seed)),
                quality_tier=f"noise-{rate}")
        else:
            raise ConfigError(f"unknown ASR kind {asr_spec.get('kind')!r}")
        return CascadedSystem(asr=asr, qe=_qe_handle(spec.get("qe", "overlap"))), True
    if kind == "e2e":
        from .e2e import E2ESystem, load_checkpoint
        model, _ = load_checkpoint(spec["checkpoint"])
        return E2ESystem(model=model, id=spec.get("id", "e2e"),
                         temperature=float(spec.get("temperature", 0.0)),
                         seed=seed), False
    raise ConfigError(f"unknown system type {kind!r}")


def cmd_score(config: dict, seed: int, out: str) -> int:
    corpus_path = config.get("corpus") or os.path.join(out, "corpus.jsonl")
    examples = corpus_mod.read_corpus(corpus_path)
    split = config.get("split")
    if split:
        examples = [ex for ex in examples if ex.segment.split.value == split]
    roster = config.get("systems")
    if not roster:
        raise ConfigError("score requires a non-empty 'systems' roster")
    pred_dir = os.path.join(out, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    for spec in roster:
        system, is_cascaded = _build_system(spec, seed)
        predictions = score_corpus(system, examples)
        path = os.path.join(pred_dir, f"{system.id}.jsonl")
        write_predictions(predictions, path, cascaded=is_cascaded)
        print(f"wrote {len(predictions)} predictions to {path}")
    return 0


# --- train ------------------------------------------------------------------

def cmd_train(config: dict, seed: int, out: str, strategy: str,
              adapter: str, lora: str) -> int:
    import torch

    from .e2e import (AdapterConfig, CharTokenizer, E2EConfig, E2EModel,
                      LMConfig, LoRAConfig)
    from .training import TrainConfig, train_single_phase, train_two_phase

    torch.manual_seed(seed)
    corpus_path = config.get("corpus") or os.path.join(out, "corpus.jsonl")
    examples = corpus_mod.read_corpus(corpus_path)
    train_examples = [ex for ex in examples if ex.segment.split == Split.TRAIN] or examples

    model_cfg = config.get("model", {})
    tok = CharTokenizer()
    enc_dim = model_cfg.get("enc_dim", 24)
    d_model = model_cfg.get("d_model", 64)
    e2e_config = E2EConfig(
        feat_dim=stubs.FRAME_WIDTH,
        enc_dim=enc_dim,
        encoder_seed=model_cfg.get("encoder_seed", 7),
        adapter=AdapterConfig(in_dim=enc_dim, lm_dim=d_model,
                              channels=model_cfg.get("adapter_channels", 32),
                              bottleneck_dim=model_cfg.get("bottleneck_dim", 16)),
        lm=LMConfig(vocab_size=tok.vocab_size, d_model=d_model,
                    n_layers=model_cfg.get("n_layers", 2),
                    n_heads=model_cfg.get("n_heads", 4),
                    d_ff=model_cfg.get("d_ff", 128)),
    )
    model = E2EModel(e2e_config)

    train_cfg = dict(config.get("train", {}))
    lora_cfg = None
    if lora == "on":
        lora_cfg = LoRAConfig(**train_cfg.pop("lora", {"rank": 16, "alpha": 32.0}))
    else:
        train_cfg.pop("lora", None)
    ckpt_dir = os.path.join(out, "checkpoints")
    log_path = os.path.join(out, "train_log.jsonl")
    os.makedirs(ckpt_dir, exist_ok=True)
    adapter_frozen = adapter == "frozen"

    if strategy == "single":
        cfg = TrainConfig(
            total_steps=train_cfg.get("total_steps", 1400),
            learning_rate=train_cfg.get("learning_rate", 5e-5),
            weight_decay=train_cfg.get("weight_decay", 0.05),
            batch_size=train_cfg.get("batch_size", 8),
            lora=lora_cfg,
            adapter_frozen=adapter_frozen,
            tasks=tuple(train_cfg.get("tasks", ("asr", "st", "speechqe"))),
            task_mixing_weights=train_cfg.get("task_mixing_weights"),
            train_lm_full=train_cfg.get("train_lm_full", False),
            seed=seed,
        )
        ckpt = train_single_phase(model, cfg, train_examples, ckpt_dir, log_path=log_path)
    elif strategy == "two-phase":
        p1 = TrainConfig(
            total_steps=train_cfg.get("phase1_steps", 1200),
            learning_rate=train_cfg.get("learning_rate", 5e-5),
            weight_decay=train_cfg.get("weight_decay", 0.05),
            batch_size=train_cfg.get("batch_size", 8),
            tasks=("asr", "st"),
            seed=seed,
        )
        p2 = TrainConfig(
            total_steps=train_cfg.get("phase2_steps", 800),
            learning_rate=train_cfg.get("learning_rate", 5e-5),
            weight_decay=train_cfg.get("weight_decay", 0.05),
            batch_size=train_cfg.get("batch_size", 8),
            lora=lora_cfg or LoRAConfig(),
            adapter_frozen=adapter_frozen,
            tasks=("speechqe",),
            seed=seed + 1,
        )
        ckpt = train_two_phase(model, p1, p2, train_examples, ckpt_dir, log_path=log_path)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    print(f"checkpoint written to {ckpt}")
    return 0


# --- evaluate ---------------------------------------------------------------

def _load_prediction_files(config: dict, out: str) -> Dict[str, list]:
    pred_dir = config.get("predictions_dir") or os.path.join(out, "predictions")
    if not os.path.isdir(pred_dir):
        raise DataError(f"predictions directory not found: {pred_dir}")
    files = sorted(f for f in os.listdir(pred_dir) if f.endswith(".jsonl"))
    if not files:
        raise InsufficientDataError(f"no prediction files in {pred_dir}")
    return {f[:-6]: read_predictions(os.path.join(pred_dir, f)) for f in files}


def cmd_evaluate(config: dict, seed: int, out: str, labels: str, esd: bool) -> int:
    corpus_path = config.get("corpus") or os.path.join(out, "corpus.jsonl")
    examples = corpus_mod.read_corpus(corpus_path)
    by_system = _load_prediction_files(config, out)

    label_names = [s.strip() for s in labels.split(",") if s.strip()]
    reports: List[CorrelationReport] = []
    for system_id, predictions in by_system.items():
        scoreable = [p for p in predictions if p.score is not None]
        for name in label_names:
            if name == "human_da":
                da_path = config.get("da_file")
                if not da_path:
                    raise ConfigError("human_da label requires 'da_file' in the config")
                reports.append(correlate_human_da(scoreable, load_da_records(da_path),
                                                  with_secondary=True))
            else:
                reports.append(correlate(scoreable, examples, MetricKind(name),
                                         with_secondary=True))

    reports_dir = config.get("reports_dir") or os.path.join(out, "reports")
    os.makedirs(reports_dir, exist_ok=True)
    text, doc = build_report_grid(reports)
    doc["seed"] = seed
    _write_text(os.path.join(reports_dir, "report.txt"), text)
    _write_json(os.path.join(reports_dir, "report.json"), doc)
    print(text, end="")

    if esd:
        gold = {ex.example_id: ex for ex in examples}
        esd_doc = {}
        for system_id, predictions in by_system.items():
            triples = []
            for p in predictions:
                ex = gold.get(p.example_id)
                if p.spans is None or ex is None or ex.gold_spans is None:
                    continue
                triples.append((p.spans, ex.gold_spans, len(ex.hypothesis.text)))
            if triples:
                esd_doc[system_id] = corpus_esd_report(system_id, triples).to_dict()
        _write_json(os.path.join(reports_dir, "esd_report.json"),
                    {"seed": seed, "systems": esd_doc})
    return 0


# --- report -----------------------------------------------------------------

def cmd_report(config: dict, seed: int, out: str) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    corpus_path = config.get("corpus") or os.path.join(out, "corpus.jsonl")
    examples = corpus_mod.read_corpus(corpus_path)
    by_system = _load_prediction_files(config, out)
    reports_dir = config.get("reports_dir") or os.path.join(out, "reports")
    os.makedirs(reports_dir, exist_ok=True)

    label_kind = MetricKind(config.get("plot_label", "xcomet_like"))
    labels_by_id = {ex.example_id: ex.labels.get(label_kind) for ex in examples}
    for system_id, predictions in by_system.items():
        xs, ys = [], []
        for p in predictions:
            label = labels_by_id.get(p.example_id)
            if p.score is None or label is None:
                continue
            xs.append(label.oriented_value)
            ys.append(p.score)
        if not xs:
            continue
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(xs, ys, s=8, alpha=0.6)
        ax.set_xlabel(f"{label_kind.value} (oriented)")
        ax.set_ylabel("system score")
        ax.set_title(system_id)
        fig.tight_layout()
        fig.savefig(os.path.join(reports_dir, f"scatter_{system_id}.png"),
                    metadata={"Software": "speechqe"})
        plt.close(fig)
    print(f"plots written to {reports_dir}")
    return 0


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechqe",
                                     description="Speech translation QE pipeline")
    parser.add_argument("--config", default=None, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build-corpus")
    train = sub.add_parser("train")
    train.add_argument("--strategy", choices=["single", "two-phase"], default="single")
    train.add_argument("--adapter", choices=["frozen", "trainable"], default="trainable")
    train.add_argument("--lora", choices=["on", "off"], default="off")
    sub.add_parser("score")
    ev = sub.add_parser("evaluate")
    ev.add_argument("--labels", default="xcomet_like")
    ev.add_argument("--esd", action="store_true")
    sub.add_parser("report")
    return parser


_ERROR_CATEGORIES = [
    (ConfigError, "config-error", 2),
    (InsufficientDataError, "insufficient-data", 4),
    (corpus_mod.CorpusFormatError, "corpus-format-error", 3),
    (ParseError, "parse-error", 3),
    (DataError, "data-error", 3),
    (FileNotFoundError, "io-error", 3),
    (SpeechQEError, "error", 1),
]


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config)
        if args.command == "build-corpus":
            return cmd_build_corpus(config, args.seed, args.out)
        if args.command == "train":
            return cmd_train(config, args.seed, args.out,
                             args.strategy, args.adapter, args.lora)
        if args.command == "score":
            return cmd_score(config, args.seed, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.seed, args.out, args.labels, args.esd)
        if args.command == "report":
            return cmd_report(config, args.seed, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except Exception as e:  # one machine-parseable line per failure
        for cls, category, code in _ERROR_CATEGORIES:
            if isinstance(e, cls):
                print(f"error: {category}: {e}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
