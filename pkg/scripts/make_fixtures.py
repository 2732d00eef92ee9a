#!/usr/bin/env python3
"""Regenerate the committed test fixtures.

Writes the raw-segment file feeding the 64-example fixture corpus (32
segments x 2 stub ST systems) and the pipeline run config. Golden report
files are produced by scripts/run_fixture_pipeline.py.
"""

import json
import os
import random

HERE = os.path.dirname(os.path.abspath(__file__))
FIXTURES = os.path.join(HERE, "..", "tests", "fixtures")

WORDS = (
    "señal camino montaña niño corazón música años después ciudad fútbol "
    "straße größe müde schön über tag nacht wasser feuer erde "
    "casa perro tiempo agua libro fuerza mundo noche campo premio"
).split()


def main():
    rng = random.Random(20240801)
    os.makedirs(FIXTURES, exist_ok=True)
    path = os.path.join(FIXTURES, "raw_segments.jsonl")
    with open(path, "w", encoding="utf-8") as f:
        for i in range(32):
            text = " ".join(rng.choice(WORDS) for _ in range(rng.randint(4, 8)))
            rec = {
                "id": f"fix-{i:04d}",
                "transcript": text,
                "reference": text,
                "lang_pair": "es2en",
                "domain": "fixture",
                "split": "test",
            }
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"wrote {path}")

    config = {
        "raw_segments": os.path.join("tests", "fixtures", "raw_segments.jsonl"),
        "n_subsample": 32,
        "st_systems": [
            {"id": "st-clean", "rate": 0.1},
            {"id": "st-noisy", "rate": 0.35},
        ],
        "metrics": ["xcomet_like", "metricx_like"],
        "gold_spans": True,
        "systems": [
            {"type": "gold-cascade", "qe": "overlap"},
            {"type": "cascaded", "asr": {"kind": "echo"}, "qe": "overlap"},
            {"type": "cascaded", "asr": {"kind": "corrupt", "rate": 0.2, "asr_seed": 11},
             "qe": "overlap"},
        ],
    }
    cfg_path = os.path.join(FIXTURES, "run_config.json")
    with open(cfg_path, "w", encoding="utf-8") as f:
        json.dump(config, f, ensure_ascii=False, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {cfg_path}")

    # Human direct-assessment fixture: 10 systems x 416 segments.
    da_rng = random.Random(20240802)
    da_path = os.path.join(FIXTURES, "da_records.jsonl")
    with open(da_path, "w", encoding="utf-8") as f:
        for s in range(10):
            for i in range(416):
                rec = {
                    "example_id": f"da-{i:04d}",
                    "system_id": f"sys-{s:02d}",
                    "da_score": round(da_rng.uniform(0.0, 100.0), 2),
                }
                f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"wrote {da_path}")


if __name__ == "__main__":
    main()
