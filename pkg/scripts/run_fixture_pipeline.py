#!/usr/bin/env python3
"""Run the full build-corpus -> score -> evaluate -> report pipeline on the
fixture corpus. With --golden, refresh the committed golden report files."""

import argparse
import os
import shutil
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.join(HERE, "..")
sys.path.insert(0, os.path.join(ROOT, "src"))

from speechqe.cli import main as cli_main  # noqa: E402

FIXTURES = os.path.join(ROOT, "tests", "fixtures")
GOLDEN = os.path.join(FIXTURES, "golden")
GOLDEN_FILES = ["corpus.jsonl", "statistics.json",
                os.path.join("reports", "report.txt"),
                os.path.join("reports", "report.json"),
                os.path.join("reports", "esd_report.json")]


def run_pipeline(out_dir: str, seed: int = 0) -> None:
    os.environ["SOURCE_DATE_EPOCH"] = "1722470400"
    config = os.path.join(FIXTURES, "run_config.json")
    base = ["--config", config, "--seed", str(seed), "--out", out_dir]
    for cmd in (["build-corpus"], ["score"],
                ["evaluate", "--labels", "xcomet_like,metricx_like", "--esd"],
                ["report"]):
        rc = cli_main(base + cmd)
        if rc != 0:
            raise SystemExit(rc)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(ROOT, "out", "fixture_run"))
    parser.add_argument("--golden", action="store_true",
                        help="refresh committed golden files from this run")
    args = parser.parse_args()
    os.chdir(ROOT)  # run config uses repo-relative fixture paths
    run_pipeline(args.out)
    if args.golden:
        for rel in GOLDEN_FILES:
            dst = os.path.join(GOLDEN, rel)
            os.makedirs(os.path.dirname(dst), exist_ok=True)
            shutil.copyfile(os.path.join(args.out, rel), dst)
            print(f"refreshed {dst}")


if __name__ == "__main__":
    main()
