#!/usr/bin/env python3
"""Full offline pipeline: synthetic corpus -> reconstruct -> split -> eval.

Runs the test split against three scripted mock models (gold echo, constant
"yes", and a model that is right on every other item) and prints one
results table.
"""

import argparse
import json
from fractions import Fraction
from pathlib import Path

from roivqa.corpus import SplitSpec, load_dataset, save_dataset, split_dataset
from roivqa.harness import RunConfig, run_eval
from roivqa.metrics import markdown_table
from roivqa.roiqa import GenerationConfig, reconstruct_dataset, write_reconstruction
from roivqa.synthetic import make_dataset


def write_fixture(path: Path, answers: dict[str, str]) -> Path:
    path.write_text("".join(json.dumps({"qa_id": k, "answer": v}) + "\n" for k, v in sorted(answers.items())))
    return path


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--images", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()
    out = args.out_dir

    corpus = make_dataset(args.images, 3, 2, size=128, seed=args.seed)
    rec = reconstruct_dataset(corpus, GenerationConfig(seed=args.seed), workers=args.workers)
    full = load_dataset(write_reconstruction(rec, out / "reconstructed"))
    _, test = split_dataset(full, SplitSpec(args.seed, Fraction(4, 5)))
    split = save_dataset(test, out / "split" / "test.jsonl")
    test = load_dataset(split)

    models = {
        "gold-echo": {q.qa_id: q.answer for q in test.qa},
        "always-yes": {q.qa_id: "yes" for q in test.qa},
        "half-right": {q.qa_id: (q.answer if i % 2 == 0 else "unsure") for i, q in enumerate(test.qa)},
    }
    reports = {}
    for name, answers in models.items():
        fixture = write_fixture(out / f"{name}.jsonl", answers)
        cfg = RunConfig(str(split), "mock", str(fixture), max_in_flight=args.workers, seed=args.seed)
        reports[name] = run_eval(cfg, out_dir=out / "runs" / name)
    print(markdown_table(reports), end="")


if __name__ == "__main__":
    main()
