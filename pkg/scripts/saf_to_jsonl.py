#!/usr/bin/env python3
"""Convert the public SAF communication-networks dataset to the corpus JSONL.

Needs network access and the `datasets` package:

    python scripts/saf_to_jsonl.py --out tests/data/saf_corpus.jsonl

The Hugging Face splits map to the corpus splits as train -> train,
validation -> train (fold-in, see --validation), test_unseen_answers ->
test_ua, test_unseen_questions -> test_uq. Question ids are assigned by
grouping identical question text. Raw point scores (if any) are emitted with
a per-question max_points column so the loader normalizes them to [0, 1].
"""

import argparse
import json
import sys
from collections import defaultdict

DATASET = "Short-Answer-Feedback/saf_communication_networks_english"

_SPLIT_MAP = {
    "train": "train",
    "validation": "train",
    "test_unseen_answers": "test_ua",
    "test_unseen_questions": "test_uq",
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="tests/data/saf_corpus.jsonl")
    parser.add_argument("--dataset", default=DATASET)
    parser.add_argument(
        "--validation",
        choices=["train", "drop"],
        default="train",
        help="fold the validation split into train (default) or drop it",
    )
    args = parser.parse_args()

    try:
        from datasets import load_dataset
    except ImportError:
        print("the `datasets` package is required: pip install datasets", file=sys.stderr)
        return 1

    data = load_dataset(args.dataset)
    question_ids = {}
    max_score_by_question = defaultdict(float)
    rows = []

    for hf_split, split in _SPLIT_MAP.items():
        if hf_split not in data:
            continue
        if hf_split == "validation" and args.validation == "drop":
            continue
        for i, item in enumerate(data[hf_split]):
            question = item["question"].strip()
            if question not in question_ids:
                question_ids[question] = f"q{len(question_ids):03d}"
            qid = question_ids[question]
            score = float(item["score"])
            max_score_by_question[qid] = max(max_score_by_question[qid], score)
            rows.append(
                {
                    "id": f"{hf_split}-{i:05d}",
                    "question": question,
                    "question_id": qid,
                    "reference_answer": item["reference_answer"],
                    "student_answer": item.get("provided_answer") or "",
                    "score": score,
                    "label": item["verification_feedback"],
                    "feedback": item.get("answer_feedback") or "",
                    "split": split,
                }
            )

    # emit max_points only where scores exceed 1 (raw point values)
    needs_norm = {q for q, m in max_score_by_question.items() if m > 1.0}
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            if row["question_id"] in needs_norm:
                row["max_points"] = max_score_by_question[row["question_id"]]
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    print(f"wrote {len(rows)} records to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
