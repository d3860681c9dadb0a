"""JSONL manifests carrying hypothesis records between pipeline stages.

One JSON object per line: {id, ground_truth, features_path, hypotheses};
hypotheses are {text, log_prob} in descending score order. Serialization is
key-sorted so identical records always produce identical bytes.
"""

from __future__ import annotations

import json

from .hypotheses import HypothesisRecord, ScoredHypothesis


class ManifestError(ValueError):
    pass


def record_to_json(record: HypothesisRecord) -> str:
    return json.dumps({
        "id": record.id,
        "ground_truth": record.ground_truth,
        "features_path": record.features_path,
        "hypotheses": [{"text": h.text, "log_prob": h.log_prob}
                       for h in record.hypotheses],
    }, sort_keys=True)


def save_manifest(records, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def load_manifest(path: str) -> list[HypothesisRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({e})") from None
            try:
                rec = HypothesisRecord(
                    id=obj["id"], ground_truth=obj["ground_truth"],
                    features_path=obj["features_path"],
                    hypotheses=[ScoredHypothesis(h["text"], float(h["log_prob"]))
                                for h in obj["hypotheses"]])
            except (KeyError, TypeError) as e:
                raise ManifestError(f"{path}:{lineno}: missing field ({e})") from None
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            lps = [h.log_prob for h in rec.hypotheses]
            if any(a < b for a, b in zip(lps, lps[1:])):
                raise ManifestError(f"{path}:{lineno}: hypotheses not sorted by "
                                    "descending log_prob")
            records.append(rec)
    return records
