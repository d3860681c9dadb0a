"""Manifest round trips and the validation errors that keep stage handoffs
honest."""

import pytest

from asrfuse.hypotheses import HypothesisRecord, ScoredHypothesis
from asrfuse.manifest import (ManifestError, load_manifest, record_to_json,
                              save_manifest)


def _records():
    return [
        HypothesisRecord("u1", "go home", "features/u1.npy",
                         [ScoredHypothesis("go hone", -1.5),
                          ScoredHypothesis("g home", -2.25)]),
        HypothesisRecord("u2", "stay", "features/u2.npy",
                         [ScoredHypothesis("sty", -0.75)]),
    ]


def test_round_trip(tmp_path):
    path = tmp_path / "m.jsonl"
    save_manifest(_records(), str(path))
    back = load_manifest(str(path))
    assert back == _records()


def test_serialization_is_stable():
    a, b = record_to_json(_records()[0]), record_to_json(_records()[0])
    assert a == b
    assert a.index('"ground_truth"') < a.index('"hypotheses"')  # sorted keys


def test_duplicate_id_rejected(tmp_path):
    path = tmp_path / "m.jsonl"
    recs = _records()
    recs.append(recs[0])
    save_manifest(recs, str(path))
    with pytest.raises(ManifestError, match=r":3: duplicate id 'u1'"):
        load_manifest(str(path))


def test_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    save_manifest(_records(), str(path))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("{oops\n")
    with pytest.raises(ManifestError, match=r":3: malformed JSON"):
        load_manifest(str(path))


def test_missing_field_rejected(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "u1", "ground_truth": "x", "hypotheses": []}\n')
    with pytest.raises(ManifestError, match=r":1: missing field"):
        load_manifest(str(path))


def test_unsorted_hypotheses_rejected(tmp_path):
    path = tmp_path / "m.jsonl"
    rec = HypothesisRecord("u1", "x", "f.npy",
                           [ScoredHypothesis("a", -3.0), ScoredHypothesis("b", -1.0)])
    save_manifest([rec], str(path))
    with pytest.raises(ManifestError, match="descending log_prob"):
        load_manifest(str(path))


def test_blank_lines_skipped(tmp_path):
    path = tmp_path / "m.jsonl"
    save_manifest(_records(), str(path))
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("\n\n")
    assert len(load_manifest(str(path))) == 2
