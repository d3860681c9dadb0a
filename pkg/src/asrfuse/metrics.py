"""Evaluation metrics: text normalization, word error rate, oracle WER,
relative improvement, and exact-match rate.

WER uses unit-cost word-level Levenshtein distance over whitespace tokens,
divided by the reference word count; it can exceed 1. Corpus scores pool edit
counts over pooled reference words by default, with a mean-of-per-utterance
variant behind a flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

_DELETE = {ord(c): None for c in ".-?'"}


def normalize_text(s: str) -> str:
    """Lowercase, drop . - ? ' characters, collapse whitespace runs."""
    return " ".join(s.lower().translate(_DELETE).split())


def word_edit_distance(ref_words, hyp_words) -> int:
    """Unit-cost Levenshtein over word sequences, two-row DP."""
    if not ref_words:
        return len(hyp_words)
    prev = list(range(len(hyp_words) + 1))
    for i, rw in enumerate(ref_words, 1):
        cur = [i] + [0] * len(hyp_words)
        for j, hw in enumerate(hyp_words, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (0 if rw == hw else 1))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    ref = reference.split()
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    return word_edit_distance(ref, hypothesis.split()) / len(ref)


def corpus_wer(references, hypotheses, per_utterance: bool = False) -> float:
    """Pooled edits over pooled reference words; or the mean of per-utterance
    WERs when per_utterance is set."""
    pairs = list(zip(references, hypotheses, strict=True))
    if not pairs:
        raise ValueError("corpus_wer needs at least one pair")
    if per_utterance:
        return sum(wer(r, h) for r, h in pairs) / len(pairs)
    edits = words = 0
    for r, h in pairs:
        rw = r.split()
        if not rw:
            raise ValueError("WER is undefined for an empty reference")
        edits += word_edit_distance(rw, h.split())
        words += len(rw)
    return edits / words


def oracle_wer(ground_truth: str, hypothesis_texts) -> float:
    """Best achievable WER over the hypothesis list."""
    if not hypothesis_texts:
        raise ValueError("oracle over an empty hypothesis list")
    return min(wer(ground_truth, h) for h in hypothesis_texts)


def best_hypothesis(ground_truth: str, hypothesis_texts) -> str:
    return min(hypothesis_texts, key=lambda h: (wer(ground_truth, h), h))


def werr(oracle_avg: float, wer_avg: float) -> float:
    """Relative improvement of wer_avg over the oracle floor, in percent.
    Negative when the system is worse than the oracle by construction; the
    oracle itself is the 0-point reference in the denominator."""
    if oracle_avg == 0:
        raise ValueError("WERR is undefined for a zero oracle WER")
    return (oracle_avg - wer_avg) / oracle_avg * 100.0


def gtmr(ground_truths, predictions, normalized: bool = False) -> float:
    """Percentage of predictions exactly matching their ground truth."""
    pairs = list(zip(ground_truths, predictions, strict=True))
    if not pairs:
        raise ValueError("gtmr needs at least one pair")
    if normalized:
        pairs = [(normalize_text(g), normalize_text(p)) for g, p in pairs]
    hits = sum(1 for g, p in pairs if g == p)
    return 100.0 * hits / len(pairs)


@dataclass
class EvalReport:
    """Corpus-level scores plus a per-utterance detail table."""

    n_utterances: int
    wer_raw: float
    wer_normalized: float
    baseline_wer: float
    oracle_wer: float
    werr: float
    baseline_werr: float
    gtmr_raw: float
    gtmr_normalized: float
    per_utterance: bool = False
    label: str = "eval"
    details: list = field(default_factory=list)

    def to_json(self) -> str:
        payload = {k: getattr(self, k) for k in (
            "label", "n_utterances", "wer_raw", "wer_normalized", "baseline_wer",
            "oracle_wer", "werr", "baseline_werr", "gtmr_raw", "gtmr_normalized",
            "per_utterance")}
        payload["schema_version"] = 1
        payload["details"] = self.details
        return json.dumps(payload, indent=2, sort_keys=True)

    def render_table(self) -> str:
        rows = [
            ("utterances", f"{self.n_utterances}"),
            ("model WER (raw)", f"{100 * self.wer_raw:.2f}"),
            ("model WER (normalized)", f"{100 * self.wer_normalized:.2f}"),
            ("1-best WER", f"{100 * self.baseline_wer:.2f}"),
            ("oracle WER", f"{100 * self.oracle_wer:.2f}"),
            ("WERR", f"{self.werr:.2f}"),
            ("1-best WERR", f"{self.baseline_werr:.2f}"),
            ("GTMR (raw)", f"{self.gtmr_raw:.2f}"),
            ("GTMR (normalized)", f"{self.gtmr_normalized:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"== {self.label} =="]
        lines += [f"{k.ljust(width)}  {v}" for k, v in rows]
        return "\n".join(lines)
