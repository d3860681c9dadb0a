"""N-best hypothesis generation from an acoustic model.

Sampling runs all `count` candidates for one utterance as a single decode
batch: per-sequence temperature drawn once, logits tempered and restricted to
the top-k tokens at each step, and the realized token's log-probability under
the raw (untempered, unrestricted) model distribution accumulated as the
hypothesis score. Raw-sum scoring (no length normalization) is the default
ranking; dedup keeps the best score per exact string.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .seeding import rng_for
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, UNK_ID

# Structural tokens a transcript may never contain; EOS stays samplable.
_BANNED_IDS = (PAD_ID, BOS_ID, UNK_ID)


@dataclass(frozen=True)
class ScoredHypothesis:
    text: str
    log_prob: float


@dataclass
class HypothesisRecord:
    id: str
    ground_truth: str
    features_path: str
    hypotheses: list = field(default_factory=list)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_hypotheses(model, features, *, count: int = 40, k: int = 200,
                      temp_range=(0.7, 0.8), seed: int = 0,
                      length_normalize: bool = False) -> list[ScoredHypothesis]:
    """Draw `count` transcripts for one utterance's features."""
    vocab = model.config.vocab_size
    if k > vocab:
        warnings.warn(f"top-k {k} exceeds vocab {vocab}; clamping")
        k = vocab
    if k < 1:
        raise ValueError("top-k must be at least 1")
    rng = rng_for(seed, "hyp-sample")
    temps = rng.uniform(temp_range[0], temp_range[1], size=count)

    with T.no_grad():
        h_one = model.encode(np.asarray(features)[None, ...])
        h = T.Tensor(np.repeat(h_one.data, count, axis=0))
        caches = model.new_caches()
        ids = np.full((count, 1), BOS_ID, dtype=np.int64)
        logits = model.decode_logits(ids, h, caches)
        alive = np.ones(count, dtype=bool)
        log_probs = np.zeros(count)
        lengths = np.zeros(count)
        rows: list[list[int]] = [[] for _ in range(count)]
        for _ in range(model.config.max_text_len + 1):
            step = logits.data[:, -1].astype(np.float64)
            raw_logp = _log_softmax(step)
            scaled = step / temps[:, None]
            scaled[:, list(_BANNED_IDS)] = -np.inf
            if k < vocab:
                kth = np.partition(scaled, vocab - k, axis=-1)[:, vocab - k]
                scaled = np.where(scaled >= kth[:, None], scaled, -np.inf)
            probs = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
            probs /= probs.sum(axis=-1, keepdims=True)
            draws = rng.random(count)
            nxt = np.full(count, PAD_ID, dtype=np.int64)
            for i in np.flatnonzero(alive):
                cdf = probs[i].cumsum()
                j = int(np.searchsorted(cdf, draws[i], side="right"))
                if j >= vocab or probs[i, j] == 0.0:
                    j = int(np.flatnonzero(probs[i] > 0)[-1])
                nxt[i] = j
                log_probs[i] += raw_logp[i, j]
                lengths[i] += 1
                if j == EOS_ID:
                    alive[i] = False
                else:
                    rows[i].append(j)
            if not alive.any():
                break
            logits = model.decode_logits(nxt[:, None], None, caches)

    out = []
    for i in range(count):
        score = log_probs[i] / max(lengths[i], 1) if length_normalize else log_probs[i]
        out.append(ScoredHypothesis(text=model.tokenizer.decode(rows[i]),
                                    log_prob=float(score)))
    return out


def dedupe_rank(samples, n_select: int = 15) -> list[ScoredHypothesis]:
    """Exact-string dedup keeping each string's best score, then sort by
    descending score (ties broken lexicographically) and truncate."""
    best: dict[str, float] = {}
    for s in samples:
        if s.text not in best or s.log_prob > best[s.text]:
            best[s.text] = s.log_prob
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    return [ScoredHypothesis(text=t, log_prob=lp) for t, lp in ranked[:n_select]]


def strip_ground_truth(record: HypothesisRecord) -> HypothesisRecord:
    """Drop hypotheses string-equal to the ground truth. If nothing remains,
    keep the pre-strip list (such records are evaluated but never trained on;
    see is_trainable)."""
    kept = [h for h in record.hypotheses if h.text != record.ground_truth]
    if not kept:
        warnings.warn(f"record {record.id}: all hypotheses equal the ground truth; "
                      "keeping pre-strip list, record excluded from training")
        return record
    return replace(record, hypotheses=kept)


def is_trainable(record: HypothesisRecord) -> bool:
    """Training uses only records with a non-empty, fully stripped list."""
    return bool(record.hypotheses) and all(
        h.text != record.ground_truth for h in record.hypotheses)


def generate_record(model, utterance, features_path: str, *, seed: int,
                    count: int = 40, k: int = 200, temp_range=(0.7, 0.8),
                    n_select: int = 15, length_normalize: bool = False) -> HypothesisRecord:
    """Full per-utterance pipeline: sample, dedupe/rank, strip."""
    samples = sample_hypotheses(model, utterance.features, count=count, k=k,
                                temp_range=temp_range, seed=seed,
                                length_normalize=length_normalize)
    record = HypothesisRecord(id=utterance.id, ground_truth=utterance.ground_truth,
                              features_path=features_path,
                              hypotheses=dedupe_rank(samples, n_select))
    return strip_ground_truth(record)
