"""Synthetic spoken-utterance corpus.

Each utterance is a short word string plus a feature matrix standing in for
audio: one frame per character, taken from a fixed random codebook, padded
with a silence vector and perturbed by Gaussian noise. Features are a pure
function of (text, seed, sigma), so corpora regenerate bit-identically.

Two text modes: `structured` draws from slot-filling patterns over small word
pools (consistent phrasing), `diverse` draws random word sequences from a
larger fixed vocabulary.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
from dataclasses import dataclass

import numpy as np

from .seeding import derive_seed, rng_for

SILENCE = "<sil>"

STRUCTURED_SLOTS = {
    "verb": ("show", "list", "find", "book", "get"),
    "object": ("flights", "fares", "seats", "times", "gates"),
    "city": ("reno", "nome", "waco", "kona", "hilo", "bend", "mesa", "erie"),
}
STRUCTURED_PATTERNS = (
    ("verb", "object"),
    ("verb", "object", "to", "city"),
    ("object", "to", "city"),
    ("verb", "city", "object"),
)


@dataclass(frozen=True)
class CorpusConfig:
    mode: str = "structured"
    noise_sigma: float = 0.4
    n_frames: int = 32
    feat_dim: int = 32
    max_chars: int = 20
    codebook_tag: str = "codebook-v1"
    patterns: tuple = STRUCTURED_PATTERNS
    slots: tuple = tuple(sorted(STRUCTURED_SLOTS.items()))
    diverse_vocab_size: int = 240

    def __post_init__(self):
        if self.mode not in ("structured", "diverse"):
            raise ValueError(f"unknown corpus mode {self.mode!r}")


@dataclass
class SyntheticUtterance:
    id: str
    ground_truth: str
    features: np.ndarray


@functools.lru_cache(maxsize=8)
def _codebook(tag: str, feat_dim: int) -> dict:
    symbols = [SILENCE] + list("abcdefghijklmnopqrstuvwxyz ")
    return {c: rng_for(tag, "char", c).normal(0.0, 1.0, size=feat_dim)
            for c in symbols}


def features_for(text: str, config: CorpusConfig, seed: int) -> np.ndarray:
    """[n_frames, feat_dim] float32; frame t encodes character t, later frames
    encode silence; deterministic in (text, seed, sigma)."""
    if len(text) > config.n_frames:
        raise ValueError(f"text longer than the frame budget: {text!r}")
    book = _codebook(config.codebook_tag, config.feat_dim)
    frames = np.stack([book[c] for c in text]
                      + [book[SILENCE]] * (config.n_frames - len(text)))
    noise_rng = rng_for(seed, "feat-noise", text, config.noise_sigma)
    frames = frames + noise_rng.normal(0.0, config.noise_sigma, size=frames.shape)
    return frames.astype(np.float32)


def _structured_text(rng: np.random.Generator, config: CorpusConfig) -> str:
    slots = dict(config.slots)
    pattern = config.patterns[rng.integers(len(config.patterns))]
    words = [slots[tok][rng.integers(len(slots[tok]))] if tok in slots else tok
             for tok in pattern]
    return " ".join(words)


@functools.lru_cache(maxsize=4)
def _diverse_vocab(n_words: int) -> tuple:
    rng = rng_for("diverse-vocab-v1", n_words)
    letters = "abcdefghijklmnopqrstuvwxyz"
    words = set()
    while len(words) < n_words:
        length = int(rng.integers(3, 7))
        words.add("".join(letters[i] for i in rng.integers(0, 26, size=length)))
    return tuple(sorted(words))


def _diverse_text(rng: np.random.Generator, config: CorpusConfig) -> str:
    vocab = _diverse_vocab(config.diverse_vocab_size)
    n_words = int(rng.integers(2, 4))
    return " ".join(vocab[rng.integers(len(vocab))] for _ in range(n_words))


def corrupt_text(text: str, rng: np.random.Generator, rate: float) -> str:
    """Typo-style corruption: per character, delete / insert / substitute with
    probability rate/4, rate/4, rate/2. Spaces are never substituted so word
    boundaries mostly survive. Never returns an empty string."""
    letters = "abcdefghijklmnopqrstuvwxyz"
    out = []
    for ch in text:
        r = rng.random()
        if r < rate * 0.25:
            continue
        if r < rate * 0.5:
            out.append(ch)
            out.append(letters[rng.integers(26)])
        elif r < rate and ch != " ":
            out.append(letters[rng.integers(26)])
        else:
            out.append(ch)
    return "".join(out).strip() or text


def synth_corpus(config: CorpusConfig, n: int, seed: int,
                 id_prefix: str = "utt") -> list[SyntheticUtterance]:
    rng = rng_for(seed, "corpus-text", config.mode)
    make = _structured_text if config.mode == "structured" else _diverse_text
    out = []
    for i in range(n):
        while True:
            text = make(rng, config)
            if len(text) <= config.max_chars:
                break
        out.append(SyntheticUtterance(
            id=f"{id_prefix}-{i:06d}", ground_truth=text,
            features=features_for(text, config, seed)))
    return out


# ---------------------------------------------------------------------------
# on-disk layout: features/<id>.npy + utterances.jsonl + config.json


def save_corpus(utterances, config: CorpusConfig, out_dir: str) -> None:
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    with open(os.path.join(out_dir, "utterances.jsonl"), "w", encoding="utf-8") as fh:
        for u in utterances:
            rel = os.path.join("features", f"{u.id}.npy")
            np.save(os.path.join(out_dir, rel), u.features)
            fh.write(json.dumps({"id": u.id, "ground_truth": u.ground_truth,
                                 "features_path": rel}, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        cfg = dataclasses.asdict(config)
        json.dump(cfg, fh, indent=2, sort_keys=True, default=list)


def load_corpus(corpus_dir: str) -> list[SyntheticUtterance]:
    out = []
    path = os.path.join(corpus_dir, "utterances.jsonl")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e})") from None
            feats = np.load(os.path.join(corpus_dir, rec["features_path"]))
            out.append(SyntheticUtterance(id=rec["id"],
                                          ground_truth=rec["ground_truth"],
                                          features=feats))
    return out
