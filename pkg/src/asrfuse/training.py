"""Optimization and the three loops: model pretraining, fusion-adapter
training with early stopping on validation WER, and evaluation.

Adapter training follows a fixed recipe: Adam moments (0.9, 0.999) with
decoupled weight decay, learning rate restricted to a three-value sweep grid
unless overridden, at most 25 epochs, effective batch 32 reached through
gradient accumulation over length-sorted micro-batches, and early stopping
with patience 5 on validation WER. The best-validation checkpoint is what
training returns.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import corrupt_text
from .metrics import (EvalReport, corpus_wer, gtmr, normalize_text, werr,
                      word_edit_distance)
from .prompting import build_prompt, build_sample, masked_cross_entropy
from .seeding import derive_seed, rng_for
from .tensor import Tensor
from .tokenizer import PAD_ID

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ALLOWED_LRS = (1e-2, 1e-3, 5e-4)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the curve collected so far."""

    def __init__(self, message: str, curve):
        super().__init__(message)
        self.curve = curve


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 25
    batch_size: int = 32
    micro_batch: int = 8
    weight_decay: float = 1e-2
    patience: int = 5
    seed: int = 0
    masked_loss: bool = True
    override: bool = False

    def __post_init__(self):
        if not self.override and self.learning_rate not in ALLOWED_LRS:
            raise ValueError(
                f"learning rate {self.learning_rate} outside the sweep grid "
                f"{ALLOWED_LRS}; pass override to leave the recipe")
        if self.batch_size % self.micro_batch:
            raise ValueError("micro_batch must divide batch_size")


class AdamW:
    """Adam with decoupled weight decay. Parameters without a gradient are
    skipped entirely, so frozen tensors are never touched."""

    def __init__(self, tensors, lr: float, weight_decay: float = 0.0,
                 betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.tensors = [t for t in tensors if t.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.tensors, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m[...] = self.b1 * m + (1.0 - self.b1) * g
            v[...] = self.b2 * v + (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data  # decay theta_t
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.tensors:
            p.zero_grad()


# ---------------------------------------------------------------------------
# batching


def pad_batch(id_lists, pad_id: int = PAD_ID) -> np.ndarray:
    t_max = max(len(ids) for ids in id_lists)
    out = np.full((len(id_lists), t_max), pad_id, dtype=np.int64)
    for i, ids in enumerate(id_lists):
        out[i, :len(ids)] = ids
    return out


def _length_sorted_batches(items, batch_size, length_of, rng):
    order = sorted(range(len(items)), key=lambda i: (length_of(items[i]), i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return [[items[i] for i in b] for b in batches]


def _token_batch_loss(model, id_lists, audio_kv=None, loss_masks=None,
                      masked: bool = True) -> Tensor:
    ids = pad_batch(id_lists)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    logits = model.logits(inputs, audio_kv)
    if loss_masks is None:
        return T.cross_entropy(logits, targets, (targets != PAD_ID).astype(np.float64))
    padded = np.zeros(targets.shape, dtype=np.float64)
    for i, mask in enumerate(loss_masks):
        padded[i, :len(mask)] = mask
    return masked_cross_entropy(logits, targets, padded, masked=masked)


# ---------------------------------------------------------------------------
# pretraining (invented plumbing: stands in for public checkpoints)


@dataclass(frozen=True)
class PretrainBudget:
    """Calibrated so the whole pretrain stage runs in a couple of minutes on
    one CPU core: strong transcriber reaches near-zero validation WER, the
    weak one lands around 0.6 (errorful but far below the no-model baseline).

    The hypothesis-count range must straddle the list length used for the
    real fusion prompts; otherwise response positions at fusion time fall on
    position embeddings the frozen LM never trained."""

    lm_docs: int = 2400
    lm_epochs: int = 3
    lm_batch: int = 8
    lm_lr: float = 1e-3
    prompt_doc_frac: float = 0.5
    corruption_low: float = 0.05
    corruption_high: float = 0.6
    unrelated_frac: float = 0.3
    doc_hyps_low: int = 12
    doc_hyps_high: int = 16
    strong_epochs: int = 7
    weak_epochs: int = 5
    weak_frac: float = 0.5
    acoustic_batch: int = 16
    acoustic_lr: float = 3e-3


def build_pretrain_docs(utterances, tokenizer, budget: PretrainBudget, seed: int,
                        template_id: str):
    """LM pretraining diet: (token_ids, loss_mask) pairs mixing prompt-shaped
    documents with plain text documents.

    A prompt doc's input lines mix corruptions of the response (at a per-line
    rate drawn from a wide range) with entirely unrelated transcripts,
    mimicking a real n-best list; its loss mask covers only the clean
    response and the trailing end marker. Supervising the noisy lines
    themselves would teach the model the corruption statistics, so they stay
    input-only. Plain docs are fully supervised multi-line transcripts that
    drill the sentence grammar across the same depth range the prompts
    occupy, all before any adapter exists."""
    rng = rng_for(seed, "lm-docs")
    texts = [u.ground_truth for u in utterances]
    docs = []
    for _ in range(budget.lm_docs):
        text = texts[rng.integers(len(texts))]
        if rng.random() < budget.prompt_doc_frac:
            n_h = int(rng.integers(budget.doc_hyps_low, budget.doc_hyps_high))
            hyps = []
            for _ in range(n_h):
                if rng.random() < budget.unrelated_frac:
                    hyps.append(texts[rng.integers(len(texts))])
                else:
                    rate = rng.uniform(budget.corruption_low,
                                       budget.corruption_high)
                    hyps.append(corrupt_text(text, rng, rate))
            prompt_ids = tokenizer.encode(build_prompt(hyps, template_id),
                                          bos=True, eos=False)
            ids = prompt_ids + tokenizer.encode(text, bos=False, eos=True)
            mask = np.zeros(len(ids) - 1, dtype=np.float64)
            mask[len(prompt_ids) - 1:] = 1.0
        else:
            lines = [texts[rng.integers(len(texts))]
                     for _ in range(int(rng.integers(2, 17)))]
            ids = tokenizer.encode("\n".join(lines), bos=True, eos=True)
            mask = np.ones(len(ids) - 1, dtype=np.float64)
        docs.append((ids, mask))
    return docs


def _fit_token_model(model, docs, epochs, batch, lr, seed, label, log=None):
    opt = AdamW([t for _, t in model.named_tensors() if t.requires_grad], lr)
    rng = rng_for(seed, "fit-order", label)
    last = float("nan")
    for epoch in range(1, epochs + 1):
        losses = []
        for mb in _length_sorted_batches(docs, batch, lambda d: len(d[0]), rng):
            opt.zero_grad()
            loss = _token_batch_loss(model, [d[0] for d in mb],
                                     loss_masks=[d[1] for d in mb])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        last = float(np.mean(losses))
        if log:
            log(f"{label}: epoch {epoch} loss {last:.4f}")
    return last


def _fit_acoustic(model, utterances, epochs, batch, lr, seed, label, log=None):
    tok = model.tokenizer
    items = [(u.features, tok.encode(u.ground_truth, bos=True, eos=True))
             for u in utterances]
    opt = AdamW(model.trainable_tensors(), lr)
    rng = rng_for(seed, "fit-order", label)
    last = float("nan")
    for epoch in range(1, epochs + 1):
        losses = []
        for mb in _length_sorted_batches(items, batch, lambda it: len(it[1]), rng):
            feats = np.stack([f for f, _ in mb])
            ids = pad_batch([i for _, i in mb])
            opt.zero_grad()
            h = model.encode(feats)
            logits = model.decode_logits(ids[:, :-1], h)
            loss = T.cross_entropy(logits, ids[:, 1:],
                                   (ids[:, 1:] != PAD_ID).astype(np.float64))
            loss.backward()
            opt.step()
            losses.append(loss.item())
        last = float(np.mean(losses))
        if log:
            log(f"{label}: epoch {epoch} loss {last:.4f}")
    return last


def pretrain_toy_models(train_utterances, lm, strong, weak,
                        budget: PretrainBudget, seed: int, template_id: str,
                        log=None) -> dict:
    """Train the three base models on the synthetic corpus, then freeze them.
    The weak transcriber sees only a fraction of the data for fewer epochs,
    so its hypotheses are plausibly errorful."""
    docs = build_pretrain_docs(train_utterances, lm.tokenizer, budget, seed,
                               template_id)
    lm_loss = _fit_token_model(lm, docs, budget.lm_epochs, budget.lm_batch,
                               budget.lm_lr, seed, "lm", log)
    strong_loss = _fit_acoustic(strong, train_utterances, budget.strong_epochs,
                                budget.acoustic_batch, budget.acoustic_lr,
                                derive_seed(seed, "strong"), "strong", log)
    n_weak = max(1, int(len(train_utterances) * budget.weak_frac))
    weak_loss = _fit_acoustic(weak, train_utterances[:n_weak], budget.weak_epochs,
                              budget.acoustic_batch, budget.acoustic_lr,
                              derive_seed(seed, "weak"), "weak", log)
    if not all(np.isfinite([lm_loss, strong_loss, weak_loss])):
        raise TrainingDiverged("pretraining produced a non-finite loss", [])
    lm.freeze_base()
    strong.freeze()
    weak.freeze()
    return {"lm_loss": lm_loss, "strong_loss": strong_loss, "weak_loss": weak_loss}


# ---------------------------------------------------------------------------
# fusion-adapter training


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)  # (epoch, step, loss) rows
    best_val_wer: float = float("inf")
    best_epoch: int = 0
    epochs_run: int = 0
    final_train_loss: float = float("nan")
    val_wers: list = field(default_factory=list)


def write_loss_curve(path: str, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss"])
        w.writerows(curve)


def _snapshot(model) -> dict:
    return {n: t.data.copy() for n, t in model.trainable_named()}


def _restore(model, snap: dict) -> None:
    for n, t in model.trainable_named():
        t.data[...] = snap[n]


def _batch_audio_kv(lm, encoder, samples, random_features: bool, seed: int):
    if not lm.config.use_acoustic:
        return None
    cfg = lm.config
    if random_features:
        h = np.stack([rng_for(seed, "random-features", s.id)
                      .standard_normal((cfg.audio_len, cfg.audio_dim))
                      for s in samples]).astype(lm.dtype)
        h_audio = Tensor(h)
    else:
        with T.no_grad():
            h_audio = encoder.encode(np.stack([s.features for s in samples]))
    return lm.fuse_audio(h_audio.detach())


def train_adapters(lm, encoder, train_samples, val_records, val_features,
                   cfg: TrainConfig, *, template_id: str,
                   random_features: bool = False, log=None) -> TrainResult:
    if not train_samples:
        raise ValueError("no trainable samples")
    opt = AdamW(lm.trainable_tensors(), cfg.learning_rate, cfg.weight_decay)
    accum = cfg.batch_size // cfg.micro_batch
    res = TrainResult()
    best_snap = _snapshot(lm)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            rng = rng_for(cfg.seed, "train-order", epoch)
            epoch_losses = []
            micro = 0
            opt.zero_grad()
            for mb in _length_sorted_batches(train_samples, cfg.micro_batch,
                                             lambda s: len(s.token_ids), rng):
                audio_kv = _batch_audio_kv(lm, encoder, mb, random_features, cfg.seed)
                loss = _token_batch_loss(lm, [s.token_ids for s in mb], audio_kv,
                                         [s.loss_mask for s in mb],
                                         masked=cfg.masked_loss)
                T.mul(loss, 1.0 / accum).backward()
                step += 1
                micro += 1
                epoch_losses.append(loss.item())
                res.curve.append((epoch, step, loss.item()))
                if micro % accum == 0:
                    opt.step()
                    opt.zero_grad()
            if micro % accum:
                opt.step()
                opt.zero_grad()
            res.final_train_loss = float(np.mean(epoch_losses))
            report = evaluate(lm, encoder, val_records, val_features,
                              template_id=template_id,
                              random_features=random_features,
                              random_features_seed=cfg.seed, label="val")
            val_wer = report.wer_normalized
            res.val_wers.append(val_wer)
            res.epochs_run = epoch
            if log:
                log(f"epoch {epoch}: train loss {res.final_train_loss:.4f} "
                    f"val WER {100 * val_wer:.2f}")
            if val_wer < res.best_val_wer:
                res.best_val_wer = val_wer
                res.best_epoch = epoch
                best_snap = _snapshot(lm)
            elif epoch - res.best_epoch >= cfg.patience:
                break
    except T.NonFiniteError as e:
        raise TrainingDiverged(
            f"training diverged at step {step} (lr={cfg.learning_rate}): {e}",
            res.curve) from e
    _restore(lm, best_snap)
    return res


def sweep_learning_rates(make_lm, encoder, train_samples, val_records, val_features,
                         base_cfg: TrainConfig, *, template_id: str, log=None):
    """Serialized sweep over the recipe grid; best validation WER wins."""
    best = None
    for lr in ALLOWED_LRS:
        cfg = TrainConfig(**{**base_cfg.__dict__, "learning_rate": lr})
        lm = make_lm()
        try:
            res = train_adapters(lm, encoder, train_samples, val_records,
                                 val_features, cfg, template_id=template_id, log=log)
        except TrainingDiverged as e:
            if log:
                log(f"lr {lr}: diverged ({e})")
            continue
        if log:
            log(f"lr {lr}: best val WER {100 * res.best_val_wer:.2f}")
        if best is None or res.best_val_wer < best[2].best_val_wer:
            best = (lr, lm, res)
    if best is None:
        raise TrainingDiverged("all sweep learning rates diverged", [])
    return best


# ---------------------------------------------------------------------------
# evaluation


def evaluate(lm, encoder, records, features_by_id, *, template_id: str,
             random_features: bool = False, random_features_seed: int = 0,
             per_utterance: bool = False, label: str = "eval",
             collect_details: bool = False) -> EvalReport:
    """Greedy-decode a prediction per record and score the corpus.

    Pooled scores (default) divide summed edits by summed reference words;
    oracle picks the best hypothesis per record before pooling. WERR values
    use the normalized-text scores.
    """
    if not records:
        raise ValueError("evaluate needs at least one record")
    tok = lm.tokenizer
    preds = []
    for rec in records:
        prompt_ids = tok.encode(build_prompt(rec.hypotheses, template_id), bos=True)
        audio_kv = None
        if lm.config.use_acoustic:
            if random_features:
                h = rng_for(random_features_seed, "random-features", rec.id) \
                    .standard_normal((lm.config.audio_len, lm.config.audio_dim))
                h_audio = Tensor(h[None, ...].astype(lm.dtype))
            else:
                with T.no_grad():
                    h_audio = encoder.encode(features_by_id[rec.id][None, ...])
            with T.no_grad():
                audio_kv = lm.fuse_audio(h_audio.detach())
        preds.append(tok.decode(lm.greedy_response(prompt_ids, audio_kv)))

    refs = [r.ground_truth for r in records]
    one_best = [r.hypotheses[0].text for r in records]
    n_refs = [normalize_text(t) for t in refs]
    n_preds = [normalize_text(t) for t in preds]
    n_best = [normalize_text(t) for t in one_best]
    oracle_choices = []
    for rec, nref in zip(records, n_refs):
        hyps = [normalize_text(h.text) for h in rec.hypotheses]
        oracle_choices.append(min(
            hyps, key=lambda h: (word_edit_distance(nref.split(), h.split()), h)))

    wer_norm = corpus_wer(n_refs, n_preds, per_utterance)
    oracle = corpus_wer(n_refs, oracle_choices, per_utterance)
    baseline = corpus_wer(n_refs, n_best, per_utterance)
    report = EvalReport(
        n_utterances=len(records),
        wer_raw=corpus_wer(refs, preds, per_utterance),
        wer_normalized=wer_norm,
        baseline_wer=baseline,
        oracle_wer=oracle,
        werr=werr(oracle, wer_norm) if oracle else float("nan"),
        baseline_werr=werr(oracle, baseline) if oracle else float("nan"),
        gtmr_raw=gtmr(refs, preds),
        gtmr_normalized=gtmr(refs, preds, normalized=True),
        per_utterance=per_utterance,
        label=label,
    )
    if collect_details:
        report.details = [
            {"id": rec.id, "ground_truth": ref, "prediction": pred,
             "one_best": ob} for rec, ref, pred, ob in
            zip(records, refs, preds, one_best)]
    return report
