"""Experiment orchestration over a data-root directory tree.

Layout under the data root (override with the ASRFUSE_DATA environment
variable or --data-root):

    <corpus>/features/*.npy, utterances.jsonl, config.json, splits.json
    <models>/lm.ckpt, strong.ckpt, weak.ckpt, pretrain.json
    <run>/manifest-<split>[-strong].jsonl
    <run>/adapters-<label>.ckpt, loss-curve-<label>.csv,
          train-meta-<label>.json, report-<label>-<split>.json

Every stage derives its randomness from one seed via purpose-tagged hashing,
so a pinned (seed, config) pair reproduces manifests, checkpoints, and
metrics byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .bridge import transplant_cross_attention
from .checkpoint import (assign_named, assign_tensors, load_checkpoint,
                         save_checkpoint)
from .corpus import CorpusConfig, load_corpus, save_corpus, synth_corpus
from .fusion import ModelConfig
from .hypotheses import generate_record, is_trainable
from .manifest import load_manifest, save_manifest
from .metrics import corpus_wer, normalize_text
from .models import (STRONG_ACOUSTIC, WEAK_ACOUSTIC, AcousticConfig,
                     ToyAcoustic, ToyLM)
from .prompting import DEFAULT_TEMPLATE_ID, build_sample
from .seeding import derive_seed
from .tokenizer import audio_tokenizer, lm_tokenizer
from .training import (PretrainBudget, TrainConfig, evaluate,
                       pretrain_toy_models, train_adapters, write_loss_curve)

DATA_ROOT_ENV = "ASRFUSE_DATA"
DEFAULT_SPLITS = {"train": 2000, "val": 120, "test": 240}
ABLATIONS = ("no-masking", "random-features", "no-init", "no-sa-w", "big-adapter")
STANDARD_LABEL = "standard"

# Sanity gate for the pretrained transcribers, measured on the validation
# split with normalized text. Pinned from the first calibration run at the
# default budget (strong greedy WER 0.009, weak 0.601, no-model baseline
# 0.911); generous headroom so unrelated refactors do not trip it.
STRONG_SANITY_MAX_WER = 0.30


class PipelineError(RuntimeError):
    pass


def resolve_data_root(flag: str | None = None) -> str:
    return flag or os.environ.get(DATA_ROOT_ENV) or os.path.join(
        os.getcwd(), "asrfuse-data")


def _under(root: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(root, path)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# corpus + splits


def run_synth(data_root: str, out: str, *, mode: str = "structured",
              seed: int = 0, noise_sigma: float = 0.4,
              n_train: int = DEFAULT_SPLITS["train"],
              n_val: int = DEFAULT_SPLITS["val"],
              n_test: int = DEFAULT_SPLITS["test"]) -> dict:
    out_dir = _under(data_root, out)
    os.makedirs(out_dir, exist_ok=True)
    config = CorpusConfig(mode=mode, noise_sigma=noise_sigma)
    total = n_train + n_val + n_test
    utts = synth_corpus(config, total, seed=seed)
    save_corpus(utts, config, out_dir)
    ids = [u.id for u in utts]
    splits = {"train": ids[:n_train],
              "val": ids[n_train:n_train + n_val],
              "test": ids[n_train + n_val:total]}
    _write_json(os.path.join(out_dir, "splits.json"), {"seed": seed, "splits": splits})
    return {"corpus": out_dir, "n": total, "mode": mode,
            "splits": {k: len(v) for k, v in splits.items()}}


def load_split(corpus_dir: str, split: str):
    utts = {u.id: u for u in load_corpus(corpus_dir)}
    meta = _read_json(os.path.join(corpus_dir, "splits.json"))
    if split not in meta["splits"]:
        raise PipelineError(f"unknown split {split!r}; have {sorted(meta['splits'])}")
    return [utts[i] for i in meta["splits"][split]]


def load_features_by_id(corpus_dir: str, records) -> dict:
    return {r.id: np.load(os.path.join(corpus_dir, r.features_path))
            for r in records}


# ---------------------------------------------------------------------------
# pretraining


def _no_model_baseline(train_utts, held_out) -> float:
    """WER of always predicting the most common training transcript."""
    pred = normalize_text(Counter(u.ground_truth for u in train_utts).most_common(1)[0][0])
    refs = [normalize_text(u.ground_truth) for u in held_out]
    return corpus_wer(refs, [pred] * len(refs))


def _transcribe_wer(model: ToyAcoustic, utts, batch: int = 32) -> float:
    preds = []
    for i in range(0, len(utts), batch):
        chunk = utts[i:i + batch]
        preds += model.transcribe(np.stack([u.features for u in chunk]))
    refs = [normalize_text(u.ground_truth) for u in utts]
    return corpus_wer(refs, [normalize_text(p) for p in preds])


def run_pretrain(data_root: str, corpus: str, out: str, *, seed: int = 0,
                 budget: PretrainBudget | None = None, log=None) -> dict:
    corpus_dir = _under(data_root, corpus)
    out_dir = _under(data_root, out)
    os.makedirs(out_dir, exist_ok=True)
    budget = budget or PretrainBudget()
    train = load_split(corpus_dir, "train")
    val = load_split(corpus_dir, "val")

    lm = ToyLM(ModelConfig(), lm_tokenizer(), seed=derive_seed(seed, "lm-init"),
               dtype=np.float32)
    strong = ToyAcoustic(STRONG_ACOUSTIC, audio_tokenizer(),
                         seed=derive_seed(seed, "strong-init"), dtype=np.float32)
    weak = ToyAcoustic(WEAK_ACOUSTIC, audio_tokenizer(),
                       seed=derive_seed(seed, "weak-init"), dtype=np.float32)
    losses = pretrain_toy_models(train, lm, strong, weak, budget,
                                 derive_seed(seed, "pretrain"),
                                 DEFAULT_TEMPLATE_ID, log=log)

    baseline = _no_model_baseline(train, val)
    strong_wer = _transcribe_wer(strong, val)
    weak_wer = _transcribe_wer(weak, val)
    if strong_wer >= baseline or weak_wer >= baseline:
        raise PipelineError(
            f"pretrained transcribers failed the no-model sanity gate: "
            f"strong {strong_wer:.3f}, weak {weak_wer:.3f}, baseline {baseline:.3f}")
    if strong_wer > STRONG_SANITY_MAX_WER:
        raise PipelineError(
            f"strong transcriber WER {strong_wer:.3f} exceeds the pinned gate "
            f"{STRONG_SANITY_MAX_WER}")

    save_checkpoint(os.path.join(out_dir, "lm.ckpt"), "lm-base",
                    lm.config_dict(), lm.base_named())
    save_checkpoint(os.path.join(out_dir, "strong.ckpt"), "acoustic",
                    strong.config_dict(), strong.named_tensors())
    save_checkpoint(os.path.join(out_dir, "weak.ckpt"), "acoustic",
                    weak.config_dict(), weak.named_tensors())
    meta = {"seed": seed, "corpus": corpus, "budget": dataclasses.asdict(budget),
            "losses": losses, "val_wer": {"strong": strong_wer, "weak": weak_wer,
                                          "no_model_baseline": baseline}}
    _write_json(os.path.join(out_dir, "pretrain.json"), meta)
    return meta


def load_acoustic(path: str) -> ToyAcoustic:
    ck = load_checkpoint(path)
    model = ToyAcoustic(AcousticConfig(**ck.config), audio_tokenizer(),
                        seed=0, dtype=np.float32)
    assign_tensors(model, ck)
    model.freeze()
    return model


# ---------------------------------------------------------------------------
# hypothesis generation


def _manifest_name(split: str, source: str) -> str:
    return f"manifest-{split}.jsonl" if source == "weak" else \
        f"manifest-{split}-{source}.jsonl"


def run_hypgen(data_root: str, corpus: str, models: str, run: str, *,
               split: str, source: str = "weak", seed: int = 0,
               count: int = 40, k: int = 200, n_select: int = 15,
               length_normalize: bool = False, log=None) -> dict:
    if source not in ("weak", "strong"):
        raise PipelineError(f"unknown hypothesis source {source!r}")
    corpus_dir = _under(data_root, corpus)
    run_dir = _under(data_root, run)
    os.makedirs(run_dir, exist_ok=True)
    model = load_acoustic(os.path.join(_under(data_root, models), f"{source}.ckpt"))
    utts = load_split(corpus_dir, split)
    records = []
    for u in utts:
        records.append(generate_record(
            model, u, os.path.join("features", f"{u.id}.npy"),
            seed=derive_seed(seed, "hypgen", source, u.id),
            count=count, k=k, n_select=n_select,
            length_normalize=length_normalize))
        if log and len(records) % 200 == 0:
            log(f"hypgen {split}/{source}: {len(records)}/{len(utts)}")
    path = os.path.join(run_dir, _manifest_name(split, source))
    save_manifest(records, path)
    refs = [normalize_text(r.ground_truth) for r in records]
    one_best = corpus_wer(refs, [normalize_text(r.hypotheses[0].text)
                                 for r in records])
    oracle = corpus_wer(refs, [
        min((normalize_text(h.text) for h in r.hypotheses),
            key=lambda h, ref=ref: _edits(ref, h))
        for r, ref in zip(records, refs)])
    return {"manifest": path, "n": len(records), "one_best_wer": one_best,
            "oracle_wer": oracle,
            "trainable": sum(is_trainable(r) for r in records)}


def _edits(ref: str, hyp: str) -> int:
    from .metrics import word_edit_distance
    return word_edit_distance(ref.split(), hyp.split())


# ---------------------------------------------------------------------------
# fused-model assembly and adapter training


def ablation_variant(base: ModelConfig, ablation: str | None):
    """Model-side knobs for each ablation: (config, adapter_init, diagonal)."""
    if ablation in (None, "no-masking", "random-features"):
        return base, "identity", True
    if ablation == "no-init":
        return base, "random", False
    if ablation == "no-sa-w":
        return dataclasses.replace(base, use_acoustic=False), "identity", True
    if ablation == "big-adapter":
        return dataclasses.replace(base, use_acoustic=False,
                                   prefix_len=4 * base.prefix_len), "identity", True
    raise PipelineError(f"unknown ablation {ablation!r}; have {ABLATIONS}")


def model_config_from(config_dict: dict) -> ModelConfig:
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in config_dict.items() if k in names})


def assemble_fused(models_dir: str, *, ablation: str | None = None,
                   seed: int = 0) -> tuple[ToyLM, ToyAcoustic | None]:
    """Frozen base LM + adapters per the ablation, with acoustic K/V
    transplanted from the strong model's decoder cross-attention."""
    base_ck = load_checkpoint(os.path.join(models_dir, "lm.ckpt"))
    cfg, init, diagonal = ablation_variant(model_config_from(base_ck.config),
                                           ablation)
    lm = ToyLM(cfg, lm_tokenizer(), seed=derive_seed(seed, "adapter-init"),
               dtype=np.float32, adapter_init=init, diagonal_template=diagonal)
    assign_named(lm.base_named(), base_ck)
    encoder = None
    if cfg.use_acoustic:
        encoder = load_acoustic(os.path.join(models_dir, "strong.ckpt"))
        transplant_cross_attention(encoder, lm.fusion_layers())
    lm.freeze_base()
    return lm, encoder


def build_samples(records, tokenizer, features_by_id):
    """Training-ready samples for every trainable record."""
    samples = []
    for rec in records:
        if not is_trainable(rec):
            continue
        s = build_sample(rec.id, rec.ground_truth,
                         [h.text for h in rec.hypotheses], tokenizer,
                         features_path=rec.features_path)
        s.features = features_by_id[rec.id]
        samples.append(s)
    return samples


def run_train(data_root: str, corpus: str, models: str, run: str, *,
              seed: int = 0, ablation: str | None = None,
              source: str = "weak", label: str | None = None,
              learning_rate: float = 1e-2, epochs: int = 25,
              batch_size: int = 32, micro_batch: int = 8, patience: int = 5,
              override: bool = False, log=None) -> dict:
    corpus_dir = _under(data_root, corpus)
    models_dir = _under(data_root, models)
    run_dir = _under(data_root, run)
    os.makedirs(run_dir, exist_ok=True)
    label = label or (ablation or STANDARD_LABEL)

    train_records = load_manifest(os.path.join(run_dir, _manifest_name("train", source)))
    val_records = load_manifest(os.path.join(run_dir, _manifest_name("val", source)))
    feats_train = load_features_by_id(corpus_dir, train_records)
    feats_val = load_features_by_id(corpus_dir, val_records)

    lm, encoder = assemble_fused(models_dir, ablation=ablation, seed=seed)
    samples = build_samples(train_records, lm.tokenizer, feats_train)
    cfg = TrainConfig(learning_rate=learning_rate, epochs=epochs,
                      batch_size=batch_size, micro_batch=micro_batch,
                      patience=patience, seed=derive_seed(seed, "train", label),
                      masked_loss=ablation != "no-masking", override=override)
    random_features = ablation == "random-features"
    try:
        res = train_adapters(lm, encoder, samples, val_records, feats_val, cfg,
                             template_id=DEFAULT_TEMPLATE_ID,
                             random_features=random_features, log=log)
    except Exception as e:
        curve = getattr(e, "curve", None)
        if curve:
            write_loss_curve(os.path.join(run_dir, f"loss-curve-{label}.csv"), curve)
        raise

    save_checkpoint(os.path.join(run_dir, f"adapters-{label}.ckpt"), "lm-fused",
                    lm.config_dict(), lm.named_tensors())
    write_loss_curve(os.path.join(run_dir, f"loss-curve-{label}.csv"), res.curve)
    meta = {
        "label": label, "ablation": ablation, "source": source, "seed": seed,
        "corpus": corpus, "models": models,
        "learning_rate": learning_rate, "epochs": epochs,
        "batch_size": batch_size, "micro_batch": micro_batch,
        "patience": patience, "masked_loss": cfg.masked_loss,
        "random_features": random_features,
        "n_train_records": len(train_records), "n_train_samples": len(samples),
        "epochs_run": res.epochs_run, "best_epoch": res.best_epoch,
        "best_val_wer": res.best_val_wer,
        "final_train_loss": res.final_train_loss, "val_wers": res.val_wers,
    }
    _write_json(os.path.join(run_dir, f"train-meta-{label}.json"), meta)
    return meta


def load_fused(run_dir: str, label: str) -> ToyLM:
    ck = load_checkpoint(os.path.join(run_dir, f"adapters-{label}.ckpt"))
    lm = ToyLM(model_config_from(ck.config), lm_tokenizer(), seed=0,
               dtype=np.float32, adapter_init=ck.config["adapter_init"],
               diagonal_template=ck.config["diagonal_template"])
    assign_tensors(lm, ck)
    lm.freeze_base()
    return lm


def run_eval(data_root: str, run: str, *, split: str = "test",
             label: str = STANDARD_LABEL, per_utterance: bool = False,
             collect_details: bool = False, log=None) -> dict:
    run_dir = _under(data_root, run)
    meta = _read_json(os.path.join(run_dir, f"train-meta-{label}.json"))
    corpus_dir = _under(data_root, meta["corpus"])
    models_dir = _under(data_root, meta["models"])
    lm = load_fused(run_dir, label)
    encoder = None
    if lm.config.use_acoustic:
        encoder = load_acoustic(os.path.join(models_dir, "strong.ckpt"))
    records = load_manifest(os.path.join(run_dir,
                                         _manifest_name(split, meta["source"])))
    feats = load_features_by_id(corpus_dir, records)
    report = evaluate(lm, encoder, records, feats,
                      template_id=DEFAULT_TEMPLATE_ID,
                      random_features=meta["random_features"],
                      random_features_seed=derive_seed(meta["seed"], "train",
                                                       label),
                      per_utterance=per_utterance,
                      label=f"{label}/{split}", collect_details=collect_details)
    path = os.path.join(run_dir, f"report-{label}-{split}.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    if log:
        log(report.render_table())
    return json.loads(report.to_json())


# ---------------------------------------------------------------------------
# ablations and the strong-hypothesis comparison


def run_ablate(data_root: str, corpus: str, models: str, run: str, *,
               seed: int = 0, learning_rate: float = 1e-2, epochs: int = 2,
               batch_size: int = 32, micro_batch: int = 8,
               override: bool = False, log=None) -> dict:
    """Standard run plus every ablation at one equal budget, with the
    qualitative direction checks collected into one report."""
    results = {}
    for ablation in (None,) + ABLATIONS:
        label = ablation or STANDARD_LABEL
        if log:
            log(f"=== ablate: {label} ===")
        meta = run_train(data_root, corpus, models, run, seed=seed,
                         ablation=ablation, learning_rate=learning_rate,
                         epochs=epochs, batch_size=batch_size,
                         micro_batch=micro_batch, patience=max(epochs, 25),
                         override=override, log=log)
        report = run_eval(data_root, run, split="test", label=label, log=log)
        results[label] = {"final_train_loss": meta["final_train_loss"],
                          "test_wer": report["wer_normalized"],
                          "best_val_wer": meta["best_val_wer"],
                          "werr": report["werr"]}
    std = results[STANDARD_LABEL]
    directions = {
        "random_features_loss_above_standard":
            results["random-features"]["final_train_loss"] > std["final_train_loss"],
        "no_init_loss_above_standard":
            results["no-init"]["final_train_loss"] > std["final_train_loss"],
        "no_masking_wer_above_standard":
            results["no-masking"]["test_wer"] > std["test_wer"],
    }
    payload = {"seed": seed, "epochs": epochs, "results": results,
               "directions": directions}
    _write_json(os.path.join(_under(data_root, run), "ablate-report.json"), payload)
    return payload


def run_compare_strong(data_root: str, corpus: str, models: str, run: str, *,
                       seed: int = 0, learning_rate: float = 1e-2,
                       epochs: int = 2, batch_size: int = 32,
                       micro_batch: int = 8, count: int = 40,
                       override: bool = False, log=None) -> dict:
    """Retrain with hypotheses regenerated from the strong transcriber and
    report both runs' WERR side by side."""
    out = {}
    for source in ("weak", "strong"):
        hyp_stats = {}
        for split in ("train", "val", "test"):
            hyp_stats[split] = run_hypgen(
                data_root, corpus, models, run, split=split, source=source,
                seed=seed, count=count, log=log)
        label = f"hyp-{source}"
        run_train(data_root, corpus, models, run, seed=seed, source=source,
                  label=label, learning_rate=learning_rate, epochs=epochs,
                  batch_size=batch_size, micro_batch=micro_batch,
                  patience=max(epochs, 25), override=override, log=log)
        report = run_eval(data_root, run, split="test", label=label, log=log)
        out[source] = {"oracle_wer": report["oracle_wer"],
                       "one_best_wer": report["baseline_wer"],
                       "test_wer": report["wer_normalized"],
                       "werr": report["werr"],
                       "train_oracle_wer": hyp_stats["train"]["oracle_wer"]}
    payload = {"seed": seed, "weak": out["weak"], "strong": out["strong"],
               "strong_minus_weak_werr": out["strong"]["werr"] - out["weak"]["werr"],
               "strong_oracle_below_weak":
                   out["strong"]["oracle_wer"] < out["weak"]["oracle_wer"]}
    _write_json(os.path.join(_under(data_root, run), "compare-strong.json"),
                payload)
    return payload


# ---------------------------------------------------------------------------
# reporting


def run_report(data_root: str, run: str) -> str:
    """Render everything a run directory contains into one text block."""
    run_dir = _under(data_root, run)
    lines = [f"run directory: {run_dir}"]
    entries = sorted(os.listdir(run_dir))
    for name in entries:
        path = os.path.join(run_dir, name)
        if name.startswith("report-") and name.endswith(".json"):
            rep = _read_json(path)
            lines.append("")
            lines.append(f"-- {name}")
            for key in ("label", "n_utterances", "wer_raw", "wer_normalized",
                        "baseline_wer", "oracle_wer", "werr", "baseline_werr",
                        "gtmr_raw", "gtmr_normalized"):
                val = rep.get(key)
                if isinstance(val, float):
                    val = f"{val:.4f}"
                lines.append(f"   {key:<16} {val}")
        elif name in ("ablate-report.json", "compare-strong.json"):
            lines.append("")
            lines.append(f"-- {name}")
            lines.append(json.dumps(_read_json(path), indent=2, sort_keys=True))
        elif name.startswith("loss-curve-") and name.endswith(".csv"):
            with open(path, encoding="utf-8") as fh:
                n_rows = sum(1 for _ in fh) - 1
            lines.append(f"-- {name}: {n_rows} loss points")
    return "\n".join(lines)
