"""Session fixtures shared across test modules.

The tiny data root exercises every pipeline stage on a corpus small enough
that the whole fixture builds in seconds. Models are saved directly in the
pretrain checkpoint format (untrained weights are fine for plumbing tests);
run_pretrain's quality gate has its own dedicated test.
"""

import numpy as np
import pytest

from asrfuse import pipeline as P
from asrfuse.checkpoint import save_checkpoint
from asrfuse.fusion import ModelConfig
from asrfuse.models import STRONG_ACOUSTIC, WEAK_ACOUSTIC, ToyAcoustic, ToyLM
from asrfuse.seeding import derive_seed
from asrfuse.tokenizer import audio_tokenizer, lm_tokenizer

TINY_SEED = 11


def write_models(models_dir, seed: int = TINY_SEED) -> None:
    """Save base LM + both transcribers exactly as run_pretrain would."""
    models_dir.mkdir(parents=True, exist_ok=True)
    lm = ToyLM(ModelConfig(), lm_tokenizer(), seed=derive_seed(seed, "lm-init"),
               dtype=np.float32)
    strong = ToyAcoustic(STRONG_ACOUSTIC, audio_tokenizer(),
                         seed=derive_seed(seed, "strong-init"), dtype=np.float32)
    weak = ToyAcoustic(WEAK_ACOUSTIC, audio_tokenizer(),
                       seed=derive_seed(seed, "weak-init"), dtype=np.float32)
    save_checkpoint(str(models_dir / "lm.ckpt"), "lm-base",
                    lm.config_dict(), lm.base_named())
    save_checkpoint(str(models_dir / "strong.ckpt"), "acoustic",
                    strong.config_dict(), strong.named_tensors())
    save_checkpoint(str(models_dir / "weak.ckpt"), "acoustic",
                    weak.config_dict(), weak.named_tensors())


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Data root with corpus, models, manifests, one trained run, one report.

    Treated as read-only by every test; tests that must write use their own
    run names under the same root.
    """
    root = tmp_path_factory.mktemp("tiny-root")
    P.run_synth(str(root), "corpus/main", mode="structured", seed=TINY_SEED,
                n_train=10, n_val=4, n_test=4)
    write_models(root / "models" / "main")
    for split in ("train", "val", "test"):
        P.run_hypgen(str(root), "corpus/main", "models/main", "runs/main",
                     split=split, source="weak", seed=TINY_SEED,
                     count=6, k=8, n_select=4)
    P.run_train(str(root), "corpus/main", "models/main", "runs/main",
                seed=TINY_SEED, learning_rate=1e-2, epochs=1,
                batch_size=4, micro_batch=2, patience=1)
    P.run_eval(str(root), "runs/main", split="val")
    return root
