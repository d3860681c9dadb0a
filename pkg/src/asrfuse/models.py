"""Toy models: a decoder-only LM carrying the fusion branches, and small
encoder-decoder acoustic models that transcribe synthetic features.

Both are pre-norm residual transformers (RMS norm, bias-free projections,
SiLU feed-forward). The LM encodes order with rotary positions inside its
causal self-attention, so local character circuits transfer across depths;
the shallow acoustic models keep learned absolute position tables. The LM's
attention blocks are FusionLayer instances, so with all gates at zero it is
exactly a plain decoder; the acoustic decoder exposes its cross-attention
K/V projections as the transplant source for the LM's acoustic branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .bridge import (build_padding_template, init_identity_projections,
                     init_random_projections)
from .fusion import (AttentionProjections, FusionLayer, ModelConfig,
                     cross_attention, fusion_layer_forward, self_attention)
from .seeding import derive_seed, rng_for
from .tensor import Tensor
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, UNK_ID, CharTokenizer


class FeedForward:
    def __init__(self, dim: int, mult: int, dtype, trainable: bool):
        self.w1 = Tensor(np.zeros((dim, mult * dim), dtype=dtype), requires_grad=trainable)
        self.w2 = Tensor(np.zeros((mult * dim, dim), dtype=dtype), requires_grad=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(T.silu(T.matmul(x, self.w1)), self.w2)

    def tensors(self):
        return [self.w1, self.w2]


def _norm(dim: int, dtype, trainable: bool) -> Tensor:
    return Tensor(np.ones(dim, dtype=dtype), requires_grad=trainable)


def _emb(shape, dtype, trainable: bool) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=trainable)


def _freeze(tensors) -> None:
    for t in tensors:
        t.requires_grad = False
        t.grad = None


def _cache_offset(caches) -> int:
    if not caches:
        return 0
    first = caches[0].get("self", caches[0])
    return first["k"].shape[-2] if "k" in first else 0


# ---------------------------------------------------------------------------
# language model


class LMBlock:
    def __init__(self, config: ModelConfig, dtype, trainable: bool):
        self.norm1 = _norm(config.lm_dim, dtype, trainable)
        attn = AttentionProjections(config.lm_dim, dtype, trainable)
        self.fusion = FusionLayer(config, attn, dtype)
        self.norm2 = _norm(config.lm_dim, dtype, trainable)
        self.ffn = FeedForward(config.lm_dim, config.ffn_mult, dtype, trainable)

    def base_tensors(self):
        return ([self.norm1, self.norm2] + self.fusion.attn.tensors()
                + self.ffn.tensors())


class ToyLM:
    """Frozen decoder LM plus per-layer fusion branches.

    Base weights start trainable for pretraining; ``freeze_base`` locks them
    before any fusion training. The padding template is owned here because
    its geometry is fixed by the config.
    """

    def __init__(self, config: ModelConfig, tokenizer: CharTokenizer, seed: int = 0,
                 dtype=np.float32, adapter_init: str = "identity",
                 diagonal_template: bool = True):
        if tokenizer.vocab_size != config.vocab_size:
            raise ValueError(f"tokenizer vocab {tokenizer.vocab_size} != config "
                             f"vocab {config.vocab_size}")
        if adapter_init not in ("identity", "random"):
            raise ValueError(f"unknown adapter_init {adapter_init!r}")
        self.config = config
        self.tokenizer = tokenizer
        self.dtype = dtype
        self.adapter_init = adapter_init
        self.diagonal_template = diagonal_template
        rng = rng_for(seed, "lm-init")
        self.tok_emb = _emb((config.vocab_size, config.lm_dim), dtype, True)
        self.blocks = [LMBlock(config, dtype, True) for _ in range(config.lm_layers)]
        self.final_norm = _norm(config.lm_dim, dtype, True)
        self.head = _emb((config.lm_dim, config.vocab_size), dtype, True)
        for t in (self.tok_emb, self.head):
            t.data[:] = rng.normal(0.0, 0.02, size=t.shape).astype(dtype)
        for blk in self.blocks:
            blk.fusion.attn.randomize(rng)
            for t in blk.ffn.tensors():
                t.data[:] = rng.normal(0.0, 0.02, size=t.shape).astype(dtype)
        self.template = (build_padding_template(config, dtype, diagonal_template)
                         if config.use_acoustic else None)
        self.reinit_adapters(seed)

    def reinit_adapters(self, seed: int) -> None:
        """Fresh fusion-branch state: prefix Gaussian, gates zero, bottleneck
        identity (or Gaussian under the no-init ablation)."""
        for i, blk in enumerate(self.blocks):
            f = blk.fusion
            f.prefix_adapter.init(rng_for(seed, "prefix-init", i))
            for g in (f.gates.prefix_gate, f.gates.acoustic_gate):
                g.data[...] = 0.0
            if self.config.use_acoustic:
                adapters = {id(f.adapter_k): f.adapter_k, id(f.adapter_v): f.adapter_v}
                for j, a in enumerate(adapters.values()):
                    if self.adapter_init == "identity":
                        init_identity_projections(a)
                    else:
                        init_random_projections(a, derive_seed(seed, "adapter", i, j))

    # -- parameter sets -----------------------------------------------------

    def base_named(self):
        named = [("tok_emb", self.tok_emb),
                 ("final_norm", self.final_norm), ("head", self.head)]
        for i, blk in enumerate(self.blocks):
            p = f"block{i}."
            named += [(p + "norm1", blk.norm1), (p + "norm2", blk.norm2),
                      (p + "ffn.w1", blk.ffn.w1), (p + "ffn.w2", blk.ffn.w2),
                      (p + "attn.wq", blk.fusion.attn.wq),
                      (p + "attn.wk", blk.fusion.attn.wk),
                      (p + "attn.wv", blk.fusion.attn.wv),
                      (p + "attn.wo", blk.fusion.attn.wo)]
            if self.config.use_acoustic:
                named += [(p + "kv.key", blk.fusion.kv_proj.key),
                          (p + "kv.value", blk.fusion.kv_proj.value)]
        return named

    def trainable_named(self):
        named = []
        for i, blk in enumerate(self.blocks):
            named += [(f"block{i}.{n}", t) for n, t in blk.fusion.trainable()]
        return named

    def named_tensors(self):
        return self.base_named() + self.trainable_named()

    def trainable_tensors(self):
        return [t for _, t in self.trainable_named()]

    def freeze_base(self) -> None:
        _freeze(t for _, t in self.base_named())

    def fusion_layers(self):
        return [blk.fusion for blk in self.blocks]

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["adapter_init"] = self.adapter_init
        d["diagonal_template"] = self.diagonal_template
        return d

    # -- forward ------------------------------------------------------------

    def new_caches(self):
        return [{} for _ in self.blocks]

    def fuse_audio(self, h_audio: Tensor):
        """Per-layer padded acoustic K/V for one batch of encoder outputs."""
        from .fusion import fuse_kv
        return [fuse_kv(blk.fusion, self.template, h_audio) for blk in self.blocks]

    def logits(self, ids, audio_kv=None, caches=None, base_only: bool = False) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        offset = _cache_offset(caches)
        positions = np.arange(offset, offset + ids.shape[-1])
        if positions[-1] >= self.config.max_len:
            raise T.TensorError(
                f"sequence length {positions[-1] + 1} exceeds max_len "
                f"{self.config.max_len}")
        x = T.embedding_lookup(self.tok_emb, ids)
        for i, blk in enumerate(self.blocks):
            h = T.rms_norm(x, blk.norm1)
            cache = caches[i] if caches is not None else None
            if base_only:
                a = self_attention(blk.fusion.attn, self.config.lm_heads, h,
                                   cache, positions=positions)
            else:
                kv = audio_kv[i] if audio_kv is not None else None
                a = fusion_layer_forward(blk.fusion, h, kv, cache, positions)
            x = T.add(x, a)
            x = T.add(x, blk.ffn(T.rms_norm(x, blk.norm2)))
        return T.matmul(T.rms_norm(x, self.final_norm), self.head)

    def greedy_response(self, prompt_ids, audio_kv=None, max_steps: int = 28,
                        base_only: bool = False) -> list[int]:
        """Greedy continuation of one prompt; stops at eos or newline."""
        stop = {EOS_ID}
        nl = self.tokenizer.encode("\n")
        stop.update(nl)
        banned = [PAD_ID, BOS_ID, UNK_ID]
        out = []
        with T.no_grad():
            caches = self.new_caches()
            logits = self.logits(np.asarray([prompt_ids]), audio_kv, caches, base_only)
            while len(out) < max_steps:
                step = logits.data[0, -1].copy()
                step[banned] = -np.inf
                nxt = int(np.argmax(step))
                if nxt in stop:
                    break
                out.append(nxt)
                logits = self.logits(np.asarray([[nxt]]), audio_kv, caches, base_only)
        return out


# ---------------------------------------------------------------------------
# acoustic models


@dataclass(frozen=True)
class AcousticConfig:
    dim: int = 32
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    feat_dim: int = 32
    n_frames: int = 32
    max_text_len: int = 28
    vocab_size: int = 31
    ffn_mult: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")


class EncoderLayer:
    def __init__(self, cfg: AcousticConfig, dtype, trainable: bool):
        self.norm1 = _norm(cfg.dim, dtype, trainable)
        self.attn = AttentionProjections(cfg.dim, dtype, trainable)
        self.norm2 = _norm(cfg.dim, dtype, trainable)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult, dtype, trainable)

    def tensors(self):
        return [self.norm1, self.norm2] + self.attn.tensors() + self.ffn.tensors()


class DecoderLayer:
    def __init__(self, cfg: AcousticConfig, dtype, trainable: bool):
        self.norm1 = _norm(cfg.dim, dtype, trainable)
        self.self_attn = AttentionProjections(cfg.dim, dtype, trainable)
        self.norm_cross = _norm(cfg.dim, dtype, trainable)
        self.cross = AttentionProjections(cfg.dim, dtype, trainable)
        self.norm2 = _norm(cfg.dim, dtype, trainable)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_mult, dtype, trainable)

    def tensors(self):
        return ([self.norm1, self.norm_cross, self.norm2]
                + self.self_attn.tensors() + self.cross.tensors()
                + self.ffn.tensors())


class ToyAcoustic:
    """Encoder-decoder transcriber over synthetic features."""

    def __init__(self, config: AcousticConfig, tokenizer: CharTokenizer,
                 seed: int = 0, dtype=np.float32):
        if tokenizer.vocab_size != config.vocab_size:
            raise ValueError(f"tokenizer vocab {tokenizer.vocab_size} != config "
                             f"vocab {config.vocab_size}")
        self.config = config
        self.tokenizer = tokenizer
        self.dtype = dtype
        rng = rng_for(seed, "acoustic-init")
        c = config
        self.in_proj = _emb((c.feat_dim, c.dim), dtype, True)
        self.enc_pos = _emb((c.n_frames, c.dim), dtype, True)
        self.enc_layers = [EncoderLayer(c, dtype, True) for _ in range(c.enc_layers)]
        self.enc_norm = _norm(c.dim, dtype, True)
        self.tok_emb = _emb((c.vocab_size, c.dim), dtype, True)
        self.dec_pos = _emb((c.max_text_len + 4, c.dim), dtype, True)
        self.dec_layers = [DecoderLayer(c, dtype, True) for _ in range(c.dec_layers)]
        self.dec_norm = _norm(c.dim, dtype, True)
        self.head = _emb((c.dim, c.vocab_size), dtype, True)
        for _, t in self.named_tensors():
            if t.data.ndim >= 2:  # norms stay at ones
                t.data[:] = rng.normal(0.0, 0.02, size=t.shape).astype(dtype)

    def named_tensors(self):
        named = [("in_proj", self.in_proj), ("enc_pos", self.enc_pos),
                 ("enc_norm", self.enc_norm), ("tok_emb", self.tok_emb),
                 ("dec_pos", self.dec_pos), ("dec_norm", self.dec_norm),
                 ("head", self.head)]
        for i, lay in enumerate(self.enc_layers):
            p = f"enc{i}."
            named += [(p + "norm1", lay.norm1), (p + "norm2", lay.norm2),
                      (p + "attn.wq", lay.attn.wq), (p + "attn.wk", lay.attn.wk),
                      (p + "attn.wv", lay.attn.wv), (p + "attn.wo", lay.attn.wo),
                      (p + "ffn.w1", lay.ffn.w1), (p + "ffn.w2", lay.ffn.w2)]
        for i, lay in enumerate(self.dec_layers):
            p = f"dec{i}."
            named += [(p + "norm1", lay.norm1), (p + "norm_cross", lay.norm_cross),
                      (p + "norm2", lay.norm2),
                      (p + "self.wq", lay.self_attn.wq), (p + "self.wk", lay.self_attn.wk),
                      (p + "self.wv", lay.self_attn.wv), (p + "self.wo", lay.self_attn.wo),
                      (p + "cross.wq", lay.cross.wq), (p + "cross.wk", lay.cross.wk),
                      (p + "cross.wv", lay.cross.wv), (p + "cross.wo", lay.cross.wo),
                      (p + "ffn.w1", lay.ffn.w1), (p + "ffn.w2", lay.ffn.w2)]
        return named

    def trainable_tensors(self):
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def freeze(self) -> None:
        _freeze(t for _, t in self.named_tensors())

    def config_dict(self) -> dict:
        return asdict(self.config)

    def cross_attention_kv(self):
        return [(lay.cross.wk, lay.cross.wv) for lay in self.dec_layers]

    # -- forward ------------------------------------------------------------

    def encode(self, features) -> Tensor:
        feats = features if isinstance(features, Tensor) else Tensor(
            np.asarray(features, dtype=self.dtype))
        t = feats.shape[-2]
        x = T.add(T.matmul(feats, self.in_proj),
                  T.embedding_lookup(self.enc_pos, np.arange(t)))
        for lay in self.enc_layers:
            x = T.add(x, self_attention(lay.attn, self.config.heads,
                                        T.rms_norm(x, lay.norm1), causal=False))
            x = T.add(x, lay.ffn(T.rms_norm(x, lay.norm2)))
        return T.rms_norm(x, self.enc_norm)

    def new_caches(self):
        return [{"self": {}, "cross": {}} for _ in self.dec_layers]

    def decode_logits(self, ids, h_audio: Tensor | None, caches=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        offset = _cache_offset(caches)
        positions = np.arange(offset, offset + ids.shape[-1])
        x = T.add(T.embedding_lookup(self.tok_emb, ids),
                  T.embedding_lookup(self.dec_pos, positions))
        for i, lay in enumerate(self.dec_layers):
            c = caches[i] if caches is not None else {"self": None, "cross": None}
            x = T.add(x, self_attention(lay.self_attn, self.config.heads,
                                        T.rms_norm(x, lay.norm1), c["self"]))
            x = T.add(x, cross_attention(lay.cross, self.config.heads,
                                         T.rms_norm(x, lay.norm_cross),
                                         h_audio, c["cross"]))
            x = T.add(x, lay.ffn(T.rms_norm(x, lay.norm2)))
        return T.matmul(T.rms_norm(x, self.dec_norm), self.head)

    def transcribe(self, features_batch) -> list[str]:
        """Batched greedy decode, for sanity checks and baselines."""
        with T.no_grad():
            h = self.encode(features_batch)
            b = h.shape[0]
            caches = self.new_caches()
            ids = np.full((b, 1), BOS_ID, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            rows: list[list[int]] = [[] for _ in range(b)]
            logits = self.decode_logits(ids, h, caches)
            for _ in range(self.config.max_text_len):
                step = logits.data[:, -1].copy()
                step[:, [PAD_ID, BOS_ID, UNK_ID]] = -np.inf
                nxt = step.argmax(axis=-1)
                nxt[done] = PAD_ID
                done |= nxt == EOS_ID
                for r, token in zip(rows, nxt):
                    if token not in (EOS_ID, PAD_ID):
                        r.append(int(token))
                if done.all():
                    break
                logits = self.decode_logits(nxt[:, None], None, caches)
        return [self.tokenizer.decode(r) for r in rows]


WEAK_ACOUSTIC = AcousticConfig(dim=16, heads=2, enc_layers=1, dec_layers=1)
STRONG_ACOUSTIC = AcousticConfig()
