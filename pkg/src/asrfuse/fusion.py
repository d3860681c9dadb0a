"""Per-layer fusion of acoustic evidence into a frozen decoder LM.

Each decoder layer keeps its pretrained causal self-attention untouched and
adds two trainable side branches:

* a prefix-adapter branch: attention from the hidden states onto a small
  learned prefix, reusing the layer's frozen Q/K/V projections (no output
  projection, no causal mask);
* an acoustic branch: unmasked cross-attention onto key/value tensors derived
  from the acoustic encoder, passed through a bottleneck adapter and padded
  into the LM's head geometry (see bridge.py).

Both branches enter through scalar gates initialised to zero, so the fused
model starts exactly equal to the frozen LM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .seeding import rng_for
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the LM, the acoustic model, and the fusion branches."""

    lm_dim: int = 64
    lm_heads: int = 4
    lm_layers: int = 4
    audio_dim: int = 32
    audio_heads: int = 2
    audio_layers: int = 2
    audio_len: int = 32
    prefix_len: int = 10
    bottleneck_ratio: int = 8
    shared_kv_adapter: bool = True
    use_acoustic: bool = True
    vocab_size: int = 32
    max_len: int = 512
    ffn_mult: int = 2

    def __post_init__(self):
        if self.lm_dim % self.lm_heads:
            raise ValueError(f"lm_dim {self.lm_dim} not divisible by {self.lm_heads} heads")
        if self.audio_dim % self.audio_heads:
            raise ValueError(
                f"audio_dim {self.audio_dim} not divisible by {self.audio_heads} heads")
        if self.audio_dim % self.bottleneck_ratio:
            raise ValueError(
                f"bottleneck ratio {self.bottleneck_ratio} must divide audio_dim {self.audio_dim}")
        if self.audio_heads > self.lm_heads:
            raise ValueError("acoustic model may not have more heads than the LM")
        if self.audio_head_size > self.lm_head_size:
            raise ValueError("acoustic head size may not exceed the LM head size")

    @property
    def lm_head_size(self) -> int:
        return self.lm_dim // self.lm_heads

    @property
    def audio_head_size(self) -> int:
        return self.audio_dim // self.audio_heads

    @property
    def bottleneck_dim(self) -> int:
        return self.audio_dim // self.bottleneck_ratio


def expected_trainable_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count, for cross-checking the actual
    per-tensor enumeration. Gates are always counted, even with the acoustic
    branch disabled."""
    adapters = (1 if config.shared_kv_adapter else 2) if config.use_acoustic else 0
    per_layer = (config.prefix_len * config.lm_dim
                 + adapters * 2 * config.audio_dim ** 2 // config.bottleneck_ratio
                 + 2)
    return config.lm_layers * per_layer


# ---------------------------------------------------------------------------
# parameter containers


class AttentionProjections:
    """Multi-head attention projection matrices. Trainable while the owning
    model pretrains, frozen once fusion training starts."""

    def __init__(self, dim: int, dtype=np.float64, trainable: bool = False):
        def w():
            return Tensor(np.zeros((dim, dim), dtype=dtype), requires_grad=trainable)
        self.wq, self.wk, self.wv, self.wo = w(), w(), w(), w()

    def tensors(self):
        return [self.wq, self.wk, self.wv, self.wo]

    def randomize(self, rng: np.random.Generator, std: float = 0.02) -> None:
        for t in self.tensors():
            t.data[:] = rng.normal(0.0, std, size=t.shape).astype(t.dtype)

    def freeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None


class PrefixAdapter:
    """Learned prefix rows attended to through the frozen projections."""

    def __init__(self, config: ModelConfig, dtype=np.float64):
        self.prefix = Tensor(
            np.zeros((config.prefix_len, config.lm_dim), dtype=dtype), requires_grad=True)

    def init(self, rng: np.random.Generator) -> None:
        self.prefix.data[:] = rng.normal(0.0, 0.02, size=self.prefix.shape).astype(
            self.prefix.dtype)

    def trainable(self):
        return [("prefix", self.prefix)]


class BottleneckAdapter:
    """Two-matrix bottleneck with a SiLU in the middle; identity at init."""

    def __init__(self, config: ModelConfig, dtype=np.float64):
        d, b = config.audio_dim, config.bottleneck_dim
        self.down = Tensor(np.zeros((d, b), dtype=dtype), requires_grad=True)
        self.up = Tensor(np.zeros((b, d), dtype=dtype), requires_grad=True)

    def trainable(self):
        return [("down", self.down), ("up", self.up)]


class AcousticKV:
    """Key/value projections transplanted from the acoustic decoder; frozen."""

    def __init__(self, config: ModelConfig, dtype=np.float64):
        d = config.audio_dim
        self.key = Tensor(np.zeros((d, d), dtype=dtype), requires_grad=False)
        self.value = Tensor(np.zeros((d, d), dtype=dtype), requires_grad=False)


class FusionGates:
    """Scalar gates for the two side branches, zero at init."""

    def __init__(self, dtype=np.float64):
        self.prefix_gate = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.acoustic_gate = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def trainable(self):
        return [("prefix_gate", self.prefix_gate), ("acoustic_gate", self.acoustic_gate)]


class FusionLayer:
    """All fusion state attached to one LM decoder layer."""

    def __init__(self, config: ModelConfig, attn: AttentionProjections, dtype=np.float64):
        self.config = config
        self.attn = attn
        self.prefix_adapter = PrefixAdapter(config, dtype)
        self.gates = FusionGates(dtype)
        if config.use_acoustic:
            self.kv_proj = AcousticKV(config, dtype)
            self.adapter_k = BottleneckAdapter(config, dtype)
            self.adapter_v = (self.adapter_k if config.shared_kv_adapter
                              else BottleneckAdapter(config, dtype))
        else:
            self.kv_proj = None
            self.adapter_k = None
            self.adapter_v = None

    def trainable(self):
        named = [("prefix_adapter." + n, t) for n, t in self.prefix_adapter.trainable()]
        if self.config.use_acoustic:
            named += [("adapter_k." + n, t) for n, t in self.adapter_k.trainable()]
            if self.adapter_v is not self.adapter_k:
                named += [("adapter_v." + n, t) for n, t in self.adapter_v.trainable()]
        named += [("gates." + n, t) for n, t in self.gates.trainable()]
        return named


def count_trainable(layers) -> int:
    return sum(t.data.size for layer in layers for _, t in layer.trainable())


# ---------------------------------------------------------------------------
# head bookkeeping


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, D] -> [..., H, T, D/H]"""
    *lead, t, d = x.shape
    hs = d // n_heads
    x = T.reshape(x, (*lead, t, n_heads, hs))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, T, hs] -> [..., T, H*hs]"""
    *lead, h, t, hs = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, t, h * hs))


def causal_mask(t_query: int, t_total: int, dtype=np.float64) -> Tensor:
    """Additive mask: query i (offset so the last query is the last position)
    may see keys 0..(t_total - t_query + i)."""
    offset = t_total - t_query
    q = np.arange(t_query)[:, None]
    k = np.arange(t_total)[None, :]
    mask = np.where(k <= q + offset, 0.0, T.MASK_VALUE).astype(dtype)
    return Tensor(mask, requires_grad=False)


ROPE_BASE = 10000.0


def rope_rotate(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotary position encoding over the last axis of per-head q or k.

    x is [..., T, hs] with hs even; positions gives the absolute index of
    each of the T rows. Built from mul/matmul/add so the backward pass is
    exact: x*cos + (x@R)*sin, where R swaps the two halves of the head
    dimension and negates the second one.
    """
    hs = x.shape[-1]
    if hs % 2:
        raise T.TensorError(f"rotary encoding needs an even head size, got {hs}")
    half = hs // 2
    dt = x.data.dtype
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1).astype(dt)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1).astype(dt)
    rot = np.zeros((hs, hs), dtype=dt)
    rot[np.arange(half) + half, np.arange(half)] = -1.0
    rot[np.arange(half), np.arange(half) + half] = 1.0
    return T.add(T.mul(x, cos), T.mul(T.matmul(x, Tensor(rot)), sin))


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(hs)) v over the last two axes."""
    hs = q.shape[-1]
    kt = T.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
    scores = T.mul(T.matmul(q, kt), 1.0 / math.sqrt(hs))
    if mask is not None:
        scores = T.add(scores, mask)
    return T.matmul(T.softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# the fusion ops


def self_attention(attn: AttentionProjections, n_heads: int, x: Tensor,
                   cache: dict | None = None, causal: bool = True,
                   positions: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention with the output projection; causal unless
    told otherwise (acoustic encoders attend bidirectionally).

    ``positions`` turns on rotary encoding of q and k at those absolute
    indices (one per row of x). Cached keys are stored rotated, so decode
    steps only rotate the new rows.

    With ``cache``, x holds only the new positions; cached keys/values are
    prepended and extended in place (decode-time use, expects no_grad).
    """
    q = split_heads(T.matmul(x, attn.wq), n_heads)
    k = split_heads(T.matmul(x, attn.wk), n_heads)
    v = split_heads(T.matmul(x, attn.wv), n_heads)
    if positions is not None:
        q = rope_rotate(q, positions)
        k = rope_rotate(k, positions)
    if cache is not None:
        if "k" in cache:
            k = Tensor(np.concatenate([cache["k"], k.data], axis=-2), requires_grad=False)
            v = Tensor(np.concatenate([cache["v"], v.data], axis=-2), requires_grad=False)
        cache["k"], cache["v"] = k.data, v.data
    t_query, t_total = x.shape[-2], k.shape[-2]
    mask = causal_mask(t_query, t_total, x.dtype) if causal else None
    out = _attend(q, k, v, mask)
    return T.matmul(merge_heads(out), attn.wo)


def cross_attention(attn: AttentionProjections, n_heads: int, x: Tensor,
                    memory: Tensor | None = None, cache: dict | None = None) -> Tensor:
    """Standard unmasked cross-attention onto ``memory`` (acoustic decoder
    use; distinct from the fusion branch, which has no output projection).
    A cache holds the memory K/V after the first call."""
    q = split_heads(T.matmul(x, attn.wq), n_heads)
    if cache is not None and "k" in cache:
        k = Tensor(cache["k"], requires_grad=False)
        v = Tensor(cache["v"], requires_grad=False)
    else:
        if memory is None:
            raise T.TensorError("cross_attention needs memory on the first call")
        k = split_heads(T.matmul(memory, attn.wk), n_heads)
        v = split_heads(T.matmul(memory, attn.wv), n_heads)
        if cache is not None:
            cache["k"], cache["v"] = k.data, v.data
    return T.matmul(merge_heads(_attend(q, k, v)), attn.wo)


def adapter_attention(layer: FusionLayer, x: Tensor) -> Tensor:
    """Attention from the hidden states onto the learned prefix rows, through
    the frozen Q/K/V projections. No mask, no output projection."""
    cfg = layer.config
    q = split_heads(T.matmul(x, layer.attn.wq), cfg.lm_heads)
    k = split_heads(T.matmul(layer.prefix_adapter.prefix, layer.attn.wk), cfg.lm_heads)
    v = split_heads(T.matmul(layer.prefix_adapter.prefix, layer.attn.wv), cfg.lm_heads)
    return merge_heads(_attend(q, k, v))


def adapter_bottleneck(adapter: BottleneckAdapter, x: Tensor) -> Tensor:
    return T.matmul(T.silu(T.matmul(x, adapter.down)), adapter.up)


def fuse_kv(layer: FusionLayer, template, audio_features: Tensor) -> tuple[Tensor, Tensor]:
    """Acoustic encoder output -> padded per-head K/V in LM geometry.

    audio_features is [batch, audio_len, audio_dim]; each return value is
    [batch, lm_heads, audio_len, lm_head_size].
    """
    from .bridge import embed_kv

    cfg = layer.config

    def one(proj: Tensor, adapter: BottleneckAdapter) -> Tensor:
        raw = T.matmul(audio_features, proj)
        adapted = adapter_bottleneck(adapter, raw)
        return embed_kv(template, split_heads(adapted, cfg.audio_heads))

    k_hat = one(layer.kv_proj.key, layer.adapter_k)
    v_hat = one(layer.kv_proj.value, layer.adapter_v)
    return k_hat, v_hat


def acoustic_cross_attention(layer: FusionLayer, x: Tensor,
                             k_hat: Tensor, v_hat: Tensor) -> Tensor:
    """Unmasked cross-attention from the hidden states onto the padded
    acoustic K/V. Frozen query projection, concatenated heads, no output
    projection."""
    q = split_heads(T.matmul(x, layer.attn.wq), layer.config.lm_heads)
    return merge_heads(_attend(q, k_hat, v_hat))


def gated_merge(layer: FusionLayer, sa: Tensor, prefix_out: Tensor,
                acoustic_out: Tensor | None) -> Tensor:
    out = T.add(sa, T.mul(layer.gates.prefix_gate, prefix_out))
    if acoustic_out is not None:
        out = T.add(out, T.mul(layer.gates.acoustic_gate, acoustic_out))
    return out


def fusion_layer_forward(layer: FusionLayer, x: Tensor,
                         audio_kv: tuple[Tensor, Tensor] | None = None,
                         cache: dict | None = None,
                         positions: np.ndarray | None = None) -> Tensor:
    """One layer's attention block with both side branches merged in.

    ``audio_kv`` is the (k_hat, v_hat) pair from fuse_kv, computed once per
    utterance; None runs the LM-only path (acoustic branch off or absent).
    Rotary positions apply only to the causal self-attention: the prefix and
    acoustic branches read position-free content queries.
    """
    sa = self_attention(layer.attn, layer.config.lm_heads, x, cache,
                        positions=positions)
    prefix_out = adapter_attention(layer, x)
    acoustic_out = None
    if audio_kv is not None:
        if not layer.config.use_acoustic:
            raise T.TensorError("acoustic features passed to a layer without that branch")
        acoustic_out = acoustic_cross_attention(layer, x, *audio_kv)
    return gated_merge(layer, sa, prefix_out, acoustic_out)
