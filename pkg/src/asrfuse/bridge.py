"""Geometry bridge between the acoustic model and the language model.

The acoustic key/value tensors are narrower than the LM's attention heads;
they are placed into the top-left corner of a constant zero/diagonal padding
template so the remaining head coordinates carry an identity-like structure
instead of garbage. The bottleneck adapter starts as a rectangular identity
for the same reason: at step zero the acoustic branch passes its inputs
through essentially unchanged.

Disabling both (random adapter init, zeros-only template) is exposed as an
ablation and is expected to wreck convergence.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .seeding import rng_for
from .tensor import Tensor


class PaddingTemplate:
    """Constant [lm_heads, audio_len, lm_head_size] tensor: zeros with ones on
    the principal diagonal of the last two dims. Never trained."""

    def __init__(self, array: np.ndarray):
        array.setflags(write=False)
        self.array = array

    @property
    def shape(self):
        return self.array.shape


def build_padding_template(config, dtype=np.float64, diagonal: bool = True) -> PaddingTemplate:
    """Template per config; ``diagonal=False`` (ablation) leaves it all zeros."""
    if config.audio_heads > config.lm_heads or config.audio_head_size > config.lm_head_size:
        raise ValueError(
            f"audio head geometry ({config.audio_heads} x {config.audio_head_size}) "
            f"must fit inside LM heads ({config.lm_heads} x {config.lm_head_size})")
    tpl = np.zeros((config.lm_heads, config.audio_len, config.lm_head_size), dtype=dtype)
    if diagonal:
        d = min(config.audio_len, config.lm_head_size)
        idx = np.arange(d)
        tpl[:, idx, idx] = 1.0
    return PaddingTemplate(tpl)


def embed_kv(template: PaddingTemplate, x: Tensor) -> Tensor:
    """Place per-head acoustic K/V blocks into the template's top-left corner.

    x is [batch, audio_heads, audio_len, audio_head_size]; the output is
    [batch, lm_heads, audio_len, lm_head_size]. The block overwrites whatever
    the template held there; heads beyond audio_heads keep the pure diagonal.
    """
    lm_heads, audio_len, lm_hs = template.shape
    if x.data.ndim != 4:
        raise T.TensorError(f"embed_kv expects a 4-D tensor, got shape {x.shape}")
    b, heads, t, hs = x.shape
    if heads > lm_heads or hs > lm_hs or t != audio_len:
        raise T.TensorError(
            f"embed_kv input {x.shape} does not fit template {template.shape}")
    out = np.broadcast_to(template.array.astype(x.dtype), (b,) + template.shape).copy()
    out[:, :heads, :, :hs] = x.data

    def backward(g: np.ndarray) -> None:
        x._accumulate(g[:, :heads, :, :hs])

    return T._result("embed_kv", out, [x], backward)


def init_identity_projections(adapter) -> None:
    """Set the adapter's down/up projections to rectangular identities."""
    for mat in (adapter.down, adapter.up):
        mat.data[:] = 0.0
        d = min(mat.shape)
        mat.data[np.arange(d), np.arange(d)] = 1.0


def init_random_projections(adapter, seed: int) -> None:
    """Ablation init: zero-mean Gaussian (std 0.02) instead of identities."""
    rng = rng_for(seed, "adapter-random-init")
    for mat in (adapter.down, adapter.up):
        mat.data[:] = rng.normal(0.0, 0.02, size=mat.shape).astype(mat.dtype)


def transplant_cross_attention(acoustic_model, lm_layers) -> None:
    """Copy the acoustic decoder's cross-attention K/V weights into each LM
    layer's frozen acoustic projections, cycling when the LM is deeper."""
    sources = acoustic_model.cross_attention_kv()
    if not sources:
        raise ValueError("acoustic model has no decoder cross-attention layers")
    for i, layer in enumerate(lm_layers):
        k_src, v_src = sources[i % len(sources)]
        layer.kv_proj.key.data[:] = k_src.data.astype(layer.kv_proj.key.dtype)
        layer.kv_proj.value.data[:] = v_src.data.astype(layer.kv_proj.value.dtype)
