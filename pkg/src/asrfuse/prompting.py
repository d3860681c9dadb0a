"""Instruction prompt construction, sample tokenization, and the masked loss.

The prompt is a three-section instruction layout (instruction / input /
response) rendered entirely in the LM alphabet. Its wording is pinned in a
versioned asset file keyed by template_id, so a stored manifest plus a
template_id reproduces byte-identical training text later.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import tensor as T
from .tokenizer import CharTokenizer, PAD_ID

DEFAULT_TEMPLATE_ID = "charv1"


@functools.lru_cache(maxsize=1)
def _template_registry() -> dict:
    path = resources.files("asrfuse").joinpath("assets/prompt_templates.json")
    return json.loads(path.read_text(encoding="utf-8"))


def get_template(template_id: str) -> dict:
    reg = _template_registry()
    if template_id not in reg:
        raise KeyError(f"unknown template_id {template_id!r}; known: {sorted(reg)}")
    return reg[template_id]


def _hyp_text(h) -> str:
    return h if isinstance(h, str) else h.text


def build_prompt(hypotheses, template_id: str = DEFAULT_TEMPLATE_ID) -> str:
    """Render the prompt; ends with the response header, nothing after it."""
    if not hypotheses:
        raise ValueError("cannot build a prompt from an empty hypothesis list")
    t = get_template(template_id)
    lines = [t["instruction_header"], t["instruction_body"], t["input_header"]]
    lines += [_hyp_text(h) for h in hypotheses]
    lines.append(t["response_header"])
    return "\n".join(lines) + "\n"


@dataclass
class PromptSample:
    """One training/eval item: full token sequence and supervision mask.

    token_ids runs [bos, prompt..., response..., eos]; loss_mask aligns with
    the shifted targets token_ids[1:], and is 1 exactly on response characters
    plus the closing eos.
    """

    id: str
    ground_truth: str
    token_ids: list[int]
    loss_mask: list[int]
    response_span: tuple[int, int]
    features_path: str | None = None
    features: np.ndarray | None = field(default=None, repr=False)

    @property
    def prompt_len(self) -> int:
        return self.response_span[0]


def build_loss_mask(token_ids, response_span) -> list[int]:
    start, end = response_span
    if end <= start:
        raise ValueError("sample has an empty response span; nothing to supervise")
    if end >= len(token_ids):
        raise ValueError("response span must leave room for the closing eos")
    # target position t predicts token_ids[t+1]; supervise response chars + eos
    return [1 if start <= t + 1 <= end else 0 for t in range(len(token_ids) - 1)]


def build_sample(record_id: str, ground_truth: str, hypotheses,
                 tokenizer: CharTokenizer, template_id: str = DEFAULT_TEMPLATE_ID,
                 features_path: str | None = None) -> PromptSample:
    if not ground_truth:
        raise ValueError(f"record {record_id!r} has an empty ground truth")
    prompt = build_prompt(hypotheses, template_id)
    prompt_ids = tokenizer.encode(prompt, bos=True)
    resp_ids = tokenizer.encode(ground_truth, eos=True)
    token_ids = prompt_ids + resp_ids
    span = (len(prompt_ids), len(prompt_ids) + len(resp_ids) - 1)
    sample = PromptSample(id=record_id, ground_truth=ground_truth,
                          token_ids=token_ids,
                          loss_mask=build_loss_mask(token_ids, span),
                          response_span=span, features_path=features_path)
    assert tokenizer.decode(token_ids[span[0]:span[1]]) == ground_truth
    return sample


def masked_cross_entropy(logits: T.Tensor, targets, loss_mask,
                         valid_mask=None, masked: bool = True) -> T.Tensor:
    """Cross entropy over response targets (masked) or all real targets
    (unmasked ablation). Padding never contributes in either mode."""
    targets = np.asarray(targets)
    if valid_mask is None:
        valid_mask = (targets != PAD_ID).astype(np.float64)
    mask = np.asarray(loss_mask, dtype=np.float64) if masked else np.asarray(
        valid_mask, dtype=np.float64)
    return T.cross_entropy(logits, targets, mask * valid_mask if masked else mask)
