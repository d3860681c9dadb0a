"""Prompt layout, loss-mask scoping, and the masked cross entropy.

The mask oracle here is independent of the implementation: a numpy
log-softmax gathered at target ids, averaged over the positions the mask
selects.
"""

import numpy as np
import pytest

from asrfuse.prompting import (DEFAULT_TEMPLATE_ID, build_loss_mask,
                               build_prompt, build_sample, get_template,
                               masked_cross_entropy)
from asrfuse.tensor import Tensor
from asrfuse.tokenizer import EOS_ID, PAD_ID, lm_tokenizer


def test_prompt_exact_layout():
    t = get_template(DEFAULT_TEMPLATE_ID)
    got = build_prompt(["guess one", "guess two"])
    expected = "\n".join([
        t["instruction_header"], t["instruction_body"], t["input_header"],
        "guess one", "guess two", t["response_header"]]) + "\n"
    assert got == expected
    assert got.endswith(t["response_header"] + "\n")


def test_prompt_is_lowercase_lm_alphabet():
    got = build_prompt(["abc"])
    assert set(got) <= set("abcdefghijklmnopqrstuvwxyz \n")


def test_prompt_one_hypothesis_per_line():
    got = build_prompt(["aa", "bb", "cc"])
    lines = got.split("\n")
    assert lines[3:6] == ["aa", "bb", "cc"]


def test_empty_hypothesis_list_rejected():
    with pytest.raises(ValueError, match="empty hypothesis"):
        build_prompt([])


def test_unknown_template_rejected():
    with pytest.raises(KeyError, match="nope"):
        get_template("nope")


def test_loss_mask_selects_span_targets():
    # token_ids indices 0..9; span (6, 8) supervises targets 6, 7, 8,
    # i.e. mask positions 5, 6, 7 of the 9 shifted targets
    mask = build_loss_mask(list(range(10)), (6, 8))
    assert mask == [0, 0, 0, 0, 0, 1, 1, 1, 0]


def test_loss_mask_rejects_degenerate_spans():
    with pytest.raises(ValueError, match="empty response"):
        build_loss_mask(list(range(10)), (5, 5))
    with pytest.raises(ValueError, match="room for the closing eos"):
        build_loss_mask(list(range(10)), (6, 10))


def test_build_sample_mask_counts_response_plus_eos():
    tok = lm_tokenizer()
    s = build_sample("u1", "go home", ["go hose", "o home"], tok)
    assert sum(s.loss_mask) == len("go home") + 1
    assert len(s.loss_mask) == len(s.token_ids) - 1
    # the supervised target ids decode to the ground truth plus eos
    targets = s.token_ids[1:]
    picked = [t for t, m in zip(targets, s.loss_mask) if m]
    assert picked[-1] == EOS_ID
    assert tok.decode(picked[:-1]) == "go home"


def test_build_sample_prompt_region_fully_unsupervised():
    tok = lm_tokenizer()
    s = build_sample("u1", "hi", ["hj"], tok)
    assert all(m == 0 for m in s.loss_mask[:s.prompt_len - 1])
    assert tok.decode(s.token_ids[:s.prompt_len]) == build_prompt(["hj"])


def test_build_sample_empty_ground_truth_rejected():
    with pytest.raises(ValueError, match="empty ground truth"):
        build_sample("u1", "", ["x"], lm_tokenizer())


def _oracle_ce(logits, targets, mask):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -(picked * mask).sum() / mask.sum()


def test_masked_ce_matches_numpy_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 7, 11))
    targets = rng.integers(4, 11, size=(2, 7))
    mask = np.zeros((2, 7))
    mask[0, 2:5] = 1
    mask[1, 1:3] = 1
    got = masked_cross_entropy(Tensor(logits), targets, mask)
    assert np.isclose(got.item(), _oracle_ce(logits, targets, mask))


def test_masked_ce_ignores_unmasked_positions():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(1, 5, 11))
    targets = rng.integers(4, 11, size=(1, 5))
    mask = np.array([[0.0, 1.0, 1.0, 0.0, 0.0]])
    base = masked_cross_entropy(Tensor(logits), targets, mask).item()
    bumped = logits.copy()
    bumped[0, 3] += 100.0  # unmasked position
    assert masked_cross_entropy(Tensor(bumped), targets, mask).item() == pytest.approx(base)


def test_unmasked_mode_averages_over_all_real_targets():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(1, 6, 11))
    targets = rng.integers(4, 11, size=(1, 6))
    targets[0, -2:] = PAD_ID
    mask = np.array([[0, 0, 0, 1, 0, 0]], dtype=float)
    got = masked_cross_entropy(Tensor(logits), targets, mask, masked=False)
    valid = (targets != PAD_ID).astype(float)
    assert np.isclose(got.item(), _oracle_ce(logits, targets, valid))


def test_uniform_logits_cost_is_log_vocab():
    # any mask placement: uniform logits price every token at ln(V)
    for mask in ([[1, 1, 0]], [[0, 1, 0]], [[1, 1, 1]]):
        logits = Tensor(np.zeros((1, 3, 13)))
        targets = np.array([[4, 5, 6]])
        got = masked_cross_entropy(logits, targets, np.array(mask, dtype=float))
        assert got.item() == pytest.approx(np.log(13))


def test_flipping_masked_out_target_leaves_loss_unchanged():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(1, 5, 11))
    targets = rng.integers(4, 11, size=(1, 5))
    mask = np.array([[0.0, 1.0, 0.0, 1.0, 0.0]])
    base = masked_cross_entropy(Tensor(logits), targets, mask).item()
    for t in (0, 2, 4):
        flipped = targets.copy()
        flipped[0, t] = (flipped[0, t] + 3) % 7 + 4
        got = masked_cross_entropy(Tensor(logits), flipped, mask).item()
        assert got == pytest.approx(base)


def test_gradient_zero_at_masked_positions():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(1, 4, 11)), requires_grad=True)
    targets = rng.integers(4, 11, size=(1, 4))
    mask = np.array([[0.0, 1.0, 1.0, 0.0]])
    masked_cross_entropy(logits, targets, mask).backward()
    assert np.all(logits.grad[0, 0] == 0)
    assert np.all(logits.grad[0, 3] == 0)
    assert np.any(logits.grad[0, 1] != 0)


def test_padding_never_contributes_even_when_mask_leaks():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(1, 4, 11))
    targets = rng.integers(4, 11, size=(1, 4))
    targets[0, 3] = PAD_ID
    leaky = np.array([[0, 1, 0, 1]], dtype=float)  # 1 on a pad target
    clean = np.array([[0, 1, 0, 0]], dtype=float)
    got = masked_cross_entropy(Tensor(logits), targets, leaky).item()
    want = _oracle_ce(logits, targets, clean)
    assert np.isclose(got, want)
