"""Shared test oracles, independent of the library's backward pass."""

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. every entry of x.

    f receives a fresh copy of x each call; x itself is never mutated.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.astype(np.float64).copy()
        xm = x.astype(np.float64).copy()
        xp.reshape(-1)[i] += h
        xm.reshape(-1)[i] -= h
        flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise relative error with a denominator floor for near-zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def brute_force_word_edits(ref: list, hyp: list) -> int:
    """Minimum word edit count by exhaustive recursion over edit scripts.

    Exponential on purpose: an oracle independent of any DP formulation.
    Only usable for short sequences.
    """
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    match = brute_force_word_edits(ref[1:], hyp[1:]) + (0 if ref[0] == hyp[0] else 1)
    delete = brute_force_word_edits(ref[1:], hyp) + 1
    insert = brute_force_word_edits(ref, hyp[1:]) + 1
    return min(match, delete, insert)
