"""Shared test oracles."""

import numpy as np

from acelab.policy import PolicyParams


def deterministic_policy(path, vocab_size, num_classes=1, big=1e6):
    """Policy that emits ``path`` with probability ~1 in every prompt class."""
    length = len(path)
    logits = np.zeros((num_classes, length, vocab_size + 1, vocab_size))
    logits[:, np.arange(length), :, np.asarray(path)] = big
    return PolicyParams(logits)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)
