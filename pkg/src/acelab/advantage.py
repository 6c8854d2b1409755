"""Group statistics, GRPO advantages, confidence scores and ACE advantages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ADV_EPS = 1e-8
MODULATIONS = ("softplus", "relu")
REGIMES = ("overconfident", "exploratory", "self_correcting")


@dataclass(frozen=True)
class GroupStats:
    mean: float
    std: float
    pass_rate: float
    group_size: int


@dataclass
class Rollout:
    tokens: np.ndarray
    reward: int
    length: int
    logp_theta: float
    logp_ref: float
    logp_old: float
    confidence: float
    confidence_normalized: float


@dataclass
class AdvantageVector:
    grpo: np.ndarray
    ace: np.ndarray
    alpha: float
    epsilon: float
    modulation_kind: str


def group_stats(rewards) -> GroupStats:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("group_stats needs a non-empty 1-d reward vector")
    mean = float(r.mean())
    std = float(np.sqrt(np.mean((r - mean) ** 2)))
    return GroupStats(mean=mean, std=std, pass_rate=mean, group_size=r.size)


def grpo_advantages(rewards, stats: GroupStats, eps: float = ADV_EPS) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    r = np.asarray(rewards, dtype=np.float64)
    return (r - stats.mean) / (stats.std + eps)


def confidence_score(logp_theta, logp_ref, length, normalize: bool = True):
    """Log-ratio of a rollout under the current and reference policies.

    Works elementwise on arrays.  With ``normalize`` the score is divided by
    the sequence length.
    """
    length = np.asarray(length)
    if np.any(length < 1):
        raise ValueError("sequence length must be >= 1")
    c = np.asarray(logp_theta, dtype=np.float64) - np.asarray(logp_ref, dtype=np.float64)
    if normalize:
        c = c / length
    return c if c.ndim else float(c)


def softplus(c):
    c = np.asarray(c, dtype=np.float64)
    big = c > 30
    safe = np.where(big, 0.0, c)
    out = np.where(big, c + np.log1p(np.exp(-np.where(big, c, 0.0))), np.log1p(np.exp(safe)))
    return out if out.ndim else float(out)


def sigmoid(c):
    c = np.asarray(c, dtype=np.float64)
    out = np.exp(-np.logaddexp(0.0, -c))
    return out if out.ndim else float(out)


def modulate(c, kind: str = "softplus"):
    if kind == "softplus":
        return softplus(c)
    if kind == "relu":
        out = np.maximum(np.asarray(c, dtype=np.float64), 0.0)
        return out if out.ndim else float(out)
    raise ValueError(f"unknown modulation kind {kind!r}; expected one of {MODULATIONS}")


def ace_advantages(grpo, rewards, c_bar, alpha: float, kind: str = "softplus") -> np.ndarray:
    """Scale incorrect-rollout advantages by ``1 + alpha * modulate(c_bar)``.

    Correct rollouts (reward 1) keep their GRPO advantage.  ``alpha == 0``
    returns an exact copy of ``grpo``.
    """
    a = np.asarray(grpo, dtype=np.float64)
    r = np.asarray(rewards)
    c = np.asarray(c_bar, dtype=np.float64)
    if not a.shape == r.shape == c.shape:
        raise ValueError(f"shape mismatch: grpo {a.shape}, rewards {r.shape}, c {c.shape}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    out = a.copy()
    if alpha == 0:
        return out
    wrong = r == 0
    out[wrong] = a[wrong] * (1.0 + alpha * np.asarray(modulate(c[wrong], kind)))
    return out


def regime_of(c: float, tolerance: float = 0.0) -> str:
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    if c > tolerance:
        return "overconfident"
    if c < -tolerance:
        return "self_correcting"
    return "exploratory"
