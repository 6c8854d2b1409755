"""Tabular autoregressive softmax policy.

The policy is an order-1 autoregressive categorical model: the distribution of
the token at position ``t`` depends on the prompt class, the position and the
previous token.  Logits live in a single array of shape
``(num_prompt_classes, max_len, vocab_size + 1, vocab_size)``; previous-token
index ``vocab_size`` is the begin-of-sequence marker.

Everything here is exact: log-probabilities, score functions and full
enumeration of the sequence space, which is what makes the decomposition and
gradient checks in :mod:`acelab.theory` possible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

ENUMERATION_CAP = 10**6


class EnumerationTooLarge(ValueError):
    """Raised when exhaustive enumeration would exceed the configured cap."""

    def __init__(self, vocab_size: int, length: int, cap: int):
        self.size = vocab_size**length
        self.cap = cap
        super().__init__(
            f"refusing to enumerate {vocab_size}^{length} = {self.size} sequences "
            f"(cap {cap})"
        )


@dataclass
class PolicyParams:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 4:
            raise ValueError(f"logits must be 4-d, got shape {self.logits.shape}")
        p, length, prev, v = self.logits.shape
        if v < 1 or length < 1 or p < 1:
            raise ValueError(f"degenerate logits shape {self.logits.shape}")
        if prev != v + 1:
            raise ValueError(
                f"previous-token axis must have vocab_size + 1 = {v + 1} entries, got {prev}"
            )
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def uniform(cls, vocab_size: int, max_len: int, num_prompt_classes: int = 1) -> PolicyParams:
        return cls(np.zeros((num_prompt_classes, max_len, vocab_size + 1, vocab_size)))

    @classmethod
    def random(
        cls,
        vocab_size: int,
        max_len: int,
        num_prompt_classes: int = 1,
        scale: float = 1.0,
        rng: np.random.Generator | None = None,
    ) -> PolicyParams:
        rng = np.random.default_rng() if rng is None else rng
        shape = (num_prompt_classes, max_len, vocab_size + 1, vocab_size)
        return cls(scale * rng.standard_normal(shape))

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[3]

    @property
    def max_len(self) -> int:
        return self.logits.shape[1]

    @property
    def num_prompt_classes(self) -> int:
        return self.logits.shape[0]

    @property
    def bos(self) -> int:
        return self.vocab_size

    def copy(self) -> PolicyParams:
        return snapshot(self)


@dataclass
class TokenDistribution:
    probs: np.ndarray


@dataclass
class SequenceSample:
    tokens: np.ndarray
    logp_theta: float
    per_token_logp: np.ndarray


def _softmax(rows: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = rows / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    z = rows - rows.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_class(params: PolicyParams, prompt_class: int) -> None:
    if not 0 <= prompt_class < params.num_prompt_classes:
        raise IndexError(
            f"prompt class {prompt_class} out of range [0, {params.num_prompt_classes})"
        )


def _check_tokens(params: PolicyParams, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape[-1] > params.max_len:
        raise IndexError(f"sequence length {tokens.shape[-1]} exceeds max_len {params.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.vocab_size):
        raise IndexError(f"token values must lie in [0, {params.vocab_size})")
    return tokens.astype(np.int64)


def _contexts(params: PolicyParams, tokens: np.ndarray) -> np.ndarray:
    """Previous-token index for every position of a (N, T) token batch."""
    prev = np.empty_like(tokens)
    prev[:, 0] = params.bos
    prev[:, 1:] = tokens[:, :-1]
    return prev


def conditional_distribution(
    params: PolicyParams, prompt_class: int, position: int, prev_token: int
) -> TokenDistribution:
    _check_class(params, prompt_class)
    if not 0 <= position < params.max_len:
        raise IndexError(f"position {position} out of range [0, {params.max_len})")
    if not 0 <= prev_token <= params.vocab_size:
        raise IndexError(f"previous token {prev_token} out of range [0, {params.vocab_size}]")
    row = params.logits[prompt_class, position, prev_token]
    return TokenDistribution(_softmax(row))


def token_logprobs(params: PolicyParams, prompt_class: int, tokens: np.ndarray) -> np.ndarray:
    """Per-token log-probabilities for a (N, T) batch of sequences."""
    _check_class(params, prompt_class)
    tokens = np.atleast_2d(_check_tokens(params, tokens))
    n, length = tokens.shape
    prev = _contexts(params, tokens)
    pos = np.broadcast_to(np.arange(length), (n, length))
    rows = params.logits[prompt_class, pos, prev]
    return np.take_along_axis(_log_softmax(rows), tokens[..., None], axis=-1)[..., 0]


def sample_batch(
    params: PolicyParams,
    prompt_class: int,
    n: int,
    length: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` sequences at once.

    Returns ``(tokens, per_token_logp)`` with shapes ``(n, length)``.  The
    recorded log-probabilities are those of the temperature-1 policy, i.e. the
    quantity that enters ratios and confidence scores, regardless of the
    sampling temperature.
    """
    _check_class(params, prompt_class)
    if not 1 <= length <= params.max_len:
        raise IndexError(f"length {length} out of range [1, {params.max_len}]")
    tokens = np.empty((n, length), dtype=np.int64)
    logp = np.empty((n, length))
    prev = np.full(n, params.bos, dtype=np.int64)
    for t in range(length):
        rows = params.logits[prompt_class, t, prev]
        probs = _softmax(rows, temperature)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(n)[:, None] * cdf[:, -1:]
        tok = np.minimum((cdf <= u).sum(axis=1), params.vocab_size - 1)
        tokens[:, t] = tok
        logp[:, t] = _log_softmax(rows)[np.arange(n), tok]
        prev = tok
    return tokens, logp


def sample_sequence(
    params: PolicyParams,
    prompt_class: int,
    length: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    eos_token: int | None = None,
) -> SequenceSample:
    """Sample one sequence autoregressively.

    With ``eos_token`` set, generation stops right after that token is drawn,
    so the returned sequence may be shorter than ``length``.
    """
    _check_class(params, prompt_class)
    if not 1 <= length <= params.max_len:
        raise IndexError(f"length {length} out of range [1, {params.max_len}]")
    tokens: list[int] = []
    logps: list[float] = []
    prev = params.bos
    for t in range(length):
        row = params.logits[prompt_class, t, prev]
        probs = _softmax(row, temperature)
        tok = int(rng.choice(params.vocab_size, p=probs))
        tokens.append(tok)
        logps.append(float(_log_softmax(row)[tok]))
        prev = tok
        if eos_token is not None and tok == eos_token:
            break
    per_token = np.array(logps)
    return SequenceSample(np.array(tokens, dtype=np.int64), float(per_token.sum()), per_token)


def sequence_logprob(params: PolicyParams, prompt_class: int, tokens) -> float:
    return float(token_logprobs(params, prompt_class, tokens).sum())


def weighted_score_sum(
    params: PolicyParams, prompt_class: int, tokens: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """Gradient of ``sum_{n,t} w[n,t] * log pi(tokens[n,t] | context)`` w.r.t. the logits.

    ``weights`` may be per-sequence, shape ``(N,)``, or per-token, ``(N, T)``.
    Each visited cell receives ``w * (one_hot(token) - probs)``.
    """
    _check_class(params, prompt_class)
    tokens = np.atleast_2d(_check_tokens(params, tokens))
    n, length = tokens.shape
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(w[:, None], (n, length))
    prev = _contexts(params, tokens)
    pos = np.broadcast_to(np.arange(length), (n, length))
    probs = _softmax(params.logits[prompt_class, pos, prev])
    grad = np.zeros_like(params.logits)
    cls = np.full((n, length), prompt_class)
    np.add.at(grad, (cls, pos, prev, tokens), w)
    np.add.at(grad, (cls, pos, prev), -w[..., None] * probs)
    return grad


def score_function(params: PolicyParams, prompt_class: int, tokens) -> np.ndarray:
    """Analytic gradient of :func:`sequence_logprob` with respect to every logit."""
    return weighted_score_sum(params, prompt_class, np.atleast_2d(tokens), np.ones(1))


def all_sequences(vocab_size: int, length: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    if vocab_size**length > cap:
        raise EnumerationTooLarge(vocab_size, length, cap)
    return np.array(list(itertools.product(range(vocab_size), repeat=length)), dtype=np.int64)


def enumerate_sequences(
    params: PolicyParams, prompt_class: int, length: int, cap: int = ENUMERATION_CAP
) -> tuple[np.ndarray, np.ndarray]:
    """Every sequence of the given length with its probability.

    Returns ``(tokens, probs)`` with shapes ``(V**length, length)`` and
    ``(V**length,)``, in lexicographic token order.
    """
    seqs = all_sequences(params.vocab_size, length, cap)
    logp = token_logprobs(params, prompt_class, seqs).sum(axis=1)
    return seqs, np.exp(logp)


def token_entropy(params: PolicyParams, prompt_class: int, position: int, prev_token: int) -> float:
    p = conditional_distribution(params, prompt_class, position, prev_token).probs
    row = params.logits[prompt_class, position, prev_token]
    return float(-(p * _log_softmax(row)).sum())


def context_entropies(params: PolicyParams, prompt_class: int, tokens: np.ndarray) -> np.ndarray:
    """Exact conditional entropy at every visited context of a (N, T) batch."""
    tokens = np.atleast_2d(_check_tokens(params, tokens))
    n, length = tokens.shape
    prev = _contexts(params, tokens)
    pos = np.broadcast_to(np.arange(length), (n, length))
    rows = params.logits[prompt_class, pos, prev]
    logp = _log_softmax(rows)
    return -(np.exp(logp) * logp).sum(axis=-1)


def exact_kl(
    params: PolicyParams, ref: PolicyParams, prompt_class: int, length: int, cap: int = ENUMERATION_CAP
) -> float:
    """Sequence-level KL(params || ref) by enumeration."""
    seqs = all_sequences(params.vocab_size, length, cap)
    lp = token_logprobs(params, prompt_class, seqs).sum(axis=1)
    lq = token_logprobs(ref, prompt_class, seqs).sum(axis=1)
    return float(np.sum(np.exp(lp) * (lp - lq)))


def snapshot(params: PolicyParams) -> PolicyParams:
    return PolicyParams(params.logits.copy())


def pretrain(
    params: PolicyParams,
    rng: np.random.Generator,
    steps: int,
    target_scale: float = 1.0,
    learning_rate: float = 0.5,
) -> PolicyParams:
    """Pull every logit row toward a random seed distribution.

    Runs ``steps`` gradient steps on the row-wise cross-entropy to a target
    ``softmax(target_scale * N(0, 1))``; used to create a non-uniform reference
    policy.  Returns a new object.
    """
    target = _softmax(target_scale * rng.standard_normal(params.logits.shape))
    logits = params.logits.copy()
    for _ in range(steps):
        logits -= learning_rate * (_softmax(logits) - target)
    return PolicyParams(logits)
