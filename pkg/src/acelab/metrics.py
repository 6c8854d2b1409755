"""Evaluation metrics: Pass@k, overconfident-error diagnostics, entropy, coverage."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from acelab.advantage import confidence_score
from acelab.env import TaskSpec, rewards_for
from acelab.policy import (
    ENUMERATION_CAP,
    EnumerationTooLarge,
    PolicyParams,
    context_entropies,
    exact_kl,
    sample_batch,
    token_logprobs,
)

DEFAULT_KS = (1, 2, 4, 8, 16, 32)
CSV_VERSION = "acelab-metrics v1"
ABSENT = "NA"


@dataclass
class MetricsRecord:
    step: int
    pass_at_k: dict[int, float]
    oef: float
    mean_overconfidence: float | None  # None when no incorrect rollout has c > 0
    entropy: float
    distinct_correct: int
    kl_to_ref: float
    mean_reward: float
    clip_fraction: float = 0.0
    n_incorrect: int = 0
    extra: dict = field(default_factory=dict)


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased Pass@k, ``1 - C(n-c, k) / C(n, k)``.

    Evaluated exactly as ``1 - prod_{i<k} (n-c-i)/(n-i)`` in rational
    arithmetic, then rounded once to float.
    """
    if not (0 <= c <= n and 1 <= k <= n):
        raise ValueError(f"need 0 <= c <= n and 1 <= k <= n, got n={n}, c={c}, k={k}")
    if n - c < k:
        return 1.0
    miss = Fraction(math.perm(n - c, k), math.perm(n, k))
    return min(1.0, max(0.0, float(1 - miss)))


def pass_at_k_eval(
    tasks: Sequence[TaskSpec],
    params: PolicyParams,
    n: int,
    ks: Sequence[int],
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> dict[int, float]:
    if n < max(ks):
        raise ValueError(f"n={n} must be >= max(ks)={max(ks)}")
    correct = []
    for task in tasks:
        tokens, _ = sample_batch(params, task.prompt_class, n, task.length, rng, temperature)
        correct.append(int(rewards_for(task, tokens).sum()))
    return {k: float(np.mean([pass_at_k(n, c, k) for c in correct])) for k in ks}


def oef(c_values_of_incorrect) -> float:
    """Fraction of incorrect rollouts with strictly positive confidence; 0 if none."""
    c = np.asarray(c_values_of_incorrect, dtype=np.float64)
    if c.size == 0:
        return 0.0
    return float(np.mean(c > 0))


def mean_overconfidence(c_values_of_incorrect) -> float | None:
    c = np.asarray(c_values_of_incorrect, dtype=np.float64)
    pos = c[c > 0]
    return float(pos.mean()) if pos.size else None


def policy_entropy(
    params: PolicyParams,
    tasks: Sequence[TaskSpec],
    samples_per_task: int,
    rng: np.random.Generator,
) -> float:
    """Average exact per-token entropy over contexts visited by sampled trajectories."""
    if samples_per_task < 1:
        raise ValueError("samples_per_task must be >= 1")
    per_task = []
    for task in tasks:
        tokens, _ = sample_batch(params, task.prompt_class, samples_per_task, task.length, rng)
        per_task.append(context_entropies(params, task.prompt_class, tokens).mean())
    return float(np.mean(per_task))


def distinct_correct(rollout_sets: Sequence[Sequence]) -> int:
    """Number of unique correct sequences per task, summed over tasks."""
    return sum(len({tuple(np.asarray(seq).tolist()) for seq in seqs}) for seqs in rollout_sets)


def checkpoint_metrics(
    params: PolicyParams,
    ref: PolicyParams,
    tasks: Sequence[TaskSpec],
    step: int,
    rng: np.random.Generator,
    n: int = 32,
    ks: Sequence[int] = DEFAULT_KS,
    normalize_confidence: bool = True,
    entropy_samples: int = 32,
    temperature: float = 1.0,
    clip_fraction: float = 0.0,
) -> MetricsRecord:
    """Sample ``n`` rollouts per task from ``params`` and summarise them."""
    ks = [k for k in ks if k <= n]
    counts, c_wrong, correct_sets, kls, rewards = [], [], [], [], []
    for task in tasks:
        tokens, lp = sample_batch(params, task.prompt_class, n, task.length, rng, temperature)
        r = rewards_for(task, tokens)
        lr = token_logprobs(ref, task.prompt_class, tokens)
        c = confidence_score(lp.sum(axis=1), lr.sum(axis=1), task.length, normalize_confidence)
        counts.append(int(r.sum()))
        rewards.append(r.mean())
        c_wrong.append(np.asarray(c)[r == 0])
        correct_sets.append(tokens[r == 1])
        try:
            kls.append(exact_kl(params, ref, task.prompt_class, task.length) / task.length)
        except EnumerationTooLarge:
            delta = lr - lp
            kls.append(float(np.mean(np.exp(delta) - 1 - delta)))
    c_all = np.concatenate(c_wrong) if c_wrong else np.empty(0)
    return MetricsRecord(
        step=step,
        pass_at_k={k: float(np.mean([pass_at_k(n, c, k) for c in counts])) for k in ks},
        oef=oef(c_all),
        mean_overconfidence=mean_overconfidence(c_all),
        entropy=policy_entropy(params, tasks, entropy_samples, rng),
        distinct_correct=distinct_correct(correct_sets),
        kl_to_ref=float(np.mean(kls)),
        mean_reward=float(np.mean(rewards)),
        clip_fraction=clip_fraction,
        n_incorrect=int(c_all.size),
    )


def csv_columns(ks: Sequence[int]) -> list[str]:
    base = [
        "step",
        "mean_reward",
        "oef",
        "mean_overconfidence",
        "entropy",
        "kl",
        "clip_fraction",
        "distinct_correct",
    ]
    return base + [f"pass@{k}" for k in ks]


def _fmt(x) -> str:
    if x is None:
        return ABSENT
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_csv(records: Sequence[MetricsRecord], ks: Sequence[int]) -> str:
    buf = io.StringIO()
    buf.write(f"# {CSV_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_columns(ks))
    for rec in records:
        writer.writerow(
            [
                _fmt(v)
                for v in (
                    rec.step,
                    rec.mean_reward,
                    rec.oef,
                    rec.mean_overconfidence,
                    rec.entropy,
                    rec.kl_to_ref,
                    rec.clip_fraction,
                    rec.distinct_correct,
                )
            ]
            + [_fmt(rec.pass_at_k.get(k)) for k in ks]
        )
    return buf.getvalue()


def write_metrics_csv(records: Sequence[MetricsRecord], ks: Sequence[int], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(records, ks))


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def record_to_dict(rec: MetricsRecord) -> dict:
    return {
        "step": rec.step,
        "mean_reward": rec.mean_reward,
        "oef": rec.oef,
        "mean_overconfidence": rec.mean_overconfidence,
        "entropy": rec.entropy,
        "kl_to_ref": rec.kl_to_ref,
        "clip_fraction": rec.clip_fraction,
        "distinct_correct": rec.distinct_correct,
        "n_incorrect": rec.n_incorrect,
        "pass_at_k": {str(k): v for k, v in rec.pass_at_k.items()},
    }
