"""Paired GRPO vs ACE-GRPO runs on a fixed mod_sum dataset.

Both arms of a pair share the seed, the dataset and the initial policy, so the
only difference between them is the advantage computation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from acelab.env import TaskSpec, load_tasks, make_dataset
from acelab.metrics import MetricsRecord
from acelab.policy import PolicyParams, pretrain
from acelab.trainer import TrainerConfig, train

REWARD_MATCH_TOL = 0.05


def build_tasks(config: TrainerConfig) -> list[TaskSpec]:
    if config.tasks_file:
        return load_tasks(config.tasks_file)
    return make_dataset(config.num_tasks, config.modulus, config.vocab_size, config.length)


def initial_policy(config: TrainerConfig, tasks: Sequence[TaskSpec]) -> PolicyParams:
    vocab = {t.vocab_size for t in tasks}
    if len(vocab) != 1:
        raise ValueError(f"all tasks must share one vocabulary size, got {sorted(vocab)}")
    params = PolicyParams.uniform(vocab.pop(), max(t.length for t in tasks), len(tasks))
    if config.pretrain_steps:
        rng = np.random.default_rng([config.seed, 3])
        params = pretrain(params, rng, config.pretrain_steps, target_scale=config.pretrain_scale)
    return params


def run(config: TrainerConfig) -> tuple[PolicyParams, list[MetricsRecord]]:
    tasks = build_tasks(config)
    return train(config, tasks, initial_policy(config, tasks))


@dataclass
class PairVerdict:
    seed: int
    entropy_step: int
    entropy_grpo: float
    entropy_ace: float
    oef_grpo: float
    oef_ace: float
    matched: bool
    matched_reward_grpo: float
    matched_reward_ace: float
    distinct_grpo: int
    distinct_ace: int

    @property
    def entropy_higher(self) -> bool:
        return self.entropy_ace > self.entropy_grpo

    @property
    def oef_lower(self) -> bool:
        return self.oef_ace < self.oef_grpo

    @property
    def coverage_not_worse(self) -> bool:
        return self.matched and self.distinct_ace >= self.distinct_grpo


def _record_at(records: Sequence[MetricsRecord], step: int) -> MetricsRecord:
    for r in records:
        if r.step == step:
            return r
    raise KeyError(f"no checkpoint at step {step}")


def match_by_reward(
    grpo: Sequence[MetricsRecord], ace: Sequence[MetricsRecord], tol: float = REWARD_MATCH_TOL
) -> tuple[MetricsRecord, MetricsRecord, bool]:
    """Pair checkpoints at a common mean-reward level.

    The run with the lower final reward contributes its final checkpoint; the
    other run contributes the checkpoint whose reward is closest to it (latest
    on ties).  The pair counts as matched when the rewards differ by at most
    ``tol``.
    """
    g_final, a_final = grpo[-1], ace[-1]
    if a_final.mean_reward <= g_final.mean_reward:
        other = min(reversed(grpo), key=lambda r: abs(r.mean_reward - a_final.mean_reward))
        g, a = other, a_final
    else:
        other = min(reversed(ace), key=lambda r: abs(r.mean_reward - g_final.mean_reward))
        g, a = g_final, other
    return g, a, abs(g.mean_reward - a.mean_reward) <= tol


def compare_pair(
    seed: int,
    grpo: Sequence[MetricsRecord],
    ace: Sequence[MetricsRecord],
    entropy_step: int = 20,
) -> PairVerdict:
    g_match, a_match, matched = match_by_reward(grpo, ace)
    return PairVerdict(
        seed=seed,
        entropy_step=entropy_step,
        entropy_grpo=_record_at(grpo, entropy_step).entropy,
        entropy_ace=_record_at(ace, entropy_step).entropy,
        oef_grpo=grpo[-1].oef,
        oef_ace=ace[-1].oef,
        matched=matched,
        matched_reward_grpo=g_match.mean_reward,
        matched_reward_ace=a_match.mean_reward,
        distinct_grpo=g_match.distinct_correct,
        distinct_ace=a_match.distinct_correct,
    )


def directional_experiment(
    base: TrainerConfig, seeds: Sequence[int], entropy_step: int = 20
) -> list[PairVerdict]:
    """Run GRPO and ACE-GRPO for each seed and compare them."""
    verdicts = []
    for seed in seeds:
        _, grpo = run(replace(base, algorithm="grpo", seed=seed))
        _, ace = run(replace(base, algorithm="ace_grpo", seed=seed))
        verdicts.append(compare_pair(seed, grpo, ace, entropy_step))
    return verdicts
