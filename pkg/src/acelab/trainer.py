"""GRPO / DAPO training loop with optional ACE advantages.

One outer step collects a group of ``G`` rollouts per task, computes group
advantages (ACE-modulated for incorrect rollouts when enabled), and takes
``inner_epochs`` descent steps on the clipped surrogate plus a k3 KL penalty.
Advantages and confidence scores are detached: they enter the loss as
constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from acelab.advantage import (
    ADV_EPS,
    MODULATIONS,
    AdvantageVector,
    GroupStats,
    Rollout,
    ace_advantages,
    confidence_score,
    group_stats,
    grpo_advantages,
)
from acelab.env import TaskSpec, rewards_for
from acelab.metrics import DEFAULT_KS, MetricsRecord, checkpoint_metrics
from acelab.policy import (
    PolicyParams,
    sample_batch,
    snapshot,
    token_logprobs,
    weighted_score_sum,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("grpo", "ace_grpo", "dapo", "ace_dapo")
OPTIMIZERS = ("sgd", "adamw")
DAPO_CLIP_HIGH = 0.28


@dataclass
class TrainerConfig:
    algorithm: str = "ace_grpo"
    group_size: int = 8
    alpha: float = 1.0
    kl_coeff: float = 0.001
    clip_low: float = 0.2
    clip_high: float | None = None  # None: clip_low for grpo, 0.28 for dapo
    learning_rate: float = 20.0  # SGD scale; use ~0.03 with adamw
    steps: int = 500
    dynamic_sampling: bool | None = None  # None: on for dapo variants
    token_level_loss: bool = True
    modulation_kind: str = "softplus"
    normalize_confidence: bool = True
    seed: int = 0
    checkpoint_every: int = 25
    inner_epochs: int = 1
    batch_size: int = 0  # 0: every task each step
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    eps: float = ADV_EPS
    temperature: float = 1.0
    eval_samples: int = 32
    eval_ks: tuple[int, ...] = DEFAULT_KS
    entropy_samples: int = 32
    # dataset and initialisation
    num_tasks: int = 8
    modulus: int = 5
    vocab_size: int = 5
    length: int = 4
    tasks_file: str = ""
    pretrain_steps: int = 0
    pretrain_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm: expected one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.modulation_kind not in MODULATIONS:
            raise ValueError(
                f"modulation_kind: expected one of {MODULATIONS}, got {self.modulation_kind!r}"
            )
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer: expected one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.group_size < 2:
            raise ValueError("group_size: must be >= 2")
        if self.alpha < 0:
            raise ValueError("alpha: must be >= 0")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff: must be >= 0")
        if self.clip_low <= 0:
            raise ValueError("clip_low: must be > 0")
        if self.effective_clip_high < self.clip_low:
            raise ValueError("clip_high: must be >= clip_low")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate: must be > 0")
        if self.steps < 0:
            raise ValueError("steps: must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every: must be >= 1")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs: must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size: must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps: must be > 0")
        if self.eval_samples < 1 or not self.eval_ks or min(self.eval_ks) < 1:
            raise ValueError("eval_ks: need positive ks and eval_samples >= 1")
        if self.eval_samples < max(self.eval_ks):
            raise ValueError("eval_samples: must be >= max(eval_ks)")

    @property
    def is_dapo(self) -> bool:
        return self.algorithm in ("dapo", "ace_dapo")

    @property
    def uses_ace(self) -> bool:
        return self.algorithm in ("ace_grpo", "ace_dapo")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.uses_ace else 0.0

    @property
    def effective_clip_high(self) -> float:
        if self.clip_high is not None:
            return self.clip_high
        return max(DAPO_CLIP_HIGH, self.clip_low) if self.is_dapo else self.clip_low

    @property
    def effective_dynamic_sampling(self) -> bool:
        return self.is_dapo if self.dynamic_sampling is None else self.dynamic_sampling

    def with_overrides(self, **kw) -> TrainerConfig:
        return replace(self, **kw)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class RolloutGroup:
    task: TaskSpec
    tokens: np.ndarray  # (G, T)
    rewards: np.ndarray  # (G,)
    token_logp_theta: np.ndarray  # (G, T)
    token_logp_ref: np.ndarray
    token_logp_old: np.ndarray
    confidence: np.ndarray  # raw c, (G,)
    confidence_normalized: np.ndarray  # c / T
    stats: GroupStats
    advantages: AdvantageVector

    @property
    def size(self) -> int:
        return self.rewards.size

    @property
    def positive_set(self) -> np.ndarray:
        return np.flatnonzero(self.rewards > self.stats.mean)

    @property
    def negative_set(self) -> np.ndarray:
        return np.flatnonzero(self.rewards <= self.stats.mean)

    @property
    def rollouts(self) -> list[Rollout]:
        length = self.tokens.shape[1]
        return [
            Rollout(
                tokens=self.tokens[i],
                reward=int(self.rewards[i]),
                length=length,
                logp_theta=float(self.token_logp_theta[i].sum()),
                logp_ref=float(self.token_logp_ref[i].sum()),
                logp_old=float(self.token_logp_old[i].sum()),
                confidence=float(self.confidence[i]),
                confidence_normalized=float(self.confidence_normalized[i]),
            )
            for i in range(self.size)
        ]


@dataclass
class LossBreakdown:
    surrogate: float
    kl_term: float
    total: float
    ratios: np.ndarray
    clip_fraction: float
    grad: np.ndarray | None = field(default=None, repr=False)


def collect_group(
    task: TaskSpec,
    params: PolicyParams,
    ref: PolicyParams,
    old: PolicyParams,
    G: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
    modulation_kind: str = "softplus",
    normalize: bool = True,
    eps: float = ADV_EPS,
    temperature: float = 1.0,
) -> RolloutGroup:
    """Sample ``G`` rollouts from ``old`` and score them.

    Pass ``alpha=0`` for plain GRPO advantages (the ``ace`` field then equals
    ``grpo`` exactly).
    """
    if G < 2:
        raise ValueError("group size must be >= 2")
    tokens, lp_old = sample_batch(old, task.prompt_class, G, task.length, rng, temperature)
    lp = token_logprobs(params, task.prompt_class, tokens)
    lr = token_logprobs(ref, task.prompt_class, tokens)
    rewards = rewards_for(task, tokens)
    c = confidence_score(lp.sum(axis=1), lr.sum(axis=1), task.length, normalize=False)
    c_bar = c / task.length
    stats = group_stats(rewards)
    grpo = grpo_advantages(rewards, stats, eps)
    ace = ace_advantages(grpo, rewards, c_bar if normalize else c, alpha, modulation_kind)
    return RolloutGroup(
        task=task,
        tokens=tokens,
        rewards=rewards,
        token_logp_theta=lp,
        token_logp_ref=lr,
        token_logp_old=lp_old,
        confidence=np.asarray(c),
        confidence_normalized=np.asarray(c_bar),
        stats=stats,
        advantages=AdvantageVector(grpo, ace, alpha, eps, modulation_kind),
    )


def _k3(delta: np.ndarray) -> np.ndarray:
    return np.expm1(delta) - delta


def kl_estimate(group: RolloutGroup) -> float:
    """Per-token k3 estimate of KL(pi_theta || pi_ref) from recorded log-probs."""
    return float(np.mean(_k3(group.token_logp_ref - group.token_logp_theta)))


def surrogate_loss(group: RolloutGroup, params: PolicyParams, config: TrainerConfig) -> LossBreakdown:
    """Clipped surrogate plus KL penalty for one group, with its gradient.

    Token-level mode uses per-token ratios with the sequence advantage
    broadcast; sequence-level mode uses one ratio per rollout.  Terms are
    averaged over all tokens (or rollouts) of the group.
    """
    cls = group.task.prompt_class
    adv = group.advantages.ace
    lo, hi = 1.0 - config.clip_low, 1.0 + config.effective_clip_high
    lp = token_logprobs(params, cls, group.tokens)

    if config.token_level_loss:
        ratio = np.exp(lp - group.token_logp_old)
        a = np.broadcast_to(adv[:, None], ratio.shape)
    else:
        ratio = np.exp(lp.sum(axis=1) - group.token_logp_old.sum(axis=1))
        a = adv
    unclipped = ratio * a
    clipped = np.clip(ratio, lo, hi) * a
    clip_active = clipped < unclipped
    objective = np.where(clip_active, clipped, unclipped)
    n_terms = objective.size
    surrogate = -float(objective.sum() / n_terms)
    # d(objective)/d(log pi) is ratio * A on the unclipped branch, 0 when clipped
    weights = -np.where(clip_active, 0.0, unclipped) / n_terms

    delta = group.token_logp_ref - lp
    kl_term = float(np.mean(_k3(delta)))
    kl_weights = config.kl_coeff * -np.expm1(delta) / delta.size
    if not config.token_level_loss:
        weights = np.broadcast_to(weights[:, None], lp.shape)
    grad = weighted_score_sum(params, cls, group.tokens, weights + kl_weights)

    return LossBreakdown(
        surrogate=surrogate,
        kl_term=kl_term,
        total=surrogate + config.kl_coeff * kl_term,
        ratios=ratio,
        clip_fraction=float(clip_active.mean()),
        grad=grad,
    )


def batch_loss(groups: Sequence[RolloutGroup], params: PolicyParams, config: TrainerConfig) -> LossBreakdown:
    """Average of per-group losses and gradients, folded in list order."""
    parts = [surrogate_loss(g, params, config) for g in groups]
    n = len(parts)
    grad = np.zeros_like(params.logits)
    for p in parts:
        grad += p.grad
    surrogate = sum(p.surrogate for p in parts) / n
    kl_term = sum(p.kl_term for p in parts) / n
    return LossBreakdown(
        surrogate=surrogate,
        kl_term=kl_term,
        total=surrogate + config.kl_coeff * kl_term,
        ratios=np.concatenate([p.ratios.ravel() for p in parts]),
        clip_fraction=float(np.mean([p.clip_fraction for p in parts])),
        grad=grad / n,
    )


def apply_gradient(params: PolicyParams, loss_gradient: np.ndarray, learning_rate: float) -> PolicyParams:
    if loss_gradient.shape != params.logits.shape:
        raise ValueError(f"gradient shape {loss_gradient.shape} != logits shape {params.logits.shape}")
    return PolicyParams(params.logits - learning_rate * loss_gradient)


class AdamW:
    """Decoupled-weight-decay Adam over the logit tensor."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr, self.b1, self.b2, self.eps, self.wd = learning_rate, beta1, beta2, eps, weight_decay
        self.m = self.v = None
        self.t = 0

    def step(self, params: PolicyParams, grad: np.ndarray) -> PolicyParams:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        logits = params.logits * (1 - self.lr * self.wd)
        return PolicyParams(logits - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


class SGD:
    def __init__(self, learning_rate):
        self.lr = learning_rate

    def step(self, params: PolicyParams, grad: np.ndarray) -> PolicyParams:
        return apply_gradient(params, grad, self.lr)


def make_optimizer(config: TrainerConfig):
    if config.optimizer == "adamw":
        return AdamW(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay)
    return SGD(config.learning_rate)


def dynamic_sampling_filter(groups: Sequence[RolloutGroup]) -> list[RolloutGroup]:
    """Drop groups whose rewards are all equal (they carry no policy gradient)."""
    return [g for g in groups if 0 < g.rewards.sum() < g.size]


def rollout_rng(seed: int, step: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, step, task_index])


def eval_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def train(
    config: TrainerConfig,
    tasks: Sequence[TaskSpec],
    params: PolicyParams,
    ref: PolicyParams | None = None,
    on_checkpoint=None,
) -> tuple[PolicyParams, list[MetricsRecord]]:
    """Run the training loop; the reference policy defaults to a snapshot of ``params``.

    ``on_checkpoint(record, params, ref)`` is called after each checkpoint
    record is made.
    """
    ref = snapshot(params) if ref is None else ref
    optimizer = make_optimizer(config)
    batch_rng = np.random.default_rng([config.seed, 2])
    records: list[MetricsRecord] = []
    last_clip = 0.0

    for step in range(1, config.steps + 1):
        old = snapshot(params)
        if config.batch_size and config.batch_size < len(tasks):
            batch = sorted(batch_rng.choice(len(tasks), config.batch_size, replace=False))
        else:
            batch = range(len(tasks))
        groups = [
            collect_group(
                tasks[i],
                params,
                ref,
                old,
                config.group_size,
                rollout_rng(config.seed, step, i),
                alpha=config.effective_alpha,
                modulation_kind=config.modulation_kind,
                normalize=config.normalize_confidence,
                eps=config.eps,
                temperature=config.temperature,
            )
            for i in batch
        ]
        if config.effective_dynamic_sampling:
            groups = dynamic_sampling_filter(groups)
        if not groups:
            log.info("step %d: every group degenerate, update skipped", step)
        else:
            for _ in range(config.inner_epochs):
                loss = batch_loss(groups, params, config)
                params = optimizer.step(params, loss.grad)
            last_clip = loss.clip_fraction

        if step % config.checkpoint_every == 0:
            records.append(
                checkpoint_metrics(
                    params,
                    ref,
                    tasks,
                    step,
                    eval_rng(config.seed, step),
                    n=config.eval_samples,
                    ks=config.eval_ks,
                    normalize_confidence=config.normalize_confidence,
                    entropy_samples=config.entropy_samples,
                    temperature=config.temperature,
                    clip_fraction=last_clip,
                )
            )
            if on_checkpoint is not None:
                on_checkpoint(records[-1], params, ref)
    return params, records
