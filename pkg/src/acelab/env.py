"""Synthetic verifiable tasks.

The only task family is ``mod_sum``: a sequence of ``L`` tokens from a
vocabulary of size ``V`` is correct iff its token sum is congruent to the
target ``t`` modulo ``M``.  Every oracle here is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from acelab.policy import ENUMERATION_CAP, PolicyParams, all_sequences, enumerate_sequences

TASK_KINDS = ("mod_sum",)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "mod_sum"
    modulus: int = 5
    target: int = 0
    vocab_size: int = 5
    length: int = 4
    prompt_class: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.modulus < 2:
            raise ValueError(f"modulus must be >= 2, got {self.modulus}")
        if not 0 <= self.target < self.modulus:
            raise ValueError(f"target {self.target} outside [0, {self.modulus})")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.length < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if self.prompt_class < 0:
            raise ValueError(f"prompt_class must be >= 0, got {self.prompt_class}")


@dataclass(frozen=True)
class VerdictRecord:
    reward: int


def rewards_for(task: TaskSpec, tokens: np.ndarray) -> np.ndarray:
    """Vectorised verifier over a (N, L) token batch; returns int rewards."""
    tokens = np.atleast_2d(np.asarray(tokens))
    if tokens.shape[1] != task.length:
        raise ValueError(f"expected sequences of length {task.length}, got {tokens.shape[1]}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= task.vocab_size):
        raise ValueError(f"token values must lie in [0, {task.vocab_size})")
    return (tokens.sum(axis=1) % task.modulus == task.target).astype(np.int64)


def verify(task: TaskSpec, tokens) -> VerdictRecord:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("verify takes a single token sequence")
    return VerdictRecord(int(rewards_for(task, tokens[None, :])[0]))


def correct_mask(task: TaskSpec, cap: int = ENUMERATION_CAP) -> tuple[np.ndarray, np.ndarray]:
    """All sequences of the task's length and a boolean mask of the correct ones."""
    seqs = all_sequences(task.vocab_size, task.length, cap)
    return seqs, rewards_for(task, seqs).astype(bool)


def count_correct(task: TaskSpec, cap: int = ENUMERATION_CAP) -> int:
    _, mask = correct_mask(task, cap)
    return int(mask.sum())


def exact_pass_rate(task: TaskSpec, params: PolicyParams, cap: int = ENUMERATION_CAP) -> float:
    _check_compatible(task, params)
    seqs, probs = enumerate_sequences(params, task.prompt_class, task.length, cap)
    mask = rewards_for(task, seqs).astype(bool)
    return float(np.clip(probs[mask].sum(), 0.0, 1.0))


def _check_compatible(task: TaskSpec, params: PolicyParams) -> None:
    if task.vocab_size != params.vocab_size:
        raise ValueError(
            f"task vocab_size {task.vocab_size} != policy vocab_size {params.vocab_size}"
        )
    if task.length > params.max_len:
        raise ValueError(f"task length {task.length} > policy max_len {params.max_len}")
    if task.prompt_class >= params.num_prompt_classes:
        raise ValueError(
            f"task prompt_class {task.prompt_class} >= {params.num_prompt_classes} policy classes"
        )


def make_dataset(num_tasks: int, modulus: int, vocab_size: int, length: int) -> list[TaskSpec]:
    """One task per prompt class, targets cycling through the residues."""
    return [
        TaskSpec("mod_sum", modulus, i % modulus, vocab_size, length, prompt_class=i)
        for i in range(num_tasks)
    ]


def parse_tasks(text: str) -> list[TaskSpec]:
    """Parse a task file: one ``kind M t V L`` record per line, ``#`` comments.

    Fields may be separated by whitespace or commas.  Prompt classes are
    assigned in file order.
    """
    tasks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields (kind M t V L), got {len(fields)}")
        kind, *nums = fields
        try:
            m, t, v, length = (int(x) for x in nums)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        tasks.append(TaskSpec(kind, m, t, v, length, prompt_class=len(tasks)))
    return tasks


def load_tasks(path: str | Path) -> list[TaskSpec]:
    return parse_tasks(Path(path).read_text())


def format_tasks(tasks: list[TaskSpec]) -> str:
    lines = ["# kind M t V L"]
    lines += [f"{t.kind} {t.modulus} {t.target} {t.vocab_size} {t.length}" for t in tasks]
    return "\n".join(lines) + "\n"
