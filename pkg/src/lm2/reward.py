"""Reward calculus for decomposer policy feedback.

A step at accepted index k with verdict classes C scores
``gamma**k * sum(coefficient(c) for c in C)``. Mistake coefficients are
non-positive; the no-mistake coefficient is positive and discounted like
any other. Episode rewards export to JSONL under ``lm2-reward/1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Final, Iterable

from lm2.core import (
    EpisodeTrace,
    MistakeClass,
    ModelCall,
    Step,
    StepReward,
    VerifierVerdict,
)
from lm2.errors import ConfigError, IncoherentVerdict, MissingVerdict, SchemaError, UnbalancedTag
from lm2.templates import parse_question_tags

REWARD_EXPORT_VERSION: Final = "lm2-reward/1"

_PARAM_KEYS: Final = frozenset(
    {
        "gamma",
        "conceptual",
        "computational",
        "procedural",
        "misunderstanding",
        "first_step",
        "first_half",
        "second_half",
        "last_step",
        "no_mistake",
    }
)


@dataclass(frozen=True)
class RewardParams:
    """Discount factor and per-class coefficients."""

    gamma: float = 0.9
    conceptual: float = -0.15
    computational: float = -0.05
    procedural: float = -0.15
    misunderstanding: float = -0.2
    first_step: float = -0.2
    first_half: float = -0.12
    second_half: float = -0.08
    last_step: float = -0.05
    no_mistake: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be strictly between 0 and 1, got {self.gamma}")
        for name in (
            "conceptual",
            "computational",
            "procedural",
            "misunderstanding",
            "first_step",
            "first_half",
            "second_half",
            "last_step",
        ):
            if getattr(self, name) > 0:
                raise ConfigError(f"mistake coefficient {name} must be non-positive")
        if self.no_mistake <= 0:
            raise ConfigError("no_mistake coefficient must be positive")

    def coefficient(self, cls: MistakeClass) -> float:
        return {
            MistakeClass.CONCEPTUAL: self.conceptual,
            MistakeClass.COMPUTATIONAL: self.computational,
            MistakeClass.PROCEDURAL: self.procedural,
            MistakeClass.MISUNDERSTOOD_QUESTION: self.misunderstanding,
            MistakeClass.FIRST_STEP: self.first_step,
            MistakeClass.FIRST_HALF: self.first_half,
            MistakeClass.SECOND_HALF: self.second_half,
            MistakeClass.LAST_STEP: self.last_step,
            MistakeClass.NO_MISTAKE: self.no_mistake,
        }[MistakeClass(cls)]

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in sorted(_PARAM_KEYS)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RewardParams:
        unknown = data.keys() - _PARAM_KEYS
        if unknown:
            raise ConfigError(f"unknown reward params: {sorted(unknown)}")
        return cls(**data)


def step_reward(k: int, verdict: VerifierVerdict, params: RewardParams) -> float:
    """gamma**k times the coefficient sum for the verdict's classes."""
    if k < 0:
        raise ValueError(f"step index must be non-negative, got {k}")
    classes = verdict.classes
    if MistakeClass.NO_MISTAKE in classes and len(classes) > 1:
        raise IncoherentVerdict(f"no-mistake combined with {sorted(int(c) for c in classes)}")
    # Summation in class order keeps float results reproducible.
    total = sum(params.coefficient(c) for c in sorted(classes))
    return params.gamma**k * total


def episode_rewards(
    trace: EpisodeTrace, params: RewardParams, *, include_rejected: bool = False
) -> list[StepReward]:
    """One StepReward per accepted step, plus rejected attempts if asked.

    Rejected attempts score at the index they were attempted. A step with
    no verdict (verifier disabled) raises MissingVerdict.
    """

    def scored(step: Step, rejected: bool) -> StepReward:
        if step.verdict is None:
            raise MissingVerdict(
                f"trace {trace.question_id}: step {step.subquestion.index_k} has no verdict"
            )
        k = step.subquestion.index_k
        return StepReward(
            index_k=k,
            classes=step.verdict.sorted_values(),
            value=step_reward(k, step.verdict, params),
            rejected=rejected,
        )

    rewards = [scored(step, False) for step in trace.context.accepted]
    if include_rejected:
        rewards.extend(scored(step, True) for step in trace.rejected)
    return rewards


def _chronological_attempts(trace: EpisodeTrace) -> list[tuple[Step, bool]]:
    """Accepted and rejected steps in the order they were attempted."""
    attempts = [(step, False) for step in trace.context.accepted]
    attempts.extend((step, True) for step in trace.rejected)
    attempts.sort(key=lambda item: (item[0].subquestion.index_k, item[0].subquestion.attempt))
    return attempts


def _question_bearing_calls(trace: EpisodeTrace) -> list[ModelCall]:
    """Decomposer calls whose completion carries a usable subquestion tag."""
    calls: list[ModelCall] = []
    for call in trace.model_calls:
        if call.role != "decomposer" or call.purpose != "subquestion":
            continue
        try:
            tags = parse_question_tags(call.completion)
        except UnbalancedTag:
            continue
        if any(tag for tag in tags):
            calls.append(call)
    return calls


def export_reward_dataset(
    traces: Iterable[EpisodeTrace],
    params: RewardParams,
    path: str | Path,
    *,
    include_rejected: bool = False,
) -> int:
    """Write (state, action, reward) records as JSONL; returns the count.

    state is the exact decomposer prompt for the attempt, action the raw
    decomposer completion, reward the step reward at the attempt's index.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with target.open("w", encoding="utf-8") as fh:
        for trace in traces:
            attempts = _chronological_attempts(trace)
            calls = _question_bearing_calls(trace)
            if len(calls) < len(attempts):
                raise SchemaError(
                    f"trace {trace.question_id}: {len(attempts)} attempts but only "
                    f"{len(calls)} question-bearing decomposer calls"
                )
            for (step, rejected), call in zip(attempts, calls):
                if rejected and not include_rejected:
                    continue
                if step.verdict is None:
                    raise MissingVerdict(
                        f"trace {trace.question_id}: step {step.subquestion.index_k} "
                        "has no verdict"
                    )
                record = {
                    "version": REWARD_EXPORT_VERSION,
                    "episode_id": trace.question_id,
                    "k": step.subquestion.index_k,
                    "state": call.prompt,
                    "action": call.completion,
                    "reward": step_reward(step.subquestion.index_k, step.verdict, params),
                    "rejected": rejected,
                }
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                written += 1
    return written
