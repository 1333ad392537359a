"""The episode loop: decompose, solve, verify, regenerate, finalize.

run_episode drives one question end to end and returns its EpisodeTrace;
run_batch fans questions out over a thread pool, persisting one trace
file per question. Every model call flows through a per-episode recorder
that logs telemetry, enforces the token budget, and honors cancellation.
"""

from __future__ import annotations

import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final

from lm2.backends import Backend, Generation, GenerationParams
from lm2.core import (
    PURPOSE_CONCEPTS,
    PURPOSE_FINAL_ANSWER,
    PURPOSE_INITIAL_COT,
    PURPOSE_SUBANSWER,
    PURPOSE_SUBQUESTION,
    PURPOSE_VERDICT,
    ROLE_DECOMPOSER,
    ROLE_SOLVER,
    ROLE_VERIFIER,
    STATUS_ABORTED,
    STATUS_COMPLETED,
    Concepts,
    EpisodeTrace,
    FinalAnswer,
    InitialCot,
    MistakeClass,
    ModelCall,
    Question,
    ReasoningContext,
    Step,
    SubAnswer,
    SubQuestion,
    VerifierVerdict,
    append_accepted,
)
from lm2.errors import (
    BackendError,
    BudgetExceeded,
    ConfigError,
    IncoherentVerdict,
    MalformedVerdict,
    ParseDeadlock,
    RunCancelled,
    SchemaError,
    UnbalancedTag,
)
from lm2.evaluation import extract_answer
from lm2.reward import RewardParams, episode_rewards
from lm2.templates import (
    TemplateSet,
    build_concepts_prompt,
    build_final_prompt,
    build_initial_cot_prompt,
    build_next_subquestion_prompt,
    build_solver_prompt,
    extract_subanswer_payload,
    has_done_marker,
    parse_question_tags,
)
from lm2.verifier import classify, is_regeneration_trigger

logger = logging.getLogger(__name__)

_POLICY_KEYS: Final = frozenset(
    {
        "max_subquestions",
        "max_regenerations_per_index",
        "enable_verifier",
        "enable_concepts",
        "enable_initial_cot",
        "token_budget",
        "reward",
        "generation",
    }
)

# The decomposer gets this many consecutive unusable outputs before the
# episode is declared deadlocked.
_MAX_CONSECUTIVE_PARSE_FAILURES: Final = 2


@dataclass(frozen=True)
class RunPolicy:
    """Knobs governing one run's episode behavior."""

    max_subquestions: int = 8
    max_regenerations_per_index: int = 3
    enable_verifier: bool = True
    enable_concepts: bool = True
    enable_initial_cot: bool = True
    token_budget: int = 20000
    reward: RewardParams = RewardParams()
    generation: GenerationParams = GenerationParams()

    def __post_init__(self) -> None:
        if self.max_subquestions < 1:
            raise ConfigError("max_subquestions must be >= 1")
        if self.max_regenerations_per_index < 0:
            raise ConfigError("max_regenerations_per_index must be >= 0")
        if self.token_budget < 1:
            raise ConfigError("token_budget must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_subquestions": self.max_subquestions,
            "max_regenerations_per_index": self.max_regenerations_per_index,
            "enable_verifier": self.enable_verifier,
            "enable_concepts": self.enable_concepts,
            "enable_initial_cot": self.enable_initial_cot,
            "token_budget": self.token_budget,
            "reward": self.reward.to_dict(),
            "generation": self.generation.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunPolicy:
        unknown = data.keys() - _POLICY_KEYS
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {
            k: data[k] for k in _POLICY_KEYS - {"reward", "generation"} if k in data
        }
        if "reward" in data:
            kwargs["reward"] = RewardParams.from_dict(data["reward"])
        if "generation" in data:
            kwargs["generation"] = GenerationParams.from_dict(data["generation"])
        return cls(**kwargs)


class _Recorder:
    """Per-episode funnel for model calls: telemetry, budget, cancellation."""

    def __init__(
        self,
        trace: EpisodeTrace,
        budget: int,
        cancel_event: threading.Event | None,
    ) -> None:
        self.trace = trace
        self.budget = budget
        self.cancel_event = cancel_event
        self.consumed = 0
        self.seq = 0

    def call(
        self, backend: Backend, role: str, purpose: str, prompt: str, params: GenerationParams
    ) -> Generation:
        if self.cancel_event is not None and self.cancel_event.is_set():
            raise RunCancelled("run cancelled")
        if self.consumed >= self.budget:
            raise BudgetExceeded(
                f"token budget exhausted: {self.consumed} of {self.budget} used"
            )
        generation = backend.generate(role, purpose, prompt, params)
        self.consumed += generation.tokens_in + generation.tokens_out
        self.trace.model_calls.append(
            ModelCall(
                seq=self.seq,
                role=role,
                purpose=purpose,
                prompt=prompt,
                completion=generation.completion,
                tokens_in=generation.tokens_in,
                tokens_out=generation.tokens_out,
                tokens_estimated=generation.tokens_estimated,
                attempts=generation.attempts,
                latency_ms=generation.latency_ms,
                backend_id=backend.descriptor.id,
            )
        )
        self.seq += 1
        return generation


class _RecorderFacade(Backend):
    """Backend view over a recorder, so helpers like classify log calls too."""

    def __init__(self, inner: Backend, recorder: _Recorder) -> None:
        self.inner = inner
        self.recorder = recorder
        self.descriptor = inner.descriptor

    def generate(
        self, role: str, purpose: str, prompt: str, params: GenerationParams
    ) -> Generation:
        return self.recorder.call(self.inner, role, purpose, prompt, params)


def _require_roles(backends: dict[str, Backend], policy: RunPolicy) -> None:
    needed = {ROLE_DECOMPOSER, ROLE_SOLVER}
    if policy.enable_verifier:
        needed.add(ROLE_VERIFIER)
    missing = needed - backends.keys()
    if missing:
        raise ConfigError(f"missing backends for roles: {sorted(missing)}")


def run_episode(
    question: Question,
    backends: dict[str, Backend],
    policy: RunPolicy,
    *,
    templates: TemplateSet | None = None,
    fingerprint: str = "",
    cancel_event: threading.Event | None = None,
) -> EpisodeTrace:
    """Run one question through the full protocol and return its trace.

    Backend failures, budget exhaustion, parse deadlock, and cancellation
    abort the episode: the partial trace comes back with status=aborted
    rather than raising.
    """
    _require_roles(backends, policy)
    trace = EpisodeTrace(
        question_id=question.id,
        context=ReasoningContext(question=question),
        config_fingerprint=fingerprint,
    )
    recorder = _Recorder(trace, policy.token_budget, cancel_event)
    decomposer = _RecorderFacade(backends[ROLE_DECOMPOSER], recorder)
    solver = _RecorderFacade(backends[ROLE_SOLVER], recorder)
    verifier = (
        _RecorderFacade(backends[ROLE_VERIFIER], recorder) if policy.enable_verifier else None
    )
    params = policy.generation

    try:
        if policy.enable_initial_cot:
            prompt = build_initial_cot_prompt(question, templates=templates)
            generation = solver.generate(ROLE_SOLVER, PURPOSE_INITIAL_COT, prompt, params)
            trace.initial_cot = InitialCot(
                text=generation.completion,
                extracted=extract_answer(generation.completion, question.answer_kind),
                tokens_in=generation.tokens_in,
                tokens_out=generation.tokens_out,
            )

        concepts = Concepts()
        if policy.enable_concepts:
            prompt = build_concepts_prompt(question, templates=templates)
            generation = decomposer.generate(ROLE_DECOMPOSER, PURPOSE_CONCEPTS, prompt, params)
            concepts = Concepts.from_text(generation.completion)
        ctx = ReasoningContext(question=question, concepts=concepts)
        trace.context = ctx

        attempt = 0
        consecutive_failures = 0
        while len(ctx.accepted) < policy.max_subquestions:
            prompt = build_next_subquestion_prompt(ctx, templates=templates)
            generation = decomposer.generate(ROLE_DECOMPOSER, PURPOSE_SUBQUESTION, prompt, params)
            try:
                tags = [t for t in parse_question_tags(generation.completion) if t]
            except UnbalancedTag:
                tags = []
            if not tags:
                if has_done_marker(generation.completion):
                    break
                consecutive_failures += 1
                if consecutive_failures >= _MAX_CONSECUTIVE_PARSE_FAILURES:
                    raise ParseDeadlock(
                        f"question {question.id}: decomposer produced no usable tag "
                        f"{consecutive_failures} times in a row"
                    )
                continue
            consecutive_failures = 0

            subquestion = SubQuestion(index_k=len(ctx.accepted), attempt=attempt, text=tags[0])
            prompt = build_solver_prompt(ctx, subquestion, templates=templates)
            generation = solver.generate(ROLE_SOLVER, PURPOSE_SUBANSWER, prompt, params)
            subanswer = SubAnswer(
                text=generation.completion,
                extracted=extract_subanswer_payload(generation.completion),
                tokens_in=generation.tokens_in,
                tokens_out=generation.tokens_out,
            )

            if verifier is None:
                ctx = append_accepted(ctx, Step(subquestion, subanswer, None))
                trace.context = ctx
                attempt = 0
                continue

            try:
                verdict = classify(
                    subquestion, subanswer, ctx, verifier, params=params, templates=templates
                )
            except (MalformedVerdict, IncoherentVerdict) as exc:
                # A broken verifier must not wedge the loop: accept the
                # step as clean, but leave an audit mark.
                verdict = VerifierVerdict(classes=frozenset({MistakeClass.NO_MISTAKE}))
                trace.warnings.append(
                    f"verdict for step {subquestion.index_k} attempt {attempt} "
                    f"unusable after retry ({exc}); substituted no-mistake"
                )

            if is_regeneration_trigger(verdict):
                if attempt < policy.max_regenerations_per_index:
                    trace.rejected.append(Step(subquestion, subanswer, verdict))
                    attempt += 1
                    continue
                ctx = append_accepted(ctx, Step(subquestion, subanswer, verdict, forced=True))
            else:
                ctx = append_accepted(ctx, Step(subquestion, subanswer, verdict))
            trace.context = ctx
            attempt = 0

        prompt = build_final_prompt(ctx, terminated=True, templates=templates)
        generation = solver.generate(ROLE_SOLVER, PURPOSE_FINAL_ANSWER, prompt, params)
        trace.final_answer = FinalAnswer(
            text=generation.completion,
            extracted=extract_answer(generation.completion, question.answer_kind),
        )
        trace.status = STATUS_COMPLETED
    except (BackendError, BudgetExceeded, ParseDeadlock, RunCancelled) as exc:
        trace.status = STATUS_ABORTED
        trace.abort_reason = f"{type(exc).__name__}: {exc}"
        logger.warning("episode %s aborted: %s", question.id, trace.abort_reason)

    if policy.enable_verifier:
        trace.rewards = episode_rewards(trace, policy.reward)
    return trace


_FILENAME_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def trace_filename(question_id: str) -> str:
    return _FILENAME_SAFE.sub("_", question_id) + ".json"


@dataclass
class BatchSummary:
    """Outcome of run_batch, in input question order."""

    traces: list[EpisodeTrace] = field(default_factory=list)
    paths: list[Path] = field(default_factory=list)

    @property
    def completed(self) -> int:
        return sum(1 for t in self.traces if t.status == STATUS_COMPLETED)

    @property
    def aborted(self) -> int:
        return sum(1 for t in self.traces if t.status == STATUS_ABORTED)


def run_batch(
    questions: list[Question],
    backends: dict[str, Backend],
    policy: RunPolicy,
    *,
    parallelism: int = 1,
    out_dir: str | Path | None = None,
    templates: TemplateSet | None = None,
    fingerprint: str = "",
    cancel_event: threading.Event | None = None,
) -> BatchSummary:
    """Run every question, optionally in parallel, persisting traces.

    Episodes are independent: each owns its trace exclusively, so the
    output set is the same regardless of scheduling order. Results come
    back in input order.
    """
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    seen: set[str] = set()
    names: set[str] = set()
    for question in questions:
        if question.id in seen:
            raise SchemaError(f"duplicate question id in batch: {question.id!r}")
        seen.add(question.id)
        name = trace_filename(question.id)
        if name in names:
            raise SchemaError(f"question ids collide after filename sanitizing: {name!r}")
        names.add(name)

    def one(question: Question) -> EpisodeTrace:
        return run_episode(
            question,
            backends,
            policy,
            templates=templates,
            fingerprint=fingerprint,
            cancel_event=cancel_event,
        )

    summary = BatchSummary()
    if parallelism == 1:
        traces = [one(q) for q in questions]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            traces = list(pool.map(one, questions))
    for question, trace in zip(questions, traces):
        summary.traces.append(trace)
        if out_dir is not None:
            summary.paths.append(trace.save(Path(out_dir) / trace_filename(question.id)))
    return summary
