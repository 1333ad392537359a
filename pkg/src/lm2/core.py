"""Domain types shared across the engine.

Key types: Question, AnswerKind, Concepts, SubQuestion, SubAnswer,
MistakeClass, VerifierVerdict, Step, ReasoningContext, StepReward,
ModelCall, EpisodeTrace. Traces serialize to canonical (key-sorted)
JSON under the format id ``lm2-trace/1``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Final

from lm2.errors import (
    IncoherentVerdict,
    IndexMismatchError,
    SchemaError,
)

TRACE_VERSION: Final = "lm2-trace/1"

ANSWER_KINDS: Final = ("mcq_single", "mcq_multi", "integer", "numeric", "boxed_free_form")

ROLE_DECOMPOSER: Final = "decomposer"
ROLE_SOLVER: Final = "solver"
ROLE_VERIFIER: Final = "verifier"
ROLES: Final = (ROLE_DECOMPOSER, ROLE_SOLVER, ROLE_VERIFIER)

PURPOSE_CONCEPTS: Final = "concepts"
PURPOSE_SUBQUESTION: Final = "subquestion"
PURPOSE_SUBANSWER: Final = "subanswer"
PURPOSE_FINAL_ANSWER: Final = "final_answer"
PURPOSE_INITIAL_COT: Final = "initial_cot"
PURPOSE_VERDICT: Final = "verdict"


def dumps_canonical(data: Any, *, compact: bool = False) -> str:
    """Serialize to deterministic JSON (sorted keys, stable whitespace)."""
    if compact:
        return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return json.dumps(data, sort_keys=True, ensure_ascii=False, indent=2)


def content_hash(data: Any) -> str:
    """sha256 hex digest of the compact canonical JSON form of `data`."""
    return hashlib.sha256(dumps_canonical(data, compact=True).encode("utf-8")).hexdigest()


class MistakeClass(IntEnum):
    """The nine verifier feedback classes. Values match the grading rubric."""

    CONCEPTUAL = 1
    COMPUTATIONAL = 2
    PROCEDURAL = 3
    MISUNDERSTOOD_QUESTION = 4
    FIRST_STEP = 5
    FIRST_HALF = 6
    SECOND_HALF = 7
    LAST_STEP = 8
    NO_MISTAKE = 9


@dataclass(frozen=True)
class AnswerKind:
    """How a question's final answer is expressed and compared.

    `kind` is one of ANSWER_KINDS. Multiple-choice kinds carry the option
    labels; the other kinds must not.
    """

    kind: str
    options: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ANSWER_KINDS:
            raise SchemaError(f"unknown answer kind: {self.kind!r}")
        if self.is_mcq:
            if len(self.options) < 2:
                raise SchemaError(f"{self.kind} requires at least two option labels")
        elif self.options:
            raise SchemaError(f"{self.kind} does not take option labels")

    @property
    def is_mcq(self) -> bool:
        return self.kind in ("mcq_single", "mcq_multi")

    @classmethod
    def mcq_single(cls, options: tuple[str, ...] = ("A", "B", "C", "D")) -> AnswerKind:
        return cls("mcq_single", tuple(options))

    @classmethod
    def mcq_multi(cls, options: tuple[str, ...] = ("A", "B", "C", "D")) -> AnswerKind:
        return cls("mcq_multi", tuple(options))

    @classmethod
    def integer(cls) -> AnswerKind:
        return cls("integer")

    @classmethod
    def numeric(cls) -> AnswerKind:
        return cls("numeric")

    @classmethod
    def boxed(cls) -> AnswerKind:
        return cls("boxed_free_form")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "options": list(self.options)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AnswerKind:
        return cls(kind=data["kind"], options=tuple(data.get("options") or ()))


@dataclass(frozen=True)
class Question:
    """One input problem, optionally with gold material for scoring/curation."""

    id: str
    body: str
    subject_tag: str
    answer_kind: AnswerKind
    gold_answer: str | None = None
    gold_solution: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise SchemaError("question id must be non-empty")
        if not self.body.strip():
            raise SchemaError(f"question {self.id}: body must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "body": self.body,
            "subject_tag": self.subject_tag,
            "answer_kind": self.answer_kind.to_dict(),
            "gold_answer": self.gold_answer,
            "gold_solution": self.gold_solution,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Question:
        return cls(
            id=data["id"],
            body=data["body"],
            subject_tag=data.get("subject_tag", ""),
            answer_kind=AnswerKind.from_dict(data["answer_kind"]),
            gold_answer=data.get("gold_answer"),
            gold_solution=data.get("gold_solution"),
        )


_CONCEPT_SPLIT_RE = re.compile(r"[,\n]")


@dataclass(frozen=True)
class Concepts:
    """Ordered, de-duplicated list of concept names for a question."""

    items: tuple[str, ...] = ()

    @classmethod
    def from_text(cls, text: str) -> Concepts:
        """Parse a comma- or newline-separated concept listing."""
        seen: dict[str, None] = {}
        for raw in _CONCEPT_SPLIT_RE.split(text):
            item = raw.strip().lstrip("-*").strip()
            if item:
                seen.setdefault(item, None)
        return cls(tuple(seen))

    def render(self) -> str:
        return ", ".join(self.items)

    def __bool__(self) -> bool:
        return bool(self.items)


@dataclass(frozen=True)
class SubQuestion:
    """One decomposer-proposed subquestion.

    `index_k` is the 0-based accepted-step index it targets; `attempt`
    counts prior rejected attempts at that index.
    """

    index_k: int
    attempt: int
    text: str

    def __post_init__(self) -> None:
        if self.index_k < 0 or self.attempt < 0:
            raise SchemaError("subquestion index and attempt must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {"index_k": self.index_k, "attempt": self.attempt, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SubQuestion:
        return cls(index_k=data["index_k"], attempt=data["attempt"], text=data["text"])


@dataclass(frozen=True)
class SubAnswer:
    """A solver reply to one subquestion.

    `text` is the raw completion; `extracted` is the tag payload when the
    solver used the answer tag, else None.
    """

    text: str
    extracted: str | None
    tokens_in: int
    tokens_out: int

    @property
    def effective_text(self) -> str:
        """The answer as it should appear in downstream prompts."""
        return self.extracted if self.extracted is not None else self.text.strip()

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "extracted": self.extracted,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SubAnswer:
        return cls(
            text=data["text"],
            extracted=data.get("extracted"),
            tokens_in=data["tokens_in"],
            tokens_out=data["tokens_out"],
        )


def _validate_classes(classes: frozenset[MistakeClass]) -> frozenset[MistakeClass]:
    if not classes:
        raise ValueError("a verdict needs at least one class")
    converted = frozenset(MistakeClass(c) for c in classes)
    # No-mistake is a statement about the whole answer: it cannot coexist
    # with any mistake class.
    if MistakeClass.NO_MISTAKE in converted and len(converted) > 1:
        raise IncoherentVerdict(
            "no-mistake cannot be combined with mistake classes: "
            f"{sorted(int(c) for c in converted)}"
        )
    return converted


@dataclass(frozen=True)
class VerifierVerdict:
    """The verifier's mistake classification for one subanswer."""

    classes: frozenset[MistakeClass]
    explanation: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", _validate_classes(self.classes))

    @property
    def is_clean(self) -> bool:
        return self.classes == frozenset({MistakeClass.NO_MISTAKE})

    def sorted_values(self) -> tuple[int, ...]:
        return tuple(sorted(int(c) for c in self.classes))

    def to_dict(self) -> dict[str, Any]:
        return {"classes": list(self.sorted_values()), "explanation": self.explanation}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> VerifierVerdict:
        return cls(
            classes=frozenset(MistakeClass(c) for c in data["classes"]),
            explanation=data.get("explanation", ""),
        )


@dataclass(frozen=True)
class Step:
    """One (subquestion, subanswer, verdict) triple.

    verdict is None when the verifier was disabled. `forced` marks a step
    accepted only because the regeneration cap was hit.
    """

    subquestion: SubQuestion
    subanswer: SubAnswer
    verdict: VerifierVerdict | None
    forced: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "subquestion": self.subquestion.to_dict(),
            "subanswer": self.subanswer.to_dict(),
            "verdict": self.verdict.to_dict() if self.verdict is not None else None,
            "forced": self.forced,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Step:
        verdict = data.get("verdict")
        return cls(
            subquestion=SubQuestion.from_dict(data["subquestion"]),
            subanswer=SubAnswer.from_dict(data["subanswer"]),
            verdict=VerifierVerdict.from_dict(verdict) if verdict is not None else None,
            forced=data.get("forced", False),
        )


@dataclass(frozen=True)
class ReasoningContext:
    """The append-only state a decomposer/solver prompt is built from."""

    question: Question
    concepts: Concepts = Concepts()
    accepted: tuple[Step, ...] = ()


def append_accepted(ctx: ReasoningContext, step: Step) -> ReasoningContext:
    """Return a new context with `step` appended at the next index.

    The step's subquestion index must equal the current accepted count;
    anything else is an ordering bug upstream.
    """
    expected = len(ctx.accepted)
    if step.subquestion.index_k != expected:
        raise IndexMismatchError(
            f"step index {step.subquestion.index_k} != accepted count {expected}"
        )
    return ReasoningContext(
        question=ctx.question,
        concepts=ctx.concepts,
        accepted=ctx.accepted + (step,),
    )


@dataclass(frozen=True)
class StepReward:
    """Scalar policy feedback for one decomposition step."""

    index_k: int
    classes: tuple[int, ...]
    value: float
    rejected: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "index_k": self.index_k,
            "classes": list(self.classes),
            "value": self.value,
            "rejected": self.rejected,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StepReward:
        return cls(
            index_k=data["index_k"],
            classes=tuple(data["classes"]),
            value=data["value"],
            rejected=data.get("rejected", False),
        )


@dataclass(frozen=True)
class ModelCall:
    """Telemetry for one backend generation, in call order (`seq`)."""

    seq: int
    role: str
    purpose: str
    prompt: str
    completion: str
    tokens_in: int
    tokens_out: int
    tokens_estimated: bool
    attempts: int
    latency_ms: int
    backend_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "role": self.role,
            "purpose": self.purpose,
            "prompt": self.prompt,
            "completion": self.completion,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "tokens_estimated": self.tokens_estimated,
            "attempts": self.attempts,
            "latency_ms": self.latency_ms,
            "backend_id": self.backend_id,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelCall:
        return cls(
            seq=data["seq"],
            role=data["role"],
            purpose=data["purpose"],
            prompt=data["prompt"],
            completion=data["completion"],
            tokens_in=data["tokens_in"],
            tokens_out=data["tokens_out"],
            tokens_estimated=data["tokens_estimated"],
            attempts=data["attempts"],
            latency_ms=data["latency_ms"],
            backend_id=data["backend_id"],
        )


@dataclass(frozen=True)
class InitialCot:
    """One-shot chain-of-thought attempt recorded before decomposition."""

    text: str
    extracted: str | None
    tokens_in: int
    tokens_out: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "extracted": self.extracted,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> InitialCot:
        return cls(
            text=data["text"],
            extracted=data.get("extracted"),
            tokens_in=data["tokens_in"],
            tokens_out=data["tokens_out"],
        )


@dataclass(frozen=True)
class FinalAnswer:
    """The post-decomposition final solver answer."""

    text: str
    extracted: str | None

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "extracted": self.extracted}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FinalAnswer:
        return cls(text=data["text"], extracted=data.get("extracted"))


STATUS_COMPLETED: Final = "completed"
STATUS_ABORTED: Final = "aborted"


@dataclass
class EpisodeTrace:
    """Complete record of one episode: context, attempts, calls, rewards.

    A trace is owned by exactly one episode while it is being built;
    afterwards it is plain data.
    """

    question_id: str
    context: ReasoningContext
    config_fingerprint: str = ""
    status: str = STATUS_COMPLETED
    abort_reason: str | None = None
    initial_cot: InitialCot | None = None
    final_answer: FinalAnswer | None = None
    rejected: list[Step] = field(default_factory=list)
    rewards: list[StepReward] = field(default_factory=list)
    model_calls: list[ModelCall] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def tokens_in_total(self) -> int:
        return sum(c.tokens_in for c in self.model_calls)

    @property
    def tokens_out_total(self) -> int:
        return sum(c.tokens_out for c in self.model_calls)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": TRACE_VERSION,
            "question_id": self.question_id,
            "question": self.context.question.to_dict(),
            "config_fingerprint": self.config_fingerprint,
            "status": self.status,
            "abort_reason": self.abort_reason,
            "concepts": list(self.context.concepts.items),
            "accepted": [s.to_dict() for s in self.context.accepted],
            "rejected": [s.to_dict() for s in self.rejected],
            "initial_cot": self.initial_cot.to_dict() if self.initial_cot else None,
            "final_answer": self.final_answer.to_dict() if self.final_answer else None,
            "rewards": [r.to_dict() for r in self.rewards],
            "model_calls": [c.to_dict() for c in self.model_calls],
            "warnings": list(self.warnings),
            "tokens_in_total": self.tokens_in_total,
            "tokens_out_total": self.tokens_out_total,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EpisodeTrace:
        version = data.get("version")
        if version != TRACE_VERSION:
            raise SchemaError(f"unsupported trace version: {version!r}")
        question = Question.from_dict(data["question"])
        trace = cls(
            question_id=data["question_id"],
            context=ReasoningContext(
                question=question,
                concepts=Concepts(tuple(data.get("concepts") or ())),
                accepted=tuple(Step.from_dict(s) for s in data["accepted"]),
            ),
            config_fingerprint=data.get("config_fingerprint", ""),
            status=data["status"],
            abort_reason=data.get("abort_reason"),
            initial_cot=(
                InitialCot.from_dict(data["initial_cot"]) if data.get("initial_cot") else None
            ),
            final_answer=(
                FinalAnswer.from_dict(data["final_answer"]) if data.get("final_answer") else None
            ),
            rejected=[Step.from_dict(s) for s in data.get("rejected", [])],
            rewards=[StepReward.from_dict(r) for r in data.get("rewards", [])],
            model_calls=[ModelCall.from_dict(c) for c in data.get("model_calls", [])],
            warnings=list(data.get("warnings", [])),
        )
        # Stored totals must agree with the call log; a mismatch means the
        # file was edited or truncated.
        for key, actual in (
            ("tokens_in_total", trace.tokens_in_total),
            ("tokens_out_total", trace.tokens_out_total),
        ):
            if key in data and data[key] != actual:
                raise SchemaError(
                    f"trace {trace.question_id}: {key}={data[key]} but model_calls sum to {actual}"
                )
        return trace

    def save(self, path: str | Path) -> Path:
        """Write the trace as canonical JSON. Returns the path written."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(dumps_canonical(self.to_dict()) + "\n", encoding="utf-8")
        return target

    @classmethod
    def load(cls, path: str | Path) -> EpisodeTrace:
        raw = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(data)
