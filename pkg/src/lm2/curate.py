"""Training-data curation for the decomposer and verifier roles.

Decomposer curation keeps a question only when the model produced more
than three subquestions and the final subanswer reconstructs the gold
answer; each kept question unrolls into n+1 samples whose last target is
the termination marker. Verifier curation labels wrong attempts with the
grading prompt and caps no-mistake records at 10% of the output.

Both pipelines resume idempotently: question ids already present in the
output file are skipped, and every skipped question is logged with a
machine-readable reason.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Final, Sequence

from lm2.backends import Backend, GenerationParams
from lm2.core import Concepts, Question
from lm2.errors import (
    BackendError,
    ConfigError,
    IncoherentVerdict,
    MalformedVerdict,
    SchemaError,
    UnbalancedTag,
)
from lm2.evaluation import extract_answer, score
from lm2.templates import (
    DONE_MARKER,
    TemplateSet,
    build_curation_concepts_prompt,
    build_curation_subanswer_prompt,
    build_curation_subquestions_prompt,
    build_curation_verifier_prompt,
    build_initial_cot_prompt,
    feedback_explanation,
    parse_feedback_tags,
    parse_question_tags,
    parse_subanswer_tag,
)
from lm2.verifier import RETRY_REMINDER

logger = logging.getLogger(__name__)

DECOMPOSER_SFT_VERSION: Final = "lm2-sft-decomposer/1"
VERIFIER_SFT_VERSION: Final = "lm2-sft-verifier/1"

# Keep a decomposition only when it has more than this many subquestions.
MIN_SUBQUESTIONS: Final = 3

SKIP_ALREADY_PROCESSED: Final = "already_processed"
SKIP_MISSING_GOLD: Final = "missing_gold"
SKIP_PARSE_ERROR: Final = "parse_error"
SKIP_TOO_FEW_SUBQUESTIONS: Final = "too_few_subquestions"
SKIP_WRONG_FINAL_ANSWER: Final = "wrong_final_answer"
SKIP_BACKEND_ERROR: Final = "backend_error"
SKIP_MALFORMED_LABEL: Final = "malformed_label"
SKIP_INCOHERENT_LABEL: Final = "incoherent_label"
SKIP_CLEAN_LABEL_FOR_WRONG_ANSWER: Final = "clean_label_for_wrong_answer"


@dataclass(frozen=True)
class SkipEntry:
    question_id: str
    reason: str
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"question_id": self.question_id, "reason": self.reason, "detail": self.detail}


@dataclass(frozen=True)
class DecomposerRecord:
    """One SFT sample: given pairs so far, emit the next subquestion tag."""

    question_id: str
    concepts: tuple[str, ...]
    pairs: tuple[tuple[str, str], ...]
    next_subquestion: str
    sample_index: int
    total_pairs: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": DECOMPOSER_SFT_VERSION,
            "question_id": self.question_id,
            "concepts": list(self.concepts),
            "pairs": [list(p) for p in self.pairs],
            "next_subquestion": self.next_subquestion,
            "sample_index": self.sample_index,
            "total_pairs": self.total_pairs,
        }


@dataclass(frozen=True)
class VerifierRecord:
    """One SFT sample: a student solution and its mistake classes."""

    question_id: str
    student_solution: str
    classes: tuple[int, ...]
    explanation: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": VERIFIER_SFT_VERSION,
            "question_id": self.question_id,
            "student_solution": self.student_solution,
            "classes": list(self.classes),
            "explanation": self.explanation,
        }


@dataclass
class CurationResult:
    """What one curation run produced: new records plus the skip log."""

    out_path: Path
    records: list[Any] = field(default_factory=list)
    skips: list[SkipEntry] = field(default_factory=list)

    @property
    def written(self) -> int:
        return len(self.records)


def _existing_ids(path: Path) -> set[str]:
    if not path.exists():
        return set()
    ids: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            ids.add(json.loads(line)["question_id"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad curation record: {exc}") from exc
    return ids


def _append_lines(path: Path, payloads: Sequence[dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for payload in payloads:
            fh.write(json.dumps(payload, ensure_ascii=False) + "\n")


def _skip_log_path(out_path: Path) -> Path:
    return out_path.with_name(out_path.stem + ".skips.jsonl")


def tagged_question(text: str) -> str:
    """The emission form of a subquestion, matching what decomposers output."""
    return f"$ question({text})$"


def curate_decomposer(
    questions: Sequence[Question],
    backend: Backend,
    out_path: str | Path,
    *,
    params: GenerationParams | None = None,
    templates: TemplateSet | None = None,
) -> CurationResult:
    """Generate decomposer SFT records for every usable question.

    Usable means: gold material present, more than MIN_SUBQUESTIONS
    subquestions parsed, and the last subanswer reconstructs the gold
    answer. Questions already in the output file are skipped.
    """
    params = params if params is not None else GenerationParams.curation()
    target = Path(out_path)
    result = CurationResult(out_path=target)
    done_ids = _existing_ids(target)

    def skip(question: Question, reason: str, detail: str = "") -> None:
        entry = SkipEntry(question.id, reason, detail)
        result.skips.append(entry)
        _append_lines(_skip_log_path(target), [entry.to_dict()])
        logger.info("curate_decomposer: skipping %s (%s)", question.id, reason)

    for question in questions:
        if question.id in done_ids:
            skip(question, SKIP_ALREADY_PROCESSED)
            continue
        if not question.gold_solution or question.gold_answer is None:
            skip(question, SKIP_MISSING_GOLD)
            continue
        try:
            concepts_text = backend.generate(
                "decomposer",
                "concepts",
                build_curation_concepts_prompt(question, templates=templates),
                params,
            ).completion
            subq_completion = backend.generate(
                "decomposer",
                "subquestion",
                build_curation_subquestions_prompt(question, templates=templates),
                params,
            ).completion
        except BackendError as exc:
            skip(question, SKIP_BACKEND_ERROR, str(exc))
            continue
        concepts = Concepts.from_text(concepts_text)
        try:
            subquestions = [t for t in parse_question_tags(subq_completion) if t]
        except UnbalancedTag as exc:
            skip(question, SKIP_PARSE_ERROR, str(exc))
            continue
        if len(subquestions) <= MIN_SUBQUESTIONS:
            skip(
                question,
                SKIP_TOO_FEW_SUBQUESTIONS,
                f"got {len(subquestions)}, need more than {MIN_SUBQUESTIONS}",
            )
            continue

        subanswers: list[str] = []
        try:
            for subquestion in subquestions:
                completion = backend.generate(
                    "solver",
                    "subanswer",
                    build_curation_subanswer_prompt(question, subquestion, templates=templates),
                    params,
                ).completion
                subanswers.append(parse_subanswer_tag(completion))
        except BackendError as exc:
            skip(question, SKIP_BACKEND_ERROR, str(exc))
            continue

        # The last subanswer must reconstruct the gold answer, otherwise
        # the whole decomposition is suspect.
        reconstructed = extract_answer(subanswers[-1], question.answer_kind)
        if not score(reconstructed, question.gold_answer, question.answer_kind):
            skip(
                question,
                SKIP_WRONG_FINAL_ANSWER,
                f"reconstructed {reconstructed!r} vs gold {question.gold_answer!r}",
            )
            continue

        pairs = list(zip(subquestions, subanswers))
        records = [
            DecomposerRecord(
                question_id=question.id,
                concepts=concepts.items,
                pairs=tuple(pairs[:j]),
                next_subquestion=(
                    tagged_question(subquestions[j]) if j < len(pairs) else DONE_MARKER
                ),
                sample_index=j,
                total_pairs=len(pairs),
            )
            for j in range(len(pairs) + 1)
        ]
        _append_lines(target, [r.to_dict() for r in records])
        result.records.extend(records)
        done_ids.add(question.id)
    return result


def _cap_allowance(mistakes: int, cap: float) -> int:
    """Largest no-mistake count n with n <= cap * (mistakes + n), exactly."""
    if not 0 < cap < 1:
        raise ConfigError(f"no_mistake_cap must be in (0, 1), got {cap}")
    ratio = Fraction(str(cap))
    return int(ratio * mistakes / (1 - ratio))


def _existing_verifier_counts(path: Path) -> tuple[set[str], int, int]:
    ids: set[str] = set()
    mistakes = 0
    clean = 0
    if not path.exists():
        return ids, mistakes, clean
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            ids.add(record["question_id"])
            classes = record["classes"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad curation record: {exc}") from exc
        if classes == [9]:
            clean += 1
        else:
            mistakes += 1
    return ids, mistakes, clean


def curate_verifier(
    questions: Sequence[Question],
    solver: Backend,
    labeler: Backend,
    out_path: str | Path,
    *,
    params: GenerationParams | None = None,
    templates: TemplateSet | None = None,
    no_mistake_cap: float = 0.10,
) -> CurationResult:
    """Generate verifier SFT records from fresh solver attempts.

    Wrong attempts are labeled by the grading prompt; correct attempts go
    into a pool from which no-mistake records are drawn, capped so they
    stay at or under `no_mistake_cap` of the whole output file.
    """
    params = params if params is not None else GenerationParams.curation()
    target = Path(out_path)
    result = CurationResult(out_path=target)
    done_ids, existing_mistakes, existing_clean = _existing_verifier_counts(target)

    def skip(question: Question, reason: str, detail: str = "") -> None:
        entry = SkipEntry(question.id, reason, detail)
        result.skips.append(entry)
        _append_lines(_skip_log_path(target), [entry.to_dict()])
        logger.info("curate_verifier: skipping %s (%s)", question.id, reason)

    pool: list[tuple[str, str]] = []
    mistake_records: list[VerifierRecord] = []
    for question in questions:
        if question.id in done_ids:
            skip(question, SKIP_ALREADY_PROCESSED)
            continue
        if question.gold_answer is None or not question.gold_solution:
            skip(question, SKIP_MISSING_GOLD)
            continue
        try:
            student = solver.generate(
                "solver",
                "initial_cot",
                build_initial_cot_prompt(question, templates=templates),
                params,
            ).completion
        except BackendError as exc:
            skip(question, SKIP_BACKEND_ERROR, str(exc))
            continue
        predicted = extract_answer(student, question.answer_kind)
        if score(predicted, question.gold_answer, question.answer_kind):
            pool.append((question.id, student))
            continue

        prompt = build_curation_verifier_prompt(
            student, question.gold_solution, templates=templates
        )
        try:
            completion = labeler.generate("verifier", "verdict", prompt, params).completion
            try:
                classes = parse_feedback_tags(completion)
            except MalformedVerdict:
                completion = labeler.generate(
                    "verifier", "verdict", prompt + RETRY_REMINDER, params
                ).completion
                classes = parse_feedback_tags(completion)
        except BackendError as exc:
            skip(question, SKIP_BACKEND_ERROR, str(exc))
            continue
        except MalformedVerdict as exc:
            skip(question, SKIP_MALFORMED_LABEL, str(exc))
            continue
        except IncoherentVerdict as exc:
            skip(question, SKIP_INCOHERENT_LABEL, str(exc))
            continue
        values = tuple(sorted(int(c) for c in classes))
        if values == (9,):
            # The label says clean but the extracted answer was wrong;
            # such a sample would teach the verifier the wrong thing.
            skip(question, SKIP_CLEAN_LABEL_FOR_WRONG_ANSWER)
            continue
        mistake_records.append(
            VerifierRecord(
                question_id=question.id,
                student_solution=student,
                classes=values,
                explanation=feedback_explanation(completion),
            )
        )

    total_mistakes = existing_mistakes + len(mistake_records)
    allowance = _cap_allowance(total_mistakes, no_mistake_cap)
    clean_quota = max(0, min(len(pool), allowance - existing_clean))
    clean_records = [
        VerifierRecord(
            question_id=qid,
            student_solution=student,
            classes=(9,),
            explanation="No mistake.",
        )
        for qid, student in pool[:clean_quota]
    ]
    new_records = mistake_records + clean_records
    _append_lines(target, [r.to_dict() for r in new_records])
    result.records.extend(new_records)
    return result
