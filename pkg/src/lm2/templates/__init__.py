"""Prompt templates, prompt builders, and tagged-output parsers.

Templates are plain text files with ``{{slot}}`` placeholders, loaded from
this package by default or from a user directory. All builders are pure:
equal inputs produce byte-equal prompts.

Parsers handle the three tagged output grammars the models use:
``<feedback> 1,4 </feedback>`` verdicts, ``$ question(...)$`` subquestion
tags with balanced-parenthesis payloads, and ``$sub-answer(...)$`` tags
with a whole-text fallback. ``$done$`` is the termination marker.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Final

from lm2.core import (
    Concepts,
    MistakeClass,
    Question,
    ReasoningContext,
    SubAnswer,
    SubQuestion,
    content_hash,
)
from lm2.errors import IncoherentVerdict, MalformedVerdict, TemplateError, UnbalancedTag

logger = logging.getLogger(__name__)

DONE_MARKER: Final = "$done$"

REQUIRED_TEMPLATES: Final = (
    "concepts",
    "next_subquestion",
    "subanswer",
    "final_answer",
    "initial_cot",
    "verifier",
    "curate_concepts",
    "curate_subquestions",
    "curate_subanswer",
    "curate_verifier",
)

_SLOT_RE = re.compile(r"\{\{([a-z_]+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    """One named template body with ``{{slot}}`` placeholders."""

    name: str
    body: str

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(_SLOT_RE.findall(self.body))

    def render(self, **bindings: str) -> str:
        """Fill every slot. Missing or unknown bindings are errors."""
        missing = self.slots - bindings.keys()
        if missing:
            raise TemplateError(f"template {self.name}: missing bindings {sorted(missing)}")
        unknown = bindings.keys() - self.slots
        if unknown:
            raise TemplateError(f"template {self.name}: unknown bindings {sorted(unknown)}")
        return _SLOT_RE.sub(lambda m: bindings[m.group(1)], self.body)


class TemplateSet:
    """A complete, validated set of named prompt templates."""

    def __init__(self, templates: dict[str, PromptTemplate], source: str) -> None:
        missing = [name for name in REQUIRED_TEMPLATES if name not in templates]
        if missing:
            raise TemplateError(f"template set {source}: missing templates {missing}")
        self._templates = dict(templates)
        self.source = source

    @classmethod
    def load(cls, directory: str | Path | None = None) -> TemplateSet:
        """Load every ``*.txt`` in `directory` (default: the packaged set)."""
        base = Path(directory) if directory is not None else Path(__file__).parent
        if not base.is_dir():
            raise TemplateError(f"template directory not found: {base}")
        templates = {
            path.stem: PromptTemplate(name=path.stem, body=path.read_text(encoding="utf-8"))
            for path in sorted(base.glob("*.txt"))
        }
        return cls(templates, source=str(base))

    def get(self, name: str) -> PromptTemplate:
        try:
            return self._templates[name]
        except KeyError:
            raise TemplateError(f"no template named {name!r} in {self.source}") from None

    def fingerprint(self) -> str:
        """Content hash over every template body; part of the run fingerprint."""
        return content_hash({name: t.body for name, t in self._templates.items()})


@lru_cache(maxsize=1)
def default_templates() -> TemplateSet:
    return TemplateSet.load()


def _resolve(templates: TemplateSet | None) -> TemplateSet:
    return templates if templates is not None else default_templates()


def _concepts_section(concepts: Concepts) -> str:
    if not concepts:
        return ""
    return f"Concepts: {concepts.render()}\n"


def _history_block(ctx: ReasoningContext) -> str:
    lines: list[str] = []
    for i, step in enumerate(ctx.accepted, start=1):
        lines.append(f"Sub-question {i}: {step.subquestion.text}")
        lines.append(f"Sub-answer {i}: {step.subanswer.effective_text}")
    if not lines:
        return ""
    return "\n".join(lines) + "\n"


def answer_format_instruction(question: Question) -> str:
    """The one-line final-answer formatting instruction for a question."""
    kind = question.answer_kind
    if kind.kind == "boxed_free_form":
        return "Write the final answer inside \\boxed{}."
    if kind.kind == "mcq_single":
        letters = ", ".join(kind.options)
        return f"Write the final answer as a single option letter out of {letters}."
    if kind.kind == "mcq_multi":
        letters = ", ".join(kind.options)
        return f"Write the final answer as the option letters of every correct choice out of {letters}."
    if kind.kind == "integer":
        return "Write the final answer as a single integer."
    return "Write the final answer as a single number."


def build_concepts_prompt(question: Question, *, templates: TemplateSet | None = None) -> str:
    return _resolve(templates).get("concepts").render(question=question.body)


def build_initial_cot_prompt(question: Question, *, templates: TemplateSet | None = None) -> str:
    return _resolve(templates).get("initial_cot").render(
        question=question.body,
        answer_format=answer_format_instruction(question),
    )


def build_next_subquestion_prompt(
    ctx: ReasoningContext, *, templates: TemplateSet | None = None
) -> str:
    return _resolve(templates).get("next_subquestion").render(
        question=ctx.question.body,
        concepts_section=_concepts_section(ctx.concepts),
        history=_history_block(ctx),
    )


def build_solver_prompt(
    ctx: ReasoningContext, subquestion: SubQuestion, *, templates: TemplateSet | None = None
) -> str:
    return _resolve(templates).get("subanswer").render(
        question=ctx.question.body,
        concepts_section=_concepts_section(ctx.concepts),
        history=_history_block(ctx),
        subquestion=subquestion.text,
    )


def build_final_prompt(
    ctx: ReasoningContext, *, terminated: bool = False, templates: TemplateSet | None = None
) -> str:
    """Build the final-answer prompt for a terminated episode.

    `terminated` is explicit state from the caller: an episode may
    legitimately terminate with zero accepted steps, so termination
    cannot be inferred from the context itself.
    """
    if not terminated:
        raise TemplateError("final prompt requested before the episode terminated")
    return _resolve(templates).get("final_answer").render(
        question=ctx.question.body,
        concepts_section=_concepts_section(ctx.concepts),
        history=_history_block(ctx),
        answer_format=answer_format_instruction(ctx.question),
    )


def build_verifier_prompt(
    subquestion: SubQuestion,
    subanswer: SubAnswer,
    ctx: ReasoningContext,
    *,
    templates: TemplateSet | None = None,
) -> str:
    return _resolve(templates).get("verifier").render(
        question=ctx.question.body,
        concepts_section=_concepts_section(ctx.concepts),
        history=_history_block(ctx),
        subquestion=subquestion.text,
        subanswer=subanswer.effective_text,
    )


def build_curation_concepts_prompt(
    question: Question, *, templates: TemplateSet | None = None
) -> str:
    if not question.gold_solution:
        raise TemplateError(f"question {question.id}: curation needs a gold solution")
    return _resolve(templates).get("curate_concepts").render(
        question=question.body, answer=question.gold_solution
    )


def build_curation_subquestions_prompt(
    question: Question, *, templates: TemplateSet | None = None
) -> str:
    if not question.gold_solution:
        raise TemplateError(f"question {question.id}: curation needs a gold solution")
    return _resolve(templates).get("curate_subquestions").render(
        question=question.body, answer=question.gold_solution
    )


def build_curation_subanswer_prompt(
    question: Question, subquestion_text: str, *, templates: TemplateSet | None = None
) -> str:
    if not question.gold_solution:
        raise TemplateError(f"question {question.id}: curation needs a gold solution")
    return _resolve(templates).get("curate_subanswer").render(
        question=question.body,
        answer=question.gold_solution,
        subquestion=subquestion_text,
    )


def build_curation_verifier_prompt(
    student_solution: str, gold_solution: str, *, templates: TemplateSet | None = None
) -> str:
    return _resolve(templates).get("curate_verifier").render(
        student_solution=student_solution, gold_solution=gold_solution
    )


# --- tagged-output parsing ---

_FEEDBACK_RE = re.compile(r"<feedback>(.*?)</feedback>", re.DOTALL)
_FEEDBACK_TOKEN_RE = re.compile(r"[1-9]")
_QUESTION_OPEN_RE = re.compile(r"\$\s*question\s*\(")
_SUBANSWER_OPEN_RE = re.compile(r"\$\s*sub-answer\s*\(")
_TRAILING_DOLLAR_RE = re.compile(r"\s*\$")
_DONE_RE = re.compile(r"\$\s*done\s*\$")


def parse_feedback_tags(text: str) -> frozenset[MistakeClass]:
    """Parse the class numbers out of the first feedback tag pair.

    Extra tag pairs are ignored with a warning. No pair, an empty pair,
    or a non-class token raises MalformedVerdict; combining class 9 with
    a mistake class raises IncoherentVerdict.
    """
    found = _FEEDBACK_RE.findall(text)
    if not found:
        raise MalformedVerdict("no <feedback>...</feedback> pair in output")
    if len(found) > 1:
        logger.warning("output has %d feedback tag pairs; using the first", len(found))
    content = found[0].strip()
    if not content:
        raise MalformedVerdict("feedback tag is empty")
    classes: set[MistakeClass] = set()
    for token in content.split(","):
        token = token.strip()
        if not _FEEDBACK_TOKEN_RE.fullmatch(token):
            raise MalformedVerdict(f"feedback tag holds non-class token {token!r}")
        classes.add(MistakeClass(int(token)))
    if MistakeClass.NO_MISTAKE in classes and len(classes) > 1:
        raise IncoherentVerdict(
            f"no-mistake combined with mistake classes: {sorted(int(c) for c in classes)}"
        )
    return frozenset(classes)


def feedback_explanation(text: str) -> str:
    """Everything outside the first feedback tag pair, stripped."""
    match = _FEEDBACK_RE.search(text)
    if not match:
        return text.strip()
    return (text[: match.start()] + text[match.end() :]).strip()


def _scan_payload(text: str, start: int, tag: str) -> tuple[str, int]:
    """Scan a balanced-parenthesis payload starting just inside '('.

    Returns (payload, index one past the closing parenthesis).
    """
    depth = 1
    for i in range(start, len(text)):
        ch = text[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                return text[start:i], i + 1
    raise UnbalancedTag(f"{tag} tag opened at offset {start} never closes")


def parse_question_tags(text: str) -> list[str]:
    """Extract every ``$ question(...)$`` payload, in order.

    Payloads may contain balanced parentheses and ``$`` freely; the
    trailing ``$`` after the closing parenthesis is optional. An opener
    whose parentheses never balance raises UnbalancedTag.
    """
    payloads: list[str] = []
    pos = 0
    while True:
        match = _QUESTION_OPEN_RE.search(text, pos)
        if match is None:
            return payloads
        payload, end = _scan_payload(text, match.end(), "question")
        trailing = _TRAILING_DOLLAR_RE.match(text, end)
        pos = trailing.end() if trailing else end
        payloads.append(payload.strip())


def extract_subanswer_payload(text: str) -> str | None:
    """The first ``$sub-answer(...)$`` payload, or None when absent/unbalanced."""
    match = _SUBANSWER_OPEN_RE.search(text)
    if match is None:
        return None
    try:
        payload, _ = _scan_payload(text, match.end(), "sub-answer")
    except UnbalancedTag:
        return None
    return payload.strip()


def parse_subanswer_tag(text: str) -> str:
    """The first sub-answer payload, falling back to the whole stripped text."""
    payload = extract_subanswer_payload(text)
    return payload if payload is not None else text.strip()


def has_done_marker(text: str) -> bool:
    return _DONE_RE.search(text) is not None
