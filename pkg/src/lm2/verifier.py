"""Verifier-side logic: verdict classification and the regeneration rule.

A verdict triggers regeneration when it intersects the trigger set
{conceptual, procedural, misunderstood-question, first-step}: those four
invalidate the whole step. Purely computational or location-only classes
(first/second half, last step) do not.
"""

from __future__ import annotations

from typing import Final

from lm2.backends import Backend, GenerationParams
from lm2.core import (
    MistakeClass,
    ReasoningContext,
    SubAnswer,
    SubQuestion,
    VerifierVerdict,
)
from lm2.errors import MalformedVerdict
from lm2.templates import (
    TemplateSet,
    build_verifier_prompt,
    feedback_explanation,
    parse_feedback_tags,
)

__all__ = [
    "MistakeClass",
    "VerifierVerdict",
    "TRIGGER_CLASSES",
    "is_regeneration_trigger",
    "classify",
    "RETRY_REMINDER",
]

TRIGGER_CLASSES: Final = frozenset(
    {
        MistakeClass.CONCEPTUAL,
        MistakeClass.PROCEDURAL,
        MistakeClass.MISUNDERSTOOD_QUESTION,
        MistakeClass.FIRST_STEP,
    }
)

RETRY_REMINDER: Final = (
    "\n\nYour previous reply could not be parsed. Reply again, and make sure "
    "the class numbers appear in between <feedback> and </feedback> tags, "
    "for example: <feedback> 1,4 </feedback>"
)


def is_regeneration_trigger(verdict: VerifierVerdict) -> bool:
    return bool(verdict.classes & TRIGGER_CLASSES)


def classify(
    subquestion: SubQuestion,
    subanswer: SubAnswer,
    ctx: ReasoningContext,
    backend: Backend,
    *,
    params: GenerationParams | None = None,
    templates: TemplateSet | None = None,
) -> VerifierVerdict:
    """Ask the verifier backend to classify one subanswer.

    A malformed reply gets exactly one retry with a format reminder
    appended; a second malformed reply propagates MalformedVerdict.
    """
    params = params if params is not None else GenerationParams.inference()
    prompt = build_verifier_prompt(subquestion, subanswer, ctx, templates=templates)
    completion = backend.generate("verifier", "verdict", prompt, params).completion
    try:
        classes = parse_feedback_tags(completion)
    except MalformedVerdict:
        completion = backend.generate(
            "verifier", "verdict", prompt + RETRY_REMINDER, params
        ).completion
        classes = parse_feedback_tags(completion)
    return VerifierVerdict(classes=classes, explanation=feedback_explanation(completion))
