"""Verdict classification and the regeneration trigger rule."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import context_with_steps, make_step, scripted
from lm2.core import MistakeClass, Question, VerifierVerdict
from lm2.errors import IncoherentVerdict, MalformedVerdict
from lm2.verifier import RETRY_REMINDER, TRIGGER_CLASSES, classify, is_regeneration_trigger


def test_trigger_set_is_the_four_step_invalidating_classes() -> None:
    assert TRIGGER_CLASSES == frozenset(
        {
            MistakeClass.CONCEPTUAL,
            MistakeClass.PROCEDURAL,
            MistakeClass.MISUNDERSTOOD_QUESTION,
            MistakeClass.FIRST_STEP,
        }
    )


def test_trigger_examples() -> None:
    assert is_regeneration_trigger(VerifierVerdict(classes=frozenset({1, 4})))
    assert not is_regeneration_trigger(VerifierVerdict(classes=frozenset({2})))
    assert not is_regeneration_trigger(VerifierVerdict(classes=frozenset({9})))
    assert not is_regeneration_trigger(VerifierVerdict(classes=frozenset({6, 7, 8})))
    assert is_regeneration_trigger(VerifierVerdict(classes=frozenset({2, 3})))


@given(st.sets(st.integers(min_value=1, max_value=8), min_size=1, max_size=8) | st.just({9}))
def test_trigger_matches_intersection_oracle(classes: set[int]) -> None:
    verdict = VerifierVerdict(classes=frozenset(MistakeClass(c) for c in classes))
    assert is_regeneration_trigger(verdict) == bool(classes & {1, 3, 4, 5})


def test_classify_parses_verdict_and_explanation(boxed_question: Question) -> None:
    ctx = context_with_steps(boxed_question, 1)
    step = make_step(1)
    backend = scripted(
        [{"role": "verifier", "completion": "Dropped a factor of two. <feedback> 2 </feedback>"}]
    )
    verdict = classify(step.subquestion, step.subanswer, ctx, backend)
    assert verdict.classes == frozenset({MistakeClass.COMPUTATIONAL})
    assert verdict.explanation == "Dropped a factor of two."


def test_classify_retries_once_with_reminder(boxed_question: Question) -> None:
    ctx = context_with_steps(boxed_question, 0)
    step = make_step(0)
    backend = scripted(
        [
            {"role": "verifier", "completion": "forgot the tags entirely", "uses": 1},
            {
                "role": "verifier",
                "contains": RETRY_REMINDER,
                "completion": "<feedback> 5 </feedback>",
            },
        ]
    )
    verdict = classify(step.subquestion, step.subanswer, ctx, backend)
    assert verdict.classes == frozenset({MistakeClass.FIRST_STEP})


def test_classify_propagates_second_malformed_reply(boxed_question: Question) -> None:
    ctx = context_with_steps(boxed_question, 0)
    step = make_step(0)
    backend = scripted([{"role": "verifier", "completion": "still no tags"}])
    with pytest.raises(MalformedVerdict):
        classify(step.subquestion, step.subanswer, ctx, backend)


def test_classify_propagates_incoherent_verdict(boxed_question: Question) -> None:
    ctx = context_with_steps(boxed_question, 0)
    step = make_step(0)
    backend = scripted([{"role": "verifier", "completion": "<feedback> 9,3 </feedback>"}])
    with pytest.raises(IncoherentVerdict):
        classify(step.subquestion, step.subanswer, ctx, backend)
