"""Shared fixtures: question factories and scripted-backend helpers."""

from __future__ import annotations

import pytest

from lm2.backends import Backend, BackendDescriptor, ScenarioScript, ScriptedBackend
from lm2.core import (
    AnswerKind,
    Concepts,
    Question,
    ReasoningContext,
    Step,
    SubAnswer,
    SubQuestion,
    VerifierVerdict,
    append_accepted,
)

# Collected by the acceptance suite; printed in the terminal summary so the
# per-criterion lines survive pytest's output capture.
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture
def boxed_question() -> Question:
    return Question(
        id="q-train",
        body="A train covers 120 km in 2 hours. What is its average speed in km/h?",
        subject_tag="math:Algebra",
        answer_kind=AnswerKind.boxed(),
        gold_answer="60",
        gold_solution="Speed is distance over time: 120 / 2 = 60, so the answer is $\\boxed{60}$ km/h.",
    )


@pytest.fixture
def mcq_question() -> Question:
    return Question(
        id="q-mcq",
        body="Which value equals 2 + 2?\n\nA. 3\nB. 4\nC. 5\nD. 22",
        subject_tag="medqa",
        answer_kind=AnswerKind.mcq_single(("A", "B", "C", "D")),
        gold_answer="B",
    )


def scripted(rules: list[dict], backend_id: str = "scripted-test") -> ScriptedBackend:
    """A scripted backend straight from rule dicts."""
    descriptor = BackendDescriptor(id=backend_id, kind="scripted", scenario_path="<inline>")
    return ScriptedBackend(descriptor, ScenarioScript.from_dicts(rules))


def make_step(
    index: int,
    attempt: int = 0,
    sq_text: str | None = None,
    sa_text: str | None = None,
    classes: frozenset | None = None,
    forced: bool = False,
) -> Step:
    verdict = VerifierVerdict(classes=classes) if classes is not None else None
    return Step(
        subquestion=SubQuestion(
            index_k=index, attempt=attempt, text=sq_text or f"What is part {index}?"
        ),
        subanswer=SubAnswer(
            text=sa_text or f"$sub-answer(Part {index} equals {index + 1})$",
            extracted=f"Part {index} equals {index + 1}" if sa_text is None else None,
            tokens_in=10,
            tokens_out=5,
        ),
        verdict=verdict,
        forced=forced,
    )


def context_with_steps(
    question: Question, n: int, concepts: tuple[str, ...] = ()
) -> ReasoningContext:
    ctx = ReasoningContext(question=question, concepts=Concepts(concepts))
    for i in range(n):
        ctx = append_accepted(ctx, make_step(i, classes=frozenset({9})))
    return ctx


# --- the canonical regeneration episode ---
#
# One question, scripted so that the second subquestion's first answer is
# graded {1} (conceptual) and regenerated; everything else is clean. The
# accepted verdict sequence is [{9}, {2}, {9}]. Every rule carries fixed
# token counts (7 in, 11 out) so totals are hand-checkable.

REGEN_QUESTION = Question(
    id="q-regen",
    body=(
        "In triangle PQR the angles are in the ratio 3:4:2. "
        "What is the measure, in degrees, of the smallest angle?"
    ),
    subject_tag="math:Geometry",
    answer_kind=AnswerKind.boxed(),
    gold_answer="40",
    gold_solution=(
        "The angles are 3x, 4x and 2x, so 9x = 180 and x = 20. "
        "The smallest angle is 2x = $\\boxed{40}$ degrees."
    ),
)

REGEN_TOKENS_IN = 7
REGEN_TOKENS_OUT = 11


def _fixed(rule: dict) -> dict:
    rule.setdefault("tokens_in", REGEN_TOKENS_IN)
    rule.setdefault("tokens_out", REGEN_TOKENS_OUT)
    return rule


def regen_backends() -> dict[str, Backend]:
    """Fresh scripted backends for the regeneration episode.

    Scenario rules are stateful (`uses` budgets), so every run needs its
    own instances.
    """
    decomposer = scripted(
        [
            _fixed(
                {
                    "role": "decomposer",
                    "purpose": "concepts",
                    "completion": "Angle sum of a triangle, Ratio and proportion",
                }
            ),
            _fixed(
                {
                    "role": "decomposer",
                    "purpose": "subquestion",
                    "uses": 1,
                    "completion": "$ question(What is the measure of angle P?)$",
                }
            ),
            _fixed(
                {
                    "role": "decomposer",
                    "purpose": "subquestion",
                    "uses": 1,
                    "completion": "$ question(What is the measure of angle Q?)$",
                }
            ),
            _fixed(
                {
                    "role": "decomposer",
                    "purpose": "subquestion",
                    "uses": 1,
                    "completion": (
                        "$ question(Using the angle sum, what does angle Q work out to?)$"
                    ),
                }
            ),
            _fixed(
                {
                    "role": "decomposer",
                    "purpose": "subquestion",
                    "uses": 1,
                    "completion": "$ question(What is the measure of angle R?)$",
                }
            ),
            _fixed({"role": "decomposer", "purpose": "subquestion", "completion": "$done$"}),
        ],
        "dec-s",
    )
    solver = scripted(
        [
            _fixed(
                {
                    "role": "solver",
                    "purpose": "initial_cot",
                    "completion": "Guessing the angles are 35, 70 and 75: \\boxed{35}.",
                }
            ),
            _fixed(
                {
                    "role": "solver",
                    "purpose": "subanswer",
                    "contains": "Sub-question: What is the measure of angle P?",
                    "completion": "$sub-answer(Angle P is 3x = 60 degrees)$",
                }
            ),
            _fixed(
                {
                    "role": "solver",
                    "purpose": "subanswer",
                    "contains": "Sub-question: What is the measure of angle Q?",
                    "completion": "$sub-answer(Angle Q is 100 degrees)$",
                }
            ),
            _fixed(
                {
                    "role": "solver",
                    "purpose": "subanswer",
                    "contains": "Sub-question: Using the angle sum",
                    "completion": "$sub-answer(Angle Q is 4x = 80 degrees)$",
                }
            ),
            _fixed(
                {
                    "role": "solver",
                    "purpose": "subanswer",
                    "contains": "Sub-question: What is the measure of angle R?",
                    "completion": "$sub-answer(Angle R is 2x = 40 degrees)$",
                }
            ),
            _fixed(
                {
                    "role": "solver",
                    "purpose": "final_answer",
                    "completion": (
                        "The angles are 60, 80 and 40 degrees, so the smallest is \\boxed{40}."
                    ),
                }
            ),
        ],
        "sol-s",
    )
    verifier = scripted(
        [
            _fixed(
                {
                    "role": "verifier",
                    "purpose": "verdict",
                    "contains": "as follows:\nAngle Q is 100 degrees",
                    "completion": (
                        "The angle sum concept was misapplied. <feedback> 1 </feedback>"
                    ),
                }
            ),
            _fixed(
                {
                    "role": "verifier",
                    "purpose": "verdict",
                    "contains": "as follows:\nAngle Q is 4x = 80 degrees",
                    "completion": "Right idea, small arithmetic slip. <feedback> 2 </feedback>",
                }
            ),
            _fixed(
                {
                    "role": "verifier",
                    "purpose": "verdict",
                    "completion": "<feedback> 9 </feedback>",
                }
            ),
        ],
        "ver-s",
    )
    return {"decomposer": decomposer, "solver": solver, "verifier": verifier}


# Call count for the full episode: initial cot, concepts, five subquestion
# calls (one regenerated, one $done$), four subanswers, four verdicts, one
# final answer.
REGEN_CALL_COUNT = 16
