"""Episode loop behavior: acceptance, regeneration, ablations, aborts."""

from __future__ import annotations

import threading

import pytest

from conftest import REGEN_QUESTION, regen_backends, scripted
from lm2.backends import Backend
from lm2.core import AnswerKind, MistakeClass, Question
from lm2.errors import ConfigError, SchemaError
from lm2.orchestrator import RunPolicy, run_batch, run_episode, trace_filename


def _backends(
    dec: list[dict], sol: list[dict], ver: list[dict] | None = None
) -> dict[str, Backend]:
    backends: dict[str, Backend] = {
        "decomposer": scripted(dec, "dec-s"),
        "solver": scripted(sol, "sol-s"),
    }
    if ver is not None:
        backends["verifier"] = scripted(ver, "ver-s")
    return backends


SIMPLE_QUESTION = Question(
    id="q-simple",
    body="What is 3 + 4?",
    subject_tag="math:Arithmetic",
    answer_kind=AnswerKind.boxed(),
    gold_answer="7",
)

_SOLVER_BASICS = [
    {"role": "solver", "purpose": "initial_cot", "completion": "Maybe \\boxed{7}."},
    {"role": "solver", "purpose": "subanswer", "completion": "$sub-answer(It is 7)$"},
    {"role": "solver", "purpose": "final_answer", "completion": "So we get \\boxed{7}."},
]

_CLEAN_VERIFIER = [{"role": "verifier", "completion": "<feedback> 9 </feedback>"}]


def test_policy_validation() -> None:
    with pytest.raises(ConfigError):
        RunPolicy(max_subquestions=0)
    with pytest.raises(ConfigError):
        RunPolicy(max_regenerations_per_index=-1)
    with pytest.raises(ConfigError):
        RunPolicy(token_budget=0)
    with pytest.raises(ConfigError):
        RunPolicy.from_dict({"max_subquestions": 4, "typo": True})


def test_policy_from_dict_nested_params() -> None:
    policy = RunPolicy.from_dict(
        {
            "max_subquestions": 4,
            "reward": {"gamma": 0.5},
            "generation": {"temperature": 0.2, "max_tokens": 100},
        }
    )
    assert policy.max_subquestions == 4
    assert policy.reward.gamma == 0.5
    assert policy.generation.max_tokens == 100
    assert RunPolicy.from_dict(policy.to_dict()) == policy


def test_missing_role_is_config_error() -> None:
    backends = _backends([], _SOLVER_BASICS)
    with pytest.raises(ConfigError):
        run_episode(SIMPLE_QUESTION, backends, RunPolicy())


def test_regeneration_episode_end_to_end() -> None:
    trace = run_episode(REGEN_QUESTION, regen_backends(), RunPolicy(), fingerprint="fp")

    assert trace.status == "completed"
    assert [s.subquestion.index_k for s in trace.context.accepted] == [0, 1, 2]
    assert len(trace.rejected) == 1
    rejected = trace.rejected[0]
    assert rejected.subquestion.index_k == 1
    assert rejected.subquestion.attempt == 0
    assert rejected.verdict is not None
    assert rejected.verdict.classes == frozenset({MistakeClass.CONCEPTUAL})
    # The accepted step at index 1 is the second attempt.
    assert trace.context.accepted[1].subquestion.attempt == 1
    assert trace.final_answer is not None
    assert trace.final_answer.extracted == "40"

    purposes = [c.purpose for c in trace.model_calls]
    assert purposes == [
        "initial_cot",
        "concepts",
        "subquestion",
        "subanswer",
        "verdict",
        "subquestion",
        "subanswer",
        "verdict",
        "subquestion",
        "subanswer",
        "verdict",
        "subquestion",
        "subanswer",
        "verdict",
        "subquestion",
        "final_answer",
    ]
    assert trace.initial_cot is not None
    assert trace.initial_cot.extracted == "35"
    assert trace.config_fingerprint == "fp"
    values = [r.value for r in trace.rewards]
    assert values == pytest.approx([1.0, -0.045, 0.81], abs=1e-12)


def test_rejected_answer_never_reaches_later_prompts() -> None:
    trace = run_episode(REGEN_QUESTION, regen_backends(), RunPolicy())
    final_call = next(c for c in trace.model_calls if c.purpose == "final_answer")
    assert "Angle Q is 100 degrees" not in final_call.prompt
    assert "Angle Q is 4x = 80 degrees" in final_call.prompt


def test_verifier_disabled_accepts_everything() -> None:
    policy = RunPolicy(enable_verifier=False)
    trace = run_episode(REGEN_QUESTION, regen_backends(), policy)
    assert trace.status == "completed"
    assert trace.rejected == []
    assert len(trace.context.accepted) == 4
    assert all(s.verdict is None for s in trace.context.accepted)
    # The answer the verifier would have rejected is now part of the context.
    answers = [s.subanswer.effective_text for s in trace.context.accepted]
    assert "Angle Q is 100 degrees" in answers
    final_call = next(c for c in trace.model_calls if c.purpose == "final_answer")
    assert "Angle Q is 100 degrees" in final_call.prompt
    assert not any(c.purpose == "verdict" for c in trace.model_calls)
    assert trace.rewards == []


def test_concepts_disabled_leaves_no_concepts_section() -> None:
    policy = RunPolicy(enable_concepts=False)
    trace = run_episode(REGEN_QUESTION, regen_backends(), policy)
    assert trace.status == "completed"
    assert not trace.context.concepts
    assert not any(c.purpose == "concepts" for c in trace.model_calls)
    for call in trace.model_calls:
        assert "Concepts:" not in call.prompt


def test_initial_cot_disabled() -> None:
    policy = RunPolicy(enable_initial_cot=False)
    trace = run_episode(REGEN_QUESTION, regen_backends(), policy)
    assert trace.status == "completed"
    assert trace.initial_cot is None
    assert trace.model_calls[0].purpose == "concepts"


def test_forced_accept_at_regeneration_cap() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {
            "role": "decomposer",
            "purpose": "subquestion",
            "uses": 3,
            "completion": "$ question(What is the sum?)$",
        },
        {"role": "decomposer", "purpose": "subquestion", "completion": "$done$"},
    ]
    ver = [{"role": "verifier", "completion": "Off concept. <feedback> 1 </feedback>"}]
    policy = RunPolicy(max_regenerations_per_index=2)
    trace = run_episode(SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, ver), policy)

    assert trace.status == "completed"
    assert len(trace.rejected) == 2
    assert [s.subquestion.attempt for s in trace.rejected] == [0, 1]
    assert len(trace.context.accepted) == 1
    accepted = trace.context.accepted[0]
    assert accepted.forced
    assert accepted.subquestion.attempt == 2
    assert accepted.verdict is not None
    assert accepted.verdict.classes == frozenset({MistakeClass.CONCEPTUAL})
    # The forced step still earns its (negative) reward.
    assert trace.rewards[0].value == pytest.approx(-0.15, abs=1e-12)


def test_immediate_done_yields_zero_steps() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {"role": "decomposer", "purpose": "subquestion", "completion": "$done$"},
    ]
    trace = run_episode(
        SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, _CLEAN_VERIFIER), RunPolicy()
    )
    assert trace.status == "completed"
    assert trace.context.accepted == ()
    assert trace.final_answer is not None
    assert trace.final_answer.extracted == "7"


def test_subquestion_cap_stops_decomposition() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {"role": "decomposer", "purpose": "subquestion", "completion": "$ question(Again?)$"},
    ]
    policy = RunPolicy(max_subquestions=3)
    trace = run_episode(
        SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, _CLEAN_VERIFIER), policy
    )
    assert trace.status == "completed"
    assert len(trace.context.accepted) == 3
    assert sum(1 for c in trace.model_calls if c.purpose == "subquestion") == 3


def test_parse_deadlock_aborts() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {"role": "decomposer", "purpose": "subquestion", "completion": "rambling, no tag"},
    ]
    trace = run_episode(
        SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, _CLEAN_VERIFIER), RunPolicy()
    )
    assert trace.status == "aborted"
    assert trace.abort_reason is not None
    assert trace.abort_reason.startswith("ParseDeadlock")
    assert trace.final_answer is None


def test_unbalanced_tag_counts_as_parse_failure() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {"role": "decomposer", "purpose": "subquestion", "completion": "$ question(broken"},
    ]
    trace = run_episode(
        SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, _CLEAN_VERIFIER), RunPolicy()
    )
    assert trace.status == "aborted"
    assert trace.abort_reason is not None
    assert trace.abort_reason.startswith("ParseDeadlock")


def test_single_parse_failure_recovers() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {"role": "decomposer", "purpose": "subquestion", "uses": 1, "completion": "oops"},
        {
            "role": "decomposer",
            "purpose": "subquestion",
            "uses": 1,
            "completion": "$ question(What is the sum?)$",
        },
        {"role": "decomposer", "purpose": "subquestion", "completion": "$done$"},
    ]
    trace = run_episode(
        SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, _CLEAN_VERIFIER), RunPolicy()
    )
    assert trace.status == "completed"
    assert len(trace.context.accepted) == 1


def test_budget_exhaustion_aborts_with_partial_trace() -> None:
    policy = RunPolicy(token_budget=1)
    trace = run_episode(REGEN_QUESTION, regen_backends(), policy)
    assert trace.status == "aborted"
    assert trace.abort_reason is not None
    assert trace.abort_reason.startswith("BudgetExceeded")
    # The first call fit under the budget; the second was refused.
    assert len(trace.model_calls) == 1


def test_scenario_miss_aborts_episode() -> None:
    trace = run_episode(
        SIMPLE_QUESTION,
        _backends([], [{"role": "solver", "completion": "x"}], _CLEAN_VERIFIER),
        RunPolicy(),
    )
    assert trace.status == "aborted"
    assert trace.abort_reason is not None
    assert trace.abort_reason.startswith("ScenarioMiss")


def test_malformed_verdict_twice_substitutes_no_mistake() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {
            "role": "decomposer",
            "purpose": "subquestion",
            "uses": 1,
            "completion": "$ question(What is the sum?)$",
        },
        {"role": "decomposer", "purpose": "subquestion", "completion": "$done$"},
    ]
    ver = [{"role": "verifier", "completion": "no tags, ever"}]
    trace = run_episode(SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, ver), RunPolicy())
    assert trace.status == "completed"
    step = trace.context.accepted[0]
    assert step.verdict is not None
    assert step.verdict.is_clean
    assert len(trace.warnings) == 1
    assert "substituted no-mistake" in trace.warnings[0]
    # One verdict call plus one reminder retry.
    assert sum(1 for c in trace.model_calls if c.purpose == "verdict") == 2


def test_incoherent_verdict_substitutes_without_retry() -> None:
    dec = [
        {"role": "decomposer", "purpose": "concepts", "completion": "Addition"},
        {
            "role": "decomposer",
            "purpose": "subquestion",
            "uses": 1,
            "completion": "$ question(What is the sum?)$",
        },
        {"role": "decomposer", "purpose": "subquestion", "completion": "$done$"},
    ]
    ver = [{"role": "verifier", "completion": "<feedback> 9,1 </feedback>"}]
    trace = run_episode(SIMPLE_QUESTION, _backends(dec, _SOLVER_BASICS, ver), RunPolicy())
    assert trace.status == "completed"
    assert len(trace.warnings) == 1
    assert sum(1 for c in trace.model_calls if c.purpose == "verdict") == 1


def test_cancellation_before_first_call() -> None:
    cancel = threading.Event()
    cancel.set()
    trace = run_episode(
        REGEN_QUESTION, regen_backends(), RunPolicy(), cancel_event=cancel
    )
    assert trace.status == "aborted"
    assert trace.abort_reason is not None
    assert trace.abort_reason.startswith("RunCancelled")
    assert trace.model_calls == []


def test_trace_filename_sanitizes() -> None:
    assert trace_filename("plain-id_1.2") == "plain-id_1.2.json"
    assert trace_filename("weird id/with:stuff") == "weird_id_with_stuff.json"


# --- batches ---


def _batch_questions(n: int) -> list[Question]:
    return [
        Question(
            id=f"qb{i}",
            body=f"Batch marker qb{i}: what is 3 + 4?",
            subject_tag="math:Arithmetic",
            answer_kind=AnswerKind.boxed(),
            gold_answer="7",
        )
        for i in range(n)
    ]


def _batch_backends(questions: list[Question]) -> dict[str, Backend]:
    dec: list[dict] = [{"role": "decomposer", "purpose": "concepts", "completion": "Addition"}]
    for q in questions:
        dec.append(
            {
                "role": "decomposer",
                "purpose": "subquestion",
                "contains": q.body,
                "uses": 1,
                "completion": f"$ question(What is the sum for {q.id}?)$",
            }
        )
        dec.append(
            {
                "role": "decomposer",
                "purpose": "subquestion",
                "contains": q.body,
                "completion": "$done$",
            }
        )
    return _backends(dec, _SOLVER_BASICS, _CLEAN_VERIFIER)


def test_run_batch_persists_traces_in_input_order(tmp_path) -> None:
    questions = _batch_questions(3)
    summary = run_batch(
        questions,
        _batch_backends(questions),
        RunPolicy(),
        out_dir=tmp_path,
        fingerprint="fp",
    )
    assert summary.completed == 3
    assert summary.aborted == 0
    assert [t.question_id for t in summary.traces] == [q.id for q in questions]
    assert [p.name for p in summary.paths] == [f"qb{i}.json" for i in range(3)]
    for path in summary.paths:
        assert path.exists()


def test_run_batch_parallel_matches_sequential(tmp_path) -> None:
    questions = _batch_questions(4)
    sequential = run_batch(
        questions, _batch_backends(questions), RunPolicy(), fingerprint="fp"
    )
    parallel = run_batch(
        questions,
        _batch_backends(questions),
        RunPolicy(),
        parallelism=3,
        fingerprint="fp",
    )
    assert [t.to_dict() for t in sequential.traces] == [t.to_dict() for t in parallel.traces]


def test_run_batch_rejects_duplicate_ids() -> None:
    questions = _batch_questions(2)
    duplicated = questions + [questions[0]]
    with pytest.raises(SchemaError):
        run_batch(duplicated, _batch_backends(questions), RunPolicy())


def test_run_batch_rejects_filename_collisions() -> None:
    q1 = Question(id="a/b", body="x", subject_tag="", answer_kind=AnswerKind.integer())
    q2 = Question(id="a_b", body="x", subject_tag="", answer_kind=AnswerKind.integer())
    with pytest.raises(SchemaError):
        run_batch([q1, q2], _backends([], [], []), RunPolicy())


def test_run_batch_rejects_bad_parallelism() -> None:
    with pytest.raises(ConfigError):
        run_batch([], _backends([], [], []), RunPolicy(), parallelism=0)
