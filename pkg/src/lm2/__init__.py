"""Decompose-solve-verify orchestration for multi-step reasoning.

Three model roles cooperate on each question: a decomposer proposes
subquestions one at a time, a solver answers them, and a verifier grades
each subanswer into mistake classes that can trigger regeneration. Every
episode leaves a complete trace for evaluation, replay, and reward
export.
"""

from lm2.backends import (
    Backend,
    BackendDescriptor,
    Generation,
    GenerationParams,
    RecordingBackend,
    ReplayBackend,
    ReplayCache,
    RetryPolicy,
    ScenarioRule,
    ScenarioScript,
    ScriptedBackend,
    build_backend,
    estimate_tokens,
)
from lm2.config import RunConfig
from lm2.core import (
    AnswerKind,
    Concepts,
    EpisodeTrace,
    FinalAnswer,
    InitialCot,
    MistakeClass,
    ModelCall,
    Question,
    ReasoningContext,
    Step,
    StepReward,
    SubAnswer,
    SubQuestion,
    VerifierVerdict,
    append_accepted,
)
from lm2.curate import (
    CurationResult,
    DecomposerRecord,
    VerifierRecord,
    curate_decomposer,
    curate_verifier,
)
from lm2.evaluation import (
    EvalReport,
    build_report,
    convert_math,
    convert_medqa,
    extract_answer,
    load_dataset,
    score,
)
from lm2.orchestrator import BatchSummary, RunPolicy, run_batch, run_episode
from lm2.reward import RewardParams, episode_rewards, export_reward_dataset, step_reward
from lm2.templates import (
    DONE_MARKER,
    PromptTemplate,
    TemplateSet,
    build_final_prompt,
    build_next_subquestion_prompt,
    build_solver_prompt,
    build_verifier_prompt,
    has_done_marker,
    parse_feedback_tags,
    parse_question_tags,
    parse_subanswer_tag,
)
from lm2.verifier import TRIGGER_CLASSES, classify, is_regeneration_trigger

__version__ = "0.1.0"

__all__ = [
    "AnswerKind",
    "Backend",
    "BackendDescriptor",
    "BatchSummary",
    "Concepts",
    "CurationResult",
    "DecomposerRecord",
    "DONE_MARKER",
    "EpisodeTrace",
    "EvalReport",
    "FinalAnswer",
    "Generation",
    "GenerationParams",
    "InitialCot",
    "MistakeClass",
    "ModelCall",
    "PromptTemplate",
    "Question",
    "ReasoningContext",
    "RecordingBackend",
    "ReplayBackend",
    "ReplayCache",
    "RetryPolicy",
    "RewardParams",
    "RunConfig",
    "RunPolicy",
    "ScenarioRule",
    "ScenarioScript",
    "ScriptedBackend",
    "Step",
    "StepReward",
    "SubAnswer",
    "SubQuestion",
    "TRIGGER_CLASSES",
    "TemplateSet",
    "VerifierRecord",
    "VerifierVerdict",
    "append_accepted",
    "build_backend",
    "build_final_prompt",
    "build_next_subquestion_prompt",
    "build_report",
    "build_solver_prompt",
    "build_verifier_prompt",
    "classify",
    "convert_math",
    "convert_medqa",
    "curate_decomposer",
    "curate_verifier",
    "episode_rewards",
    "estimate_tokens",
    "export_reward_dataset",
    "extract_answer",
    "has_done_marker",
    "is_regeneration_trigger",
    "load_dataset",
    "parse_feedback_tags",
    "parse_question_tags",
    "parse_subanswer_tag",
    "run_batch",
    "run_episode",
    "score",
    "step_reward",
]
