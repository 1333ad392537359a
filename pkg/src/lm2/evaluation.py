"""Dataset loading, answer extraction and scoring, and run reports.

The native dataset format is ``lm2_jsonl``: one JSON object per line with
id, body, answer_kind, and optional gold material. Converters are
provided for the common math benchmark layout (directory of per-problem
JSON files) and the medical-QA JSONL export.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Final, Iterable, Sequence

from lm2.core import AnswerKind, EpisodeTrace, Question, dumps_canonical
from lm2.errors import SchemaError, UnknownQuestionId

logger = logging.getLogger(__name__)

REPORT_VERSION: Final = "lm2-report/1"
DATASET_FORMAT: Final = "lm2_jsonl"

_RECORD_KEYS: Final = frozenset(
    {"id", "body", "subject_tag", "answer_kind", "options", "gold_answer", "gold_solution"}
)


def _record_to_question(data: dict[str, Any], where: str) -> Question:
    unknown = data.keys() - _RECORD_KEYS
    if unknown:
        raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
    missing = {"id", "body", "answer_kind"} - data.keys()
    if missing:
        raise SchemaError(f"{where}: missing keys {sorted(missing)}")
    kind_name = data["answer_kind"]
    options = data.get("options")
    if kind_name in ("mcq_single", "mcq_multi"):
        if not isinstance(options, dict) or len(options) < 2:
            raise SchemaError(f"{where}: {kind_name} needs an options map with >= 2 entries")
        kind = AnswerKind(kind_name, tuple(sorted(options)))
    else:
        if options:
            raise SchemaError(f"{where}: options given for non-mcq kind {kind_name}")
        kind = AnswerKind(kind_name)
    try:
        return Question(
            id=str(data["id"]),
            body=data["body"],
            subject_tag=data.get("subject_tag", ""),
            answer_kind=kind,
            gold_answer=data.get("gold_answer"),
            gold_solution=data.get("gold_solution"),
        )
    except SchemaError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def load_dataset(path: str | Path, *, format: str = DATASET_FORMAT) -> list[Question]:
    """Load a dataset file, rejecting the first schema violation by line."""
    if format != DATASET_FORMAT:
        raise SchemaError(f"unsupported dataset format: {format!r}")
    source = Path(path)
    if not source.exists():
        raise SchemaError(f"dataset not found: {source}")
    questions: list[Question] = []
    seen: set[str] = set()
    for lineno, line in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{where}: not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise SchemaError(f"{where}: expected a JSON object")
        question = _record_to_question(data, where)
        if question.id in seen:
            raise SchemaError(f"{where}: duplicate question id {question.id!r}")
        seen.add(question.id)
        questions.append(question)
    return questions


def write_dataset(records: Iterable[dict[str, Any]], path: str | Path) -> int:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with target.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count


# --- answer extraction ---

_BOXED_OPEN_RE = re.compile(r"\\boxed\s*\{")
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def _boxed_payloads(text: str) -> list[str]:
    """Every brace-balanced \\boxed{...} payload, in order."""
    payloads: list[str] = []
    for match in _BOXED_OPEN_RE.finditer(text):
        depth = 1
        start = match.end()
        for i in range(start, len(text)):
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
                if depth == 0:
                    payloads.append(text[start:i])
                    break
    return payloads


def _standalone_letters(text: str, options: tuple[str, ...]) -> list[str]:
    """Occurrences of option labels not embedded in a longer word/number."""
    alternatives = "|".join(re.escape(o) for o in sorted(options, key=len, reverse=True))
    pattern = re.compile(rf"(?<![A-Za-z0-9])({alternatives})(?![A-Za-z0-9])")
    return [m.group(1) for m in pattern.finditer(text)]


def extract_answer(text: str, kind: AnswerKind) -> str | None:
    """Pull the final answer out of free-form model text, or None.

    boxed_free_form: the last balanced \\boxed payload. mcq_single: the
    last standalone option letter. mcq_multi: every standalone option
    letter, normalized to a sorted comma-joined string. integer/numeric:
    the last integer/decimal literal.
    """
    if kind.kind == "boxed_free_form":
        payloads = _boxed_payloads(text)
        return payloads[-1].strip() if payloads else None
    if kind.kind == "mcq_single":
        letters = _standalone_letters(text, kind.options)
        return letters[-1] if letters else None
    if kind.kind == "mcq_multi":
        letters = _standalone_letters(text, kind.options)
        return ",".join(sorted(set(letters))) if letters else None
    tokens = _NUMBER_RE.findall(text)
    if kind.kind == "integer":
        integers = [t for t in tokens if "." not in t]
        return integers[-1] if integers else None
    return tokens[-1] if tokens else None


# --- scoring ---

_FRAC_RE = re.compile(r"\\[dt]?frac\{([^{}]*)\}\{([^{}]*)\}")


def _to_float(value: str) -> float:
    cleaned = value.strip().strip("$").replace(",", "").rstrip(".")
    if "/" in cleaned:
        num, _, den = cleaned.partition("/")
        return float(num) / float(den)
    return float(cleaned)


def _strip_outer_braces(value: str) -> str:
    while len(value) >= 2 and value[0] == "{" and value[-1] == "}":
        depth = 0
        for i, ch in enumerate(value):
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0 and i != len(value) - 1:
                    return value
        value = value[1:-1]
    return value


def normalize_boxed(value: str) -> str:
    """Canonical form for boxed payload comparison."""
    out = re.sub(r"\s+", "", value).strip("$")
    while True:
        replaced = _FRAC_RE.sub(r"\1/\2", out)
        if replaced == out:
            break
        out = replaced
    return _strip_outer_braces(out)


def _letter_set(value: str) -> frozenset[str]:
    return frozenset(part.strip() for part in value.split(",") if part.strip())


def score(predicted: str | None, gold: str, kind: AnswerKind) -> bool:
    """Whether an extracted answer matches the gold answer for its kind."""
    if predicted is None:
        return False
    if kind.kind == "mcq_single":
        return predicted.strip().upper() == gold.strip().upper()
    if kind.kind == "mcq_multi":
        return _letter_set(predicted.upper()) == _letter_set(gold.upper())
    if kind.kind == "boxed_free_form":
        return normalize_boxed(predicted) == normalize_boxed(gold)
    if kind.kind == "integer":
        try:
            return int(predicted.strip().rstrip(".")) == int(gold.strip())
        except ValueError:
            return False
    try:
        p = _to_float(predicted)
        g = _to_float(gold)
    except (ValueError, ZeroDivisionError):
        return False
    return abs(p - g) <= max(1e-2, 1e-2 * abs(g))


# --- reporting ---


@dataclass
class SubjectStats:
    episodes: int = 0
    correct: int = 0
    aborted: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.episodes if self.episodes else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "episodes": self.episodes,
            "correct": self.correct,
            "aborted": self.aborted,
            "accuracy": self.accuracy,
        }


@dataclass
class EvalReport:
    """Accuracy and token accounting over a set of traces."""

    episodes: int = 0
    completed: int = 0
    aborted: int = 0
    correct: int = 0
    per_subject: dict[str, SubjectStats] = field(default_factory=dict)
    solver_tokens_out_total: int = 0
    tokens_by_phase: dict[str, int] = field(
        default_factory=lambda: {"initial_cot": 0, "decomposition": 0, "final_answer": 0}
    )

    @property
    def overall_accuracy(self) -> float:
        return self.correct / self.episodes if self.episodes else 0.0

    @property
    def solver_tokens_out_mean(self) -> float:
        return self.solver_tokens_out_total / self.episodes if self.episodes else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": REPORT_VERSION,
            "episodes": self.episodes,
            "completed": self.completed,
            "aborted": self.aborted,
            "correct": self.correct,
            "overall_accuracy": self.overall_accuracy,
            "per_subject": {tag: s.to_dict() for tag, s in sorted(self.per_subject.items())},
            "tokens": {
                "solver_out_total": self.solver_tokens_out_total,
                "solver_out_mean_per_episode": self.solver_tokens_out_mean,
                "by_phase": dict(self.tokens_by_phase),
            },
        }

    def save(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(dumps_canonical(self.to_dict()) + "\n", encoding="utf-8")
        return target

    def render_table(self) -> str:
        rows = [("subject", "episodes", "correct", "accuracy", "aborted")]
        for tag, stats in sorted(self.per_subject.items()):
            rows.append(
                (
                    tag or "(untagged)",
                    str(stats.episodes),
                    str(stats.correct),
                    f"{stats.accuracy:.3f}",
                    str(stats.aborted),
                )
            )
        rows.append(
            (
                "overall",
                str(self.episodes),
                str(self.correct),
                f"{self.overall_accuracy:.3f}",
                str(self.aborted),
            )
        )
        widths = [max(len(row[i]) for row in rows) for i in range(5)]
        lines = []
        for idx, row in enumerate(rows):
            lines.append(
                "  ".join(
                    cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                    for i, cell in enumerate(row)
                )
            )
            if idx == 0 or idx == len(rows) - 2:
                lines.append("  ".join("-" * w for w in widths))
        mean = f"{self.solver_tokens_out_mean:.1f}"
        lines.append("")
        lines.append(
            f"solver tokens out: total={self.solver_tokens_out_total} "
            f"mean/episode={mean} "
            f"(initial_cot={self.tokens_by_phase['initial_cot']}, "
            f"decomposition={self.tokens_by_phase['decomposition']}, "
            f"final_answer={self.tokens_by_phase['final_answer']})"
        )
        return "\n".join(lines)


_PHASE_BY_PURPOSE: Final = {
    "initial_cot": "initial_cot",
    "subanswer": "decomposition",
    "final_answer": "final_answer",
}


def build_report(traces: Sequence[EpisodeTrace], dataset: Sequence[Question]) -> EvalReport:
    """Score every trace against its dataset question and tally tokens.

    Aborted episodes count as incorrect and are also tallied separately.
    A trace whose question id is not in the dataset is an error.
    """
    by_id = {q.id: q for q in dataset}
    report = EvalReport()
    for trace in traces:
        question = by_id.get(trace.question_id)
        if question is None:
            raise UnknownQuestionId(f"trace references unknown question {trace.question_id!r}")
        if question.gold_answer is None:
            raise SchemaError(f"question {question.id} has no gold answer to score against")
        report.episodes += 1
        stats = report.per_subject.setdefault(question.subject_tag, SubjectStats())
        stats.episodes += 1
        aborted = trace.status != "completed"
        predicted = trace.final_answer.extracted if trace.final_answer else None
        correct = not aborted and score(predicted, question.gold_answer, question.answer_kind)
        if aborted:
            report.aborted += 1
            stats.aborted += 1
        else:
            report.completed += 1
        if correct:
            report.correct += 1
            stats.correct += 1
        for call in trace.model_calls:
            if call.role != "solver":
                continue
            report.solver_tokens_out_total += call.tokens_out
            phase = _PHASE_BY_PURPOSE.get(call.purpose)
            if phase is not None:
                report.tokens_by_phase[phase] += call.tokens_out
    return report


# --- converters ---


def convert_math(in_dir: str | Path, out_path: str | Path) -> int:
    """Convert a directory tree of per-problem JSON files to lm2_jsonl.

    Each file holds problem/type/solution; the gold answer is the last
    boxed payload in the solution. Files without one are skipped.
    """
    root = Path(in_dir)
    if not root.is_dir():
        raise SchemaError(f"not a directory: {root}")
    records: list[dict[str, Any]] = []
    skipped = 0
    for path in sorted(root.rglob("*.json")):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            problem = data["problem"]
            solution = data["solution"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped += 1
            continue
        gold = extract_answer(solution, AnswerKind.boxed())
        if gold is None:
            logger.warning("skipping %s: solution has no boxed answer", path)
            skipped += 1
            continue
        rel = path.relative_to(root).with_suffix("")
        records.append(
            {
                "id": "-".join(rel.parts),
                "body": problem,
                "subject_tag": f"math:{data.get('type', 'unknown')}",
                "answer_kind": "boxed_free_form",
                "gold_answer": gold,
                "gold_solution": solution,
            }
        )
    count = write_dataset(records, out_path)
    if skipped:
        logger.warning("convert_math: skipped %d files", skipped)
    return count


def convert_medqa(in_path: str | Path, out_path: str | Path) -> int:
    """Convert the medical-QA JSONL export (question/options/answer_idx)."""
    source = Path(in_path)
    if not source.exists():
        raise SchemaError(f"file not found: {source}")
    records: list[dict[str, Any]] = []
    for lineno, line in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            data = json.loads(line)
            question = data["question"]
            options = data["options"]
            answer_idx = data["answer_idx"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        if answer_idx not in options:
            raise SchemaError(f"{where}: answer_idx {answer_idx!r} not among options")
        body_lines = [question.strip(), ""]
        body_lines.extend(f"{label}. {options[label]}" for label in sorted(options))
        meta = data.get("meta_info")
        records.append(
            {
                "id": f"medqa-{lineno:05d}",
                "body": "\n".join(body_lines),
                "subject_tag": f"medqa:{meta}" if meta else "medqa",
                "answer_kind": "mcq_single",
                "options": {label: options[label] for label in sorted(options)},
                "gold_answer": answer_idx,
            }
        )
    return write_dataset(records, out_path)
