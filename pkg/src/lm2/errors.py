"""Exception taxonomy shared by every module in the package.

All engine errors derive from Lm2Error so callers can catch the whole
family with one clause. Errors that a retry loop may safely repeat carry
``retryable = True``.
"""

from __future__ import annotations


class Lm2Error(Exception):
    """Base class for every error raised by this package."""

    retryable = False


class IndexMismatchError(Lm2Error):
    """A step was appended at an index other than the accepted count."""


class TemplateError(Lm2Error):
    """A prompt template could not be loaded or rendered."""


class UnbalancedTag(Lm2Error):
    """A tagged payload opened a parenthesis group that never closes."""


class MalformedVerdict(Lm2Error):
    """Verifier output had no parseable feedback tag content."""


class IncoherentVerdict(Lm2Error):
    """A verdict combined the no-mistake class with mistake classes."""


class BackendError(Lm2Error):
    """Base class for model-backend failures."""


class RateLimited(BackendError):
    """The provider asked us to slow down (HTTP 429 or equivalent)."""

    retryable = True


class TransportError(BackendError):
    """The request never completed (timeout, connection loss, 5xx)."""

    retryable = True


class ProviderRejected(BackendError):
    """The provider refused the request outright (non-retryable 4xx)."""


class ScenarioMiss(BackendError):
    """No scripted rule matched a generation request."""


class MissWithoutFallback(BackendError):
    """A replay cache had no record for a call and no fallback backend."""


class BudgetExceeded(Lm2Error):
    """The per-episode token budget was exhausted."""


class RunCancelled(Lm2Error):
    """The run was cancelled (signal or caller request) mid-episode."""


class ParseDeadlock(Lm2Error):
    """The decomposer failed to produce a usable tag twice in a row."""


class MissingVerdict(Lm2Error):
    """Reward computation reached a step that carries no verdict."""


class SchemaError(Lm2Error):
    """A dataset, config, or trace file violated its schema."""


class UnknownQuestionId(Lm2Error):
    """A trace referenced a question id absent from the dataset."""


class ConfigError(Lm2Error):
    """A run configuration file was invalid or incomplete."""
