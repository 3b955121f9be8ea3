"""Exception types shared across the package.

Every domain error carries a short ``code`` (the class name) so the CLI can
print ``ERROR <code>: <message>`` without a lookup table.
"""

from __future__ import annotations


class ActPromptError(Exception):
    """Base class for all domain errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# embedding data
class ZeroNormRow(ActPromptError):
    def __init__(self, index: int):
        super().__init__(f"row {index} has (near) zero L2 norm")
        self.index = index


class ZeroNorm(ActPromptError):
    pass


class NotNormalized(ActPromptError):
    pass


class EmptyMatrix(ActPromptError):
    pass


class EmptyInput(ActPromptError):
    pass


class DimMismatch(ActPromptError):
    pass


class BadMagic(ActPromptError):
    pass


class FormatError(ActPromptError):
    pass


class ShapeMismatch(ActPromptError):
    pass


class TruncatedFile(ActPromptError):
    pass


class NonFiniteValue(ActPromptError):
    pass


class ChecksumMismatch(ActPromptError):
    pass


class ManifestError(ActPromptError):
    pass


class IoError(ActPromptError):
    pass


# transport
class HttpError(ActPromptError):
    def __init__(self, status: int | None, message: str = ""):
        label = f"HTTP {status}" if status is not None else "transport failure"
        super().__init__(f"{label}: {message}" if message else label)
        self.status = status


class AuthError(HttpError):
    pass


class SchemaError(ActPromptError):
    pass


# prompt generation
class MissingAttribute(ActPromptError):
    def __init__(self, name: str):
        super().__init__(f"reply has no entry for attribute {name!r}")
        self.name = name


class MalformedJson(ActPromptError):
    pass


class EmptyAfterProcessing(ActPromptError):
    pass


class GenerationIncomplete(ActPromptError):
    """Raised when some (action, template) pairs could not be generated.

    ``failures`` lists ``(action, template_id, reason)`` triples and
    ``partial`` holds the bank assembled from the pairs that did succeed.
    """

    def __init__(self, failures, partial=None):
        names = ", ".join(f"{a!r}/t{t}" for a, t, _ in failures)
        super().__init__(f"{len(failures)} pair(s) failed: {names}")
        self.failures = list(failures)
        self.partial = partial


# scoring / inference
class EmptyCategory(ActPromptError):
    def __init__(self, index: int):
        super().__init__(f"category {index} has no prompts")
        self.index = index


class EmptyBank(ActPromptError):
    pass


class EmptyAfterFilter(ActPromptError):
    pass


class NotCaptured(ActPromptError):
    pass


# training / evaluation
class UnknownLabel(ActPromptError):
    pass


class NonFiniteLoss(ActPromptError):
    pass


class NonPositive(ActPromptError):
    pass


class MissingLabel(ActPromptError):
    pass


class BadParams(ActPromptError):
    pass


class ConfigError(ActPromptError):
    pass


class InsufficientSamples(UserWarning):
    """Warning: a class has fewer videos than requested; all are used."""
