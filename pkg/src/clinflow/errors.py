"""Exception types shared across the package.

The CLI maps these onto stable exit codes: validation problems exit 1,
artifact I/O problems exit 2, backend failures exit 3.
"""

from __future__ import annotations


class ClinFlowError(Exception):
    """Base class for all errors raised by this package."""


class CaseValidationError(ClinFlowError):
    """A case document, manifest, or vocabulary constraint was violated."""


class NotInVocabulary(ClinFlowError):
    """Free text could not be matched to any label of a closed vocabulary."""

    def __init__(self, text: str, category: str, suggestions: tuple[str, ...] = ()):
        self.text = text
        self.category = category
        self.suggestions = suggestions
        hint = f" (closest entries: {', '.join(suggestions)})" if suggestions else ""
        super().__init__(f"no {category} vocabulary match for {text!r}{hint}")


class ConfigurationError(ClinFlowError):
    """Invalid or inconsistent run configuration."""


class StorageError(ClinFlowError):
    """Reading or writing an artifact file failed."""


class DimensionMismatch(ClinFlowError):
    """An embedding dimension disagrees with the store dimension."""


class EncodeError(ClinFlowError):
    """A case could not be encoded into a retrieval record."""


class BackendError(ClinFlowError):
    """Base class for model backend failures."""


class TransportError(BackendError):
    """All transport attempts to a remote provider were exhausted."""


class ScriptMiss(BackendError):
    """The scripted provider had no reply registered for a request."""

    def __init__(self, tag: str, fingerprint: str):
        self.tag = tag
        self.fingerprint = fingerprint
        super().__init__(f"no scripted reply for tag={tag!r} fingerprint={fingerprint!r}")
