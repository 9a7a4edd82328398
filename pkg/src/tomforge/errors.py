"""Exception hierarchy shared across the package.

Every error raised on purpose by tomforge derives from TomforgeError so CLI
and service layers can map them to exit codes / HTTP statuses uniformly.
"""

from __future__ import annotations


class TomforgeError(Exception):
    """Base class for all tomforge errors."""

    #: short machine-readable identifier used in error JSON
    code = "error"

    def payload(self) -> dict:
        return {"type": self.code, "message": str(self)}


# --- chain model ---------------------------------------------------------

class UnknownEmotion(TomforgeError):
    code = "unknown-emotion"


class InvariantViolation(TomforgeError):
    """A node or chain failed its structural invariants."""

    code = "invariant-violation"

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report

    def payload(self) -> dict:
        data = super().payload()
        if self.report is not None:
            data["violations"] = [list(v) for v in self.report.violations]
        return data


# --- graph store ---------------------------------------------------------

class UnknownSituation(TomforgeError):
    code = "unknown-situation"


class EmptyGraph(TomforgeError):
    code = "empty-graph"


class DomainError(TomforgeError):
    code = "domain-error"


class FormatError(TomforgeError):
    """Malformed persisted data; carries the offending line number."""

    code = "format-error"

    def __init__(self, message: str, path: str = "", line: int = 0):
        super().__init__(f"{path}:{line}: {message}" if path else message)
        self.path = path
        self.line = line


# --- prompt builder ------------------------------------------------------

class MissingField(TomforgeError):
    code = "missing-field"


class InvalidFieldText(TomforgeError):
    """Field text may not contain '[' or ']' (reserved for control tokens)."""

    code = "invalid-field-text"


class MalformedEncoding(TomforgeError):
    code = "malformed-encoding"


# --- llm backend ---------------------------------------------------------

class BackendError(TomforgeError):
    code = "backend-error"


class TransportError(BackendError):
    code = "transport"


class RateLimited(BackendError):
    code = "rate-limited"


class BadResponse(BackendError):
    code = "bad-response"


class EmptyCompletion(BackendError):
    code = "empty-completion"


class EmptyLexicon(BackendError):
    code = "empty-lexicon"


# --- curation ------------------------------------------------------------

class CurationError(TomforgeError):
    code = "curation-error"


class UnknownItem(CurationError):
    code = "unknown-item"


class UnknownAnnotator(CurationError):
    code = "unknown-annotator"


class StaleClaim(CurationError):
    code = "stale-claim"


class NotFlagged(CurationError):
    code = "not-flagged"


class RoleDenied(CurationError):
    code = "role-denied"


class LabelPolarityMismatch(CurationError):
    code = "label-polarity-mismatch"


class PendingItemsRemain(CurationError):
    code = "pending-items-remain"


class DecisionInvalid(CurationError):
    """Decision payload failed validation (e.g. empty revise text)."""

    code = "decision-invalid"


# --- task builder --------------------------------------------------------

class UnfinalizedGraph(TomforgeError):
    code = "unfinalized-graph"


class TooFewSituations(TomforgeError):
    code = "too-few-situations"


# --- inference -----------------------------------------------------------

class StageFailure(TomforgeError):
    code = "stage-failure"

    def __init__(self, stage: str, cause: Exception | str):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class EmotionUnresolvable(TomforgeError):
    code = "emotion-unresolvable"


# --- evaluation ----------------------------------------------------------

class EmptyCandidate(TomforgeError):
    code = "empty-candidate"


class EmptyInput(TomforgeError):
    code = "empty-input"


class EmptyList(TomforgeError):
    code = "empty-list"


class LengthMismatch(TomforgeError):
    code = "length-mismatch"


class AlignmentError(TomforgeError):
    code = "alignment-error"


# --- esc augmentation ----------------------------------------------------

class NoUserTurn(TomforgeError):
    code = "no-user-turn"


# --- cli / config --------------------------------------------------------

class ConfigError(TomforgeError):
    code = "config-error"
