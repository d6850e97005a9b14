"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to a
stable process status without a lookup table.
"""

from __future__ import annotations


class KwScreenError(Exception):
    exit_code = 1

    def to_json(self) -> dict:
        return {"error": type(self).__name__, "message": str(self), "exit_code": self.exit_code}


class ConfigError(KwScreenError):
    exit_code = 2


class MissingFile(KwScreenError):
    exit_code = 2


class EmptyVocabulary(KwScreenError):
    exit_code = 2


class OrphanText(KwScreenError):
    pass


class DomainError(KwScreenError, ValueError):
    pass


class DimensionMismatch(KwScreenError, ValueError):
    pass


class JoinError(KwScreenError):
    pass


class DivergenceError(KwScreenError):
    pass


class NoPositives(KwScreenError, ValueError):
    pass


class InvalidLabel(KwScreenError, ValueError):
    pass


class CorruptFile(KwScreenError):
    pass


class CorruptIndex(CorruptFile):
    pass


class CorruptModel(CorruptFile):
    pass


class CorruptFeatures(CorruptFile):
    pass


class VocabMismatch(KwScreenError):
    exit_code = 3


class MissingVector(KwScreenError):
    pass


class InvariantViolation(KwScreenError):
    exit_code = 4

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)

    def to_json(self) -> dict:
        out = super().to_json()
        out["invariant"] = self.invariant
        return out
