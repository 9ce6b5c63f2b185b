# utils/errors.py

from typing import Optional


class FSLabError(Exception):
    """Base class for every error raised by the fslab modules"""

    kind = "fslab-error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class InvalidArgumentError(FSLabError, ValueError):
    kind = "invalid-argument"


class OverflowAlphabetError(FSLabError):
    kind = "overflow-alphabet"


class ResourceLimitError(FSLabError):
    kind = "resource-limit"


class InsufficientSampleError(FSLabError):
    """
    Raised when a sample is too short for the integer coupling machinery.

    Args:
        message: Human readable description
        condition: Which inequality failed ('approximation' or 'N_large')
        stage: Pipeline stage index, when raised inside the self-joining pipeline
    """

    kind = "insufficient-sample"

    def __init__(self, message: str, condition: str, stage: Optional[int] = None):
        super().__init__(message)
        self.condition = condition
        self.stage = stage

    def to_dict(self) -> dict:
        payload = super().to_dict()
        payload["condition"] = self.condition
        if self.stage is not None:
            payload["stage"] = self.stage
        return payload


class InvalidTowerError(FSLabError):
    kind = "invalid-tower"

    def __init__(self, message: str, stage: Optional[int] = None):
        super().__init__(message)
        self.stage = stage

    def to_dict(self) -> dict:
        payload = super().to_dict()
        if self.stage is not None:
            payload["stage"] = self.stage
        return payload


class ConfigError(FSLabError):
    kind = "config-error"

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field

    def to_dict(self) -> dict:
        payload = super().to_dict()
        payload["field"] = self.field
        return payload


class CacheError(FSLabError):
    kind = "cache-error"
