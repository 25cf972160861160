"""Exception types shared across the package."""
from __future__ import annotations


class EmrMergeError(Exception):
    """Base class for every error raised by emrmerge."""


class CheckpointFormatError(EmrMergeError):
    """A checkpoint container is malformed."""


class AlignmentError(EmrMergeError):
    """Checkpoints (or task vectors) do not share one tensor schema."""


class BundleFormatError(EmrMergeError):
    """A bundle file is malformed, truncated or of an unsupported version."""


class FingerprintMismatch(EmrMergeError):
    """A bundle was built against a different base checkpoint."""

    def __init__(self, expected: str, actual: str) -> None:
        super().__init__(
            f"base fingerprint mismatch: bundle expects {expected}, got {actual}"
        )
        self.expected = expected
        self.actual = actual


class UnknownTaskError(EmrMergeError, KeyError):
    def __init__(self, task: str, available: list[str]) -> None:
        super().__init__(f"unknown task {task!r}; available: {', '.join(available)}")
        self.task = task
        self.available = available

    def __str__(self) -> str:
        return self.args[0]


class ConfigError(EmrMergeError):
    """Invalid job configuration or argument value."""
