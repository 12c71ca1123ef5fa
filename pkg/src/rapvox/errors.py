"""Error taxonomy shared by the library and the command line tool.

Every failure a caller can act on maps to one of three exception classes,
which the CLI in turn maps to stable exit codes.
"""

from __future__ import annotations

__all__ = [
    "InvalidInputError",
    "ExternalToolError",
    "NumericalError",
    "EXIT_OK",
    "EXIT_INVALID_INPUT",
    "EXIT_EXTERNAL_TOOL",
    "EXIT_NUMERICAL",
]

EXIT_OK = 0
EXIT_INVALID_INPUT = 2
EXIT_EXTERNAL_TOOL = 3
EXIT_NUMERICAL = 4


class InvalidInputError(ValueError):
    """Malformed or inconsistent caller-supplied data (shapes, ranges, files)."""


class ExternalToolError(RuntimeError):
    """An external subprocess (vocoder, etc.) was missing or failed.

    Carries captured diagnostics so the caller can see what the tool said.
    """

    def __init__(self, message: str, *, command: str | None = None,
                 returncode: int | None = None, stderr: str | None = None):
        super().__init__(message)
        self.command = command
        self.returncode = returncode
        self.stderr = stderr

    def __str__(self) -> str:  # pragma: no cover - formatting only
        parts = [super().__str__()]
        if self.command is not None:
            parts.append(f"command: {self.command}")
        if self.returncode is not None:
            parts.append(f"returncode: {self.returncode}")
        if self.stderr:
            parts.append(f"stderr: {self.stderr.strip()}")
        return " | ".join(parts)


class NumericalError(ArithmeticError):
    """Non-finite losses, divergent training, or other numeric breakdowns."""
