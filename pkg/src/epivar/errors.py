"""Exception types shared across the package."""


class EpivarError(Exception):
    """Base class for all package-specific errors."""


class GraphFormatError(EpivarError):
    """A contact-list or graph file failed to parse or validate."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InfeasibleEvidenceError(EpivarError):
    """Observations contradict each other: some individual has no feasible trajectory."""


class EnumerationTooLargeError(EpivarError):
    """The exact enumeration would exceed the configured cascade-count guard."""


class TrainingDivergenceError(EpivarError):
    """Training produced non-finite quantities and was aborted."""

    def __init__(self, message, diagnostics=None, checkpoint_path=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.checkpoint_path = checkpoint_path


class ConfigError(EpivarError):
    """An experiment configuration is invalid."""
