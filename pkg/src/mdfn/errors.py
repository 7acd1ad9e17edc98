"""Exception hierarchy shared by every mdfn module."""


class MdfnError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class ConfigError(MdfnError):
    pass


class ShapeError(MdfnError, ValueError):
    pass


class DegenerateRow(MdfnError):
    pass


class StaleGraph(MdfnError):
    pass


class AssemblyError(MdfnError):
    pass


class EmptyContext(AssemblyError):
    pass


class EmptyCandidate(AssemblyError):
    pass


class OverlongSequence(MdfnError):
    pass


class HeaderMismatch(MdfnError):
    pass


class SchemaError(MdfnError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MetricError(MdfnError):
    pass


class CheckpointError(MdfnError):
    pass


class NaNGradient(MdfnError):
    pass
