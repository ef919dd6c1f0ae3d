"""Exception hierarchy shared by every stage of the flow."""


class TnnAxError(Exception):
    """Base class for all errors raised by this project."""


class ConfigurationError(TnnAxError):
    """Bad technology file, run config, or unknown gate kind."""


class ContractViolation(TnnAxError):
    """A caller broke an operation's precondition."""


class InterfaceLookupError(TnnAxError, KeyError):
    """Unsupported (converter kind, bits) pair."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class NetlistSyntaxError(TnnAxError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CycleError(TnnAxError):
    """Structural netlist text contains a combinational loop."""


class GenerationRefused(TnnAxError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class BddBudgetExceeded(TnnAxError, MemoryError):
    """BDD node store grew past the configured budget."""


class UnresolvedComponentError(TnnAxError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class MissingComponentKey(TnnAxError):
    def __init__(self, key: str):
        super().__init__(f"component library has no entry for key '{key}'")
        self.key = key


class MissingArtifactError(TnnAxError):
    def __init__(self, artifact: str, command: str):
        super().__init__(f"missing {artifact}; run `python main.py {command}` first")
        self.artifact = artifact
        self.command = command
