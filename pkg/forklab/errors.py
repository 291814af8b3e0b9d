"""Exception hierarchy shared by every forklab module."""


class ForklabError(Exception):
    pass


class ValidationError(ForklabError, ValueError):
    pass


class ChainError(ValidationError):
    pass


class CycleDetected(ChainError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"Dependency cycle detected at variable '{name}'")


class UndefinedVariable(ChainError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"Variable '{name}' is used but never defined")


class UnreachableTarget(ChainError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"Target '{name}' is not reachable from the root literal")


class AlphabetExhausted(ValidationError):
    pass


class PromptParseError(ValidationError):
    pass


class RecordError(ValidationError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}: line {line_no}: {message}")


class InsufficientSamples(ValidationError):
    pass


class CapabilityMissing(ForklabError):
    pass


class BackendError(ForklabError):
    pass


class ArtifactIOError(ForklabError, OSError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class TrainingDiverged(ForklabError):
    pass
