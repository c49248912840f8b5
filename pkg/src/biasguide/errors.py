"""Exception hierarchy shared by every stage of the pipeline."""


class BiasGuideError(Exception):
    """Base class; ``category`` is what the CLI prints before the message."""

    category = "error"


class ConfigError(BiasGuideError, ValueError):
    category = "config"


class InputError(BiasGuideError, ValueError):
    category = "input"


class ContractError(BiasGuideError, RuntimeError):
    """A documented precondition of an operation was violated by the caller."""

    category = "contract"


class FormatError(BiasGuideError, ValueError):
    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(ConfigError):
    category = "schema"

    def __init__(self, message, key_path=None):
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)
        self.key_path = key_path


class PreconditionError(BiasGuideError, RuntimeError):
    """An upstream pipeline stage has not been run."""

    category = "precondition"

    def __init__(self, stage, message=None):
        super().__init__(message or f"stage '{stage}' has not completed; run it first")
        self.stage = stage


class TrainingError(BiasGuideError, RuntimeError):
    """Non-finite loss during training; ``dossier`` holds the step state."""

    category = "training"

    def __init__(self, message, dossier=None):
        super().__init__(message)
        self.dossier = dossier or {}
