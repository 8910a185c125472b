"""Exception hierarchy. Each class carries a stable CLI exit status."""


class MetricForgeError(Exception):
    exit_code = 1


class DataFormatError(MetricForgeError, ValueError):
    exit_code = 4


class DegenerateInputError(MetricForgeError, ValueError):
    exit_code = 5


class ConfigError(MetricForgeError, ValueError):
    exit_code = 2


class MissingArtifactError(MetricForgeError, FileNotFoundError):
    exit_code = 3


class NonFiniteLossError(MetricForgeError, FloatingPointError):
    exit_code = 6

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
