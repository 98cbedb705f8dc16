"""Exception hierarchy shared by every stage of the pipeline."""

from typing import Sequence


class NamError(Exception):
    """Base class for all pipeline errors."""


class ContractError(NamError):
    """A precondition of an operation was violated (CLI exit code 2)."""


class DimensionError(ContractError):
    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int]):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class NonFiniteError(ContractError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced NaN or Inf")


class ConfigError(ContractError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class FormatError(NamError):
    """A file on disk is malformed or has an unsupported version (CLI exit code 3)."""
