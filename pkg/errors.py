#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""Exception hierarchy shared by the ISFL workbench modules."""


class IsflError(Exception):
    """Base class for every error raised by the workbench."""


class ShapeMismatchError(IsflError, ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, left, right, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NumericOverflowError(IsflError, ArithmeticError):
    """A forward operation produced NaN or Inf from finite inputs."""


class AttentionMaskError(IsflError, ValueError):
    """An example has no unmasked position to attend to."""


class DataValidationError(IsflError, ValueError):
    """Dataset contents or split preconditions are invalid."""


class ConfigValidationError(IsflError, ValueError):
    """Experiment configuration failed validation.

    `problems` holds (field_path, message) pairs.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"{path}: {msg}" for path, msg in self.problems]
        super().__init__("invalid configuration:\n" + "\n".join(lines))


class CheckpointError(IsflError):
    """Checkpoint file is missing, truncated or malformed."""


class CheckpointMismatchError(CheckpointError, ValueError):
    """Checkpoint parameters do not match the configuration they are loaded into."""


class NonFiniteGradientError(IsflError, ArithmeticError):
    """An optimizer step received NaN or Inf gradients."""

    def __init__(self, parameter_name: str):
        self.parameter_name = parameter_name
        super().__init__(f"non-finite gradient for parameter '{parameter_name}'; step aborted")


class MetricInputError(IsflError, ValueError):
    """Metric received an empty or otherwise unusable record set."""


class FusionModeError(IsflError, ValueError):
    """Fusion/head mode and the presence of aux features disagree."""
