"""Exception types shared across the toolkit.

Every error raised on a domain-level contract violation derives from
:class:`SceneDistillError`, so callers (and the CLI) can distinguish domain
failures (exit code 1) from usage errors and genuine bugs.
"""

from __future__ import annotations


class SceneDistillError(Exception):
    """Base class for all domain errors raised by this package."""


class DimensionError(SceneDistillError):
    """Tensor or array shapes do not satisfy an operation's contract."""


class ConfigError(SceneDistillError):
    """A configuration value is outside its legal range."""


class ContractError(SceneDistillError):
    """An API precondition was violated (wrong call sequence, missing state)."""


class NumericsError(SceneDistillError):
    """A non-finite value (NaN/Inf) appeared; the step is aborted."""


class DegenerateInputError(SceneDistillError):
    """Input data is too degenerate to estimate from (collinear, empty mask)."""


class AlignmentError(SceneDistillError):
    """Global alignment cannot proceed (e.g. disconnected scene graph)."""


class LoadError(SceneDistillError):
    """A file is missing, truncated, or structurally invalid."""


class GenerationError(SceneDistillError):
    """Synthetic scene generation was asked for an impossible configuration."""
