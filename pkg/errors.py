"""
Exception hierarchy shared by the numerical modules and the CLI.

Every error derives from ChaoskitError and from the builtin that best describes
it, so callers can catch either.
"""
from typing import List, Optional

import numpy as np


class ChaoskitError(Exception):
    """Base class for all toolkit errors."""

    module = "chaoskit"


class InvalidMeasureError(ChaoskitError, ValueError):
    """A probability measure is not normalized, has negative mass or NaN atoms."""

    module = "transport"


class RegimeError(ChaoskitError, ValueError):
    """Parameters fall outside the regime where a computation is defined."""

    module = "model"


class IntegrationBlowUpError(ChaoskitError, FloatingPointError):
    """Euler-Maruyama produced a non-finite position."""

    module = "particles"

    def __init__(self, particle: int, time: float, dt: float):
        self.particle = particle
        self.time = time
        self.dt = dt
        super().__init__(
            f"non-finite position for particle {particle} at t={time:.6g}; "
            f"retry with a smaller time step (e.g. dt={dt / 2:.3g})"
        )


class StabilityError(ChaoskitError, ValueError):
    """Explicit finite-volume step violates the CFL bound."""

    module = "limit"

    def __init__(self, dt: float, admissible_dt: float):
        self.dt = dt
        self.admissible_dt = admissible_dt
        super().__init__(f"dt={dt:.6g} exceeds the stability bound; use dt <= {admissible_dt:.6g}")


class PositivityError(ChaoskitError, ValueError):
    """Finite-volume step produced a negative density."""

    module = "limit"


class DivergenceError(ChaoskitError, RuntimeError):
    """Self-consistent iteration did not reach tolerance."""

    module = "limit"

    def __init__(self, message: str, residuals: Optional[List[float]] = None):
        self.residuals = list(residuals or [])
        super().__init__(message)


class SupportError(ChaoskitError, ValueError):
    """CDF inversion is degenerate (empty or flat support)."""

    module = "transport"


class ProblemSizeError(ChaoskitError, ValueError):
    """Exact OT problem exceeds the configured plan-entry cap."""

    module = "transport"


class SymmetryError(ChaoskitError, ValueError):
    """Measure is not invariant under block permutations."""

    module = "transport"


class NotPositiveDefiniteError(ChaoskitError, np.linalg.LinAlgError):
    """Cholesky factorization failed."""

    module = "linalg"


class ConfigError(ChaoskitError, ValueError):
    """Configuration file cannot be parsed or validated."""

    module = "config"

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
