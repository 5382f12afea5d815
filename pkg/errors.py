"""
Error types for mkvlab
Every error knows the process exit code the CLI reports for it
"""

from typing import Any, Dict, Optional, Sequence


class MkvlabError(Exception):
    """Base class for every error raised by the laboratory"""

    exit_code = 3

    def to_record(self) -> Dict[str, Any]:
        """Structured record written into a run manifest"""
        return {
            'type': type(self).__name__,
            'message': str(self),
            'exit_code': self.exit_code,
        }


# ==========================================
# CONFIGURATION / INPUT ERRORS (exit 2)
# ==========================================

class ConfigError(MkvlabError):
    """Run configuration failed schema validation"""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        location = ''
        if key is not None:
            location = f" [key '{key}'" + (f", line {line}]" if line is not None else ']')
        super().__init__(message + location)
        self.key = key
        self.line = line


class ParameterError(MkvlabError):
    """Invalid numeric parameter for a family, kernel, or exponent triple"""

    exit_code = 2


class ShapeError(MkvlabError):
    """Inputs that must share a grid, mesh, or size do not"""

    exit_code = 2


class RangeError(MkvlabError):
    """Time or index outside the admissible range"""

    exit_code = 2


# ==========================================
# NUMERIC FAILURES (exit 3)
# ==========================================

class NumericError(MkvlabError):
    exit_code = 3


class SingularityError(NumericError):
    """Kernel evaluated exactly at its singularity without regularization"""


class CollisionError(NumericError):
    """Two particles became bit-equal while the kernel is unregularized"""

    def __init__(self, message: str, step: int, pair: Sequence[int]):
        super().__init__(f"{message} (step {step}, particles {tuple(pair)})")
        self.step = step
        self.pair = tuple(pair)


class NumericOverflowError(NumericError):
    """A state became non-finite"""

    def __init__(self, t: float, x: Any):
        super().__init__(f"Non-finite state at t={t!r}: {x!r}")
        self.t = t
        self.x = x


class CoverageError(NumericError):
    """Sample points fall outside the grid region a KDE can represent"""

    def __init__(self, message: str, points: Any):
        shown = [tuple(float(c) for c in p) for p in list(points)[:10]]
        super().__init__(f"{message}; offending points (first 10): {shown}")
        self.points = points


class ConvergenceError(NumericError):
    """Iterative solver stopped before reaching its tolerance"""

    def __init__(self, message: str, lower: float, upper: float, iterations: int):
        super().__init__(
            f"{message} after {iterations} iterations (best bounds [{lower:.6g}, {upper:.6g}])"
        )
        self.lower = lower
        self.upper = upper
        self.iterations = iterations


class DivergenceError(NumericError):
    """Picard iteration stopped contracting"""

    def __init__(self, message: str, log: Any = None):
        super().__init__(message)
        self.log = log


class BlowupError(NumericError):
    """A flow crossed the configured k*-norm ceiling"""

    def __init__(self, message: str, diagnostics: Any = None):
        super().__init__(message)
        self.diagnostics = diagnostics

    def to_record(self) -> Dict[str, Any]:
        record = super().to_record()
        if isinstance(self.diagnostics, dict):
            record['diagnostics'] = self.diagnostics
        return record


# ==========================================
# ACCEPTANCE (exit 4)
# ==========================================

class AcceptanceError(MkvlabError):
    """An experiment finished but at least one criterion failed"""

    exit_code = 4
