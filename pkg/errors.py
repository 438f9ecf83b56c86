"""
Error types shared by the restoration toolkit
"""

from typing import Any, Dict, Optional


class RestorationError(Exception):
    """Base class for every error raised by the toolkit"""


class ParameterDomainError(RestorationError, ValueError):
    """A numeric argument is outside the domain of the operation"""


class ConfigurationError(RestorationError, ValueError):
    """A configuration file or object is inconsistent or unsatisfiable"""


class TopologyError(RestorationError, ValueError):
    """Feeder or road file failed to parse or validate"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class NumericalError(RestorationError, ArithmeticError):
    """A factorization or numeric routine could not produce a finite result"""


class ContractViolation(RestorationError, RuntimeError):
    """A caller broke an operation's precondition (infeasible action, shape mismatch)"""


class TrainingDivergedError(RestorationError, RuntimeError):
    """PPO produced a non-finite loss"""

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class OracleRefusal(RestorationError, ValueError):
    """Instance is larger than the exact-search oracle accepts"""


class SlateOverflowError(ContractViolation):
    """More confirmed components than the policy's fixed target slate holds"""
