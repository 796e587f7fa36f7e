"""Error types raised by the SAT-NGP engine"""
from typing import Optional, Sequence


class SatNgpError(RuntimeError):
    """Base class for every engine error"""


class DomainError(SatNgpError):
    """A point or parameter lies outside the domain an operation accepts"""


class SingularModelError(SatNgpError):
    """RPC denominator vanished while evaluating the sensor model"""


class LocalizationError(SatNgpError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} px after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class ConfigError(SatNgpError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DatasetError(SatNgpError):
    def __init__(self, message: str, record: Optional[str] = None):
        super().__init__(f"{record}: {message}" if record else message)
        self.record = record


class DataMismatchError(SatNgpError):
    def __init__(self, message: str, left: Sequence = (), right: Sequence = ()):
        super().__init__(f"{message}: {tuple(left)} vs {tuple(right)}" if left or right else message)
        self.left = tuple(left)
        self.right = tuple(right)


class GradientError(SatNgpError):
    def __init__(self, group: str, message: str = "non-finite gradient"):
        super().__init__(f"{message} in parameter group '{group}'")
        self.group = group


class TrainingDivergedError(SatNgpError):
    def __init__(self, step: int, checkpoint: Optional[str], detail: str = "loss is not finite"):
        super().__init__(f"training diverged at step {step}: {detail}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


class CheckpointError(SatNgpError):
    """Checkpoint file is truncated, has a bad magic header or an unknown section"""
