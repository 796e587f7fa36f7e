"""Utility decorators for SAT-NGP commands"""
import logging
import sys
import time
from functools import wraps

from services.errors import (ConfigError, DataMismatchError, DatasetError, GradientError, SatNgpError,
                             TrainingDivergedError)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_DATA = 4

# first match wins
EXIT_CODES = (
    (ConfigError, EXIT_USAGE),
    (FileNotFoundError, EXIT_USAGE),
    (TrainingDivergedError, EXIT_TRAINING),
    (GradientError, EXIT_TRAINING),
    (DataMismatchError, EXIT_DATA),
    (DatasetError, EXIT_DATA),
    (SatNgpError, EXIT_FAILURE),
)


def exit_code_for(error: BaseException) -> int:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    raise error


def command(f):
    """Decorator turning typed engine errors into an error line on stderr and an exit code"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            result = f(*args, **kwargs)
        except (SatNgpError, FileNotFoundError) as e:
            code = exit_code_for(e)
            key = getattr(e, "key", None)
            print(f"error: {e}" + (f" [{key}]" if key and key not in str(e) else ""), file=sys.stderr)
            log.debug("command %s failed with exit code %d", f.__name__, code, exc_info=True)
            return code
        return EXIT_OK if result is None else result
    return decorated_function


def timed(label: str):
    """Decorator logging the wall-clock duration of a phase"""
    def decorator(f):
        @wraps(f)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                return f(*args, **kwargs)
            finally:
                log.info("%s took %.1f s", label, time.perf_counter() - start)
        return wrapper
    return decorator
