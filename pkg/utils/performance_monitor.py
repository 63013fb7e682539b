"""Wall-clock timing of the expensive simulator stages."""
import functools
import threading
import time
from contextlib import contextmanager
from typing import Callable, Dict, Optional, Tuple

from .logger import get_logger, log_performance

# Builds extra log fields (ensemble size, scenario name) from a call's arguments.
ContextBuilder = Callable[..., Dict[str, object]]


class PerformanceMonitor:
    """
    Times ensemble integration, report assembly, output writing and oracle
    checks.

    Every finished measurement is logged on the PERFORMANCE logger and added
    to a per-stage total, so a command can close with one summary of where
    its time went.
    """

    def __init__(self):
        self._open: Dict[str, Tuple[str, float]] = {}
        self._totals: Dict[str, Tuple[int, float]] = {}
        self._next_id = 0
        self._lock = threading.Lock()
        self.logger = get_logger("PERFORMANCE")

    def _finish(self, stage: str, duration: float, context: Dict[str, object]):
        with self._lock:
            calls, seconds = self._totals.get(stage, (0, 0.0))
            self._totals[stage] = (calls + 1, seconds + duration)
        log_performance(stage, duration, **context)

    def monitor_function(self, operation_name: Optional[str] = None,
                         context: Optional[ContextBuilder] = None):
        """
        Decorator timing every call of a function

        Args:
            operation_name: Stage name (defaults to module.function)
            context: Called with the function's arguments; its dict is appended
                to the log line
        """
        def decorator(func: Callable) -> Callable:
            stage = operation_name or f"{func.__module__}.{func.__name__}"

            @functools.wraps(func)
            def wrapper(*args, **kwargs):
                start = time.perf_counter()
                try:
                    result = func(*args, **kwargs)
                except Exception as e:
                    self.logger.error(f"PERF_ERROR: {stage} failed after {time.perf_counter() - start:.3f}s"
                                      f" - {type(e).__name__}: {e}")
                    raise
                duration = time.perf_counter() - start
                self._finish(stage, duration, context(*args, **kwargs) if context else {})
                return result

            return wrapper
        return decorator

    @contextmanager
    def timed_stage(self, stage: str, **context):
        """Time a block; failed blocks are not counted."""
        start = time.perf_counter()
        yield
        self._finish(stage, time.perf_counter() - start, context)

    def start_monitor(self, operation_name: str) -> str:
        """Open a manual measurement and return its id for ``stop_monitor``."""
        with self._lock:
            self._next_id += 1
            monitor_id = f"{operation_name}#{self._next_id}"
            self._open[monitor_id] = (operation_name, time.perf_counter())
        return monitor_id

    def stop_monitor(self, monitor_id: str, **context) -> Optional[float]:
        """Close a manual measurement; None if the id is unknown."""
        with self._lock:
            entry = self._open.pop(monitor_id, None)
        if entry is None:
            self.logger.warning(f"Monitor {monitor_id} not found")
            return None
        stage, start = entry
        duration = time.perf_counter() - start
        self._finish(stage, duration, context)
        return duration

    def totals(self) -> Dict[str, Tuple[int, float]]:
        """(calls, seconds) per stage since the last reset."""
        with self._lock:
            return dict(self._totals)

    def log_summary(self, reset: bool = True):
        """One line per stage, slowest first."""
        totals = self.totals()
        for stage, (calls, seconds) in sorted(totals.items(), key=lambda item: -item[1][1]):
            self.logger.info(f"TOTAL: {stage} {seconds:.3f}s over {calls} call(s)")
        if reset:
            with self._lock:
                self._totals.clear()


# Global instance
performance_monitor = PerformanceMonitor()


def monitor_function(operation_name: Optional[str] = None, context: Optional[ContextBuilder] = None):
    return performance_monitor.monitor_function(operation_name, context)


def timed_stage(stage: str, **context):
    return performance_monitor.timed_stage(stage, **context)


def start_monitor(operation_name: str) -> str:
    return performance_monitor.start_monitor(operation_name)


def stop_monitor(monitor_id: str, **context) -> Optional[float]:
    return performance_monitor.stop_monitor(monitor_id, **context)


def log_timing_summary(reset: bool = True):
    performance_monitor.log_summary(reset)
