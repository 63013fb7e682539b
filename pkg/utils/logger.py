import logging
import logging.handlers
import sys
import threading
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

# Import RunConfig type hint only, not the actual class
from typing import TYPE_CHECKING
if TYPE_CHECKING:
    from .config_manager import RunConfig


class LogLevelEnum(Enum):
    """Level names accepted in the ``debug`` section"""
    TRACE = "TRACE"      # per-chunk and per-event integrator detail
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARN = "WARN"
    ERROR = "ERROR"
    FATAL = "FATAL"

    @classmethod
    def get_python_level(cls, level: str) -> int:
        """Stdlib level for a configuration level name; unknown names map to INFO"""
        return _PYTHON_LEVELS.get(level.upper(), logging.INFO)

    @classmethod
    def get_available_levels(cls) -> List[str]:
        return [level.value for level in cls]


_PYTHON_LEVELS = {
    "TRACE": logging.DEBUG,
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARN": logging.WARNING,
    "ERROR": logging.ERROR,
    "FATAL": logging.CRITICAL,
}

# Module loggers used across the package; names are always uppercase.
KNOWN_MODULES = (
    "MAIN", "CLI", "CONFIG_MANAGER", "CSV_WRITER", "SVG_PLOTTER",
    "WAVEPACKET", "OPTICS", "MARKER", "PILOTWAVE", "SCENARIOS", "ORACLE",
    "PERFORMANCE", "ERRORS",
)

CONSOLE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'


class LogFileSpec(NamedTuple):
    filename: str
    level: int
    max_megabytes: int
    backups: int
    master_debug_only: bool = False


LOG_FILES = (
    LogFileSpec("simulation.log", logging.INFO, 10, 5),
    LogFileSpec("errors.log", logging.ERROR, 5, 3),
    LogFileSpec("debug.log", logging.DEBUG, 20, 3, master_debug_only=True),
)


class _LevelEntry(NamedTuple):
    logger: logging.Logger
    level: str


def _fields(kwargs: Dict[str, object]) -> str:
    return " | ".join(f"{key}={value}" for key, value in kwargs.items())


class LoggerManager:
    """
    Owns the handlers and the per-module level table of the simulator.

    Console output goes to standard error so that standard output carries
    nothing but the validation table. Rotating files from ``LOG_FILES`` are
    added when the ``debug`` section names a ``log_dir``. Only handlers
    installed here are ever removed from the root logger.
    """

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super(LoggerManager, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if hasattr(self, '_initialized'):
            return
        self._initialized = True
        self._debug: Dict = {}
        self._configured = False
        self._log_dir: Optional[Path] = None
        self._handlers: List[logging.Handler] = []
        self._modules: Dict[str, _LevelEntry] = {}
        self._external: Dict[str, _LevelEntry] = {}
        self._discovered_modules = set(KNOWN_MODULES)
        self._install_handlers()

    def _install_handlers(self):
        root_logger = logging.getLogger()
        root_logger.setLevel(logging.DEBUG)
        for handler in self._handlers:
            root_logger.removeHandler(handler)
            handler.close()
        self._handlers = []

        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
        self._handlers.append(console_handler)

        if self._log_dir is not None:
            self._log_dir.mkdir(parents=True, exist_ok=True)
            for spec in LOG_FILES:
                if spec.master_debug_only and not self.is_logging_enabled():
                    continue
                file_handler = logging.handlers.RotatingFileHandler(
                    self._log_dir / spec.filename,
                    maxBytes=spec.max_megabytes * 1024 * 1024,
                    backupCount=spec.backups,
                    encoding='utf-8'
                )
                file_handler.setLevel(spec.level)
                file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
                self._handlers.append(file_handler)

        for handler in self._handlers:
            root_logger.addHandler(handler)

    def initialize(self, config: 'RunConfig'):
        """
        Apply the ``debug`` section of a run configuration

        Args:
            config: Loaded run configuration
        """
        self._debug = dict(config.debug or {})
        self._configured = True
        log_dir = self._debug.get("log_dir")
        self._log_dir = Path(log_dir) if log_dir else None
        self._install_handlers()

        try:
            if not self.is_logging_enabled():
                for module_name in sorted(self._discovered_modules):
                    self._set_level(self._modules, module_name, "ERROR")
            else:
                self.update_log_levels(self._debug.get("modules") or {})
                self._update_levels(self._external, self._debug.get("external_loggers") or {}, "external logger")
        except Exception as e:
            logging.getLogger("LOGGER_MANAGER").error(f"Error applying debug config: {e}")

        logging.getLogger("LOGGER_MANAGER").debug(
            f"Logging configured for {len(self._discovered_modules)} modules, log_dir={self._log_dir}"
        )

    def _set_level(self, table: Dict[str, _LevelEntry], name: str, level: str):
        if table is self._modules and not self.is_logging_enabled():
            level = "ERROR"
        target = logging.getLogger(name)
        target.setLevel(LogLevelEnum.get_python_level(level))
        table[name] = _LevelEntry(target, level)

    def _update_levels(self, table: Dict[str, _LevelEntry], levels: Dict[str, str], kind: str):
        valid = LogLevelEnum.get_available_levels()
        for name, level in levels.items():
            if level not in valid:
                logging.getLogger("LOGGER_MANAGER").warning(f"Invalid log level '{level}' for {kind} {name}")
                continue
            self._set_level(table, name.upper() if table is self._modules else name, level)

    def get_logger(self, module_name: str) -> logging.Logger:
        """
        Logger for a simulator module

        Args:
            module_name: Module name, upper-cased before lookup

        Returns:
            The same logger object on every call for that name
        """
        module_name = module_name.upper()
        self._discovered_modules.add(module_name)
        if module_name not in self._modules:
            self._set_level(self._modules, module_name, "INFO")
        return self._modules[module_name].logger

    def update_log_levels(self, log_level_dict: Dict[str, str]):
        """Change module levels at runtime; invalid level names are skipped"""
        self._update_levels(self._modules, log_level_dict, "module")

    def is_logging_enabled(self) -> bool:
        """False only after a configuration with ``master_debug: false`` is loaded"""
        if not self._configured or not self._debug:
            return True
        return bool(self._debug.get("master_debug", False))

    def get_available_modules(self) -> List[str]:
        return sorted(self._discovered_modules)

    def get_module_log_level(self, module_name: str) -> str:
        entry = self._modules.get(module_name.upper())
        return entry.level if entry else "INFO"

    def log_performance(self, operation: str, duration: float, **kwargs):
        message = f"PERF: {operation} took {duration:.3f}s"
        if kwargs:
            message += f" | {_fields(kwargs)}"
        logging.getLogger("PERFORMANCE").info(message)

    def log_run_event(self, event_type: str, scenario: str, **kwargs):
        """One ``RUN:`` line per run lifecycle event, on the SCENARIOS logger"""
        message = f"RUN: {event_type} | {scenario}"
        if kwargs:
            message += f" | {_fields(kwargs)}"
        logging.getLogger("SCENARIOS").info(message)

    def log_error_with_context(self, error: Exception, context: str = "", **kwargs):
        message = f"ERROR: {type(error).__name__}: {error} | Context: {context}"
        if kwargs:
            message += f" | {_fields(kwargs)}"
        logging.getLogger("ERRORS").error(message)


# Global instance
_logger_manager = LoggerManager()


def initialize_logger_manager(config: 'RunConfig'):
    """Apply a loaded run configuration's ``debug`` section to every logger"""
    _logger_manager.initialize(config)


def get_logger(module_name: str) -> logging.Logger:
    return _logger_manager.get_logger(module_name)


def update_log_levels(log_level_dict: Dict[str, str]):
    _logger_manager.update_log_levels(log_level_dict)


def get_available_modules() -> List[str]:
    return _logger_manager.get_available_modules()


def get_module_log_level(module_name: str) -> str:
    return _logger_manager.get_module_log_level(module_name)


def is_logging_enabled() -> bool:
    return _logger_manager.is_logging_enabled()


def log_performance(operation: str, duration: float, **kwargs):
    """Timing line on the PERFORMANCE logger; silent when logging is disabled"""
    if is_logging_enabled():
        _logger_manager.log_performance(operation, duration, **kwargs)


def log_run_event(event_type: str, scenario: str, **kwargs):
    if is_logging_enabled():
        _logger_manager.log_run_event(event_type, scenario, **kwargs)


def log_error_with_context(error: Exception, context: str = "", **kwargs):
    # Errors are logged whatever master_debug says
    _logger_manager.log_error_with_context(error, context, **kwargs)
