import logging
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest

from utils import logger as logger_module
from utils.config_manager import RunConfig
from utils.errors import ScheduleError
from utils.logger import (get_available_modules, get_logger, get_module_log_level, initialize_logger_manager,
                          log_error_with_context, log_run_event, update_log_levels)
from utils.performance_monitor import (log_timing_summary, monitor_function, performance_monitor, start_monitor,
                                       stop_monitor, timed_stage)

logger = get_logger("TEST_LOGGER")


def test_module_loggers_are_uppercase_singletons():
    first = get_logger("pilotwave")
    second = get_logger("PILOTWAVE")
    assert first is second
    assert first.name == "PILOTWAVE"
    assert "PILOTWAVE" in get_available_modules()


def test_levels_can_be_changed_at_runtime():
    update_log_levels({"oracle": "DEBUG"})
    assert get_module_log_level("ORACLE") == "DEBUG"
    assert get_logger("ORACLE").level == logging.DEBUG
    update_log_levels({"ORACLE": "LOUD"})
    assert get_module_log_level("ORACLE") == "DEBUG"
    update_log_levels({"ORACLE": "INFO"})


def test_run_events_and_errors_are_logged(caplog):
    update_log_levels({"SCENARIOS": "INFO"})
    with caplog.at_level(logging.INFO):
        log_run_event("RUN_START", "wheeler_open", n=10, seed=3)
        log_error_with_context(ScheduleError("t_c inside window"), "building run", t_c=1.0)
    messages = [record.getMessage() for record in caplog.records]
    assert any("RUN: RUN_START | wheeler_open | n=10 | seed=3" in m for m in messages)
    assert any(m.startswith("ERROR: ScheduleError: t_c inside window") for m in messages)
    assert any(record.name == "ERRORS" for record in caplog.records)


def test_performance_monitor(caplog):
    @monitor_function("test.square", context=lambda x: {"x": x})
    def square(x):
        return x * x

    with caplog.at_level(logging.INFO):
        assert square(3) == 9
        monitor = start_monitor("test.manual")
        duration = stop_monitor(monitor, chunk=1)
        with timed_stage("test.block", emit="svg"):
            pass
    assert duration is not None and duration >= 0
    assert stop_monitor("unknown") is None
    assert stop_monitor(monitor) is None
    messages = [record.getMessage() for record in caplog.records]
    assert any(m.startswith("PERF: test.square took") and "x=3" in m for m in messages)
    assert any("test.manual" in m and "chunk=1" in m for m in messages)
    assert any("test.block" in m and "emit=svg" in m for m in messages)


def test_failed_calls_are_not_counted(caplog):
    @monitor_function("test.failing")
    def failing():
        raise ScheduleError("late switch")

    with caplog.at_level(logging.INFO):
        with pytest.raises(ScheduleError):
            failing()
    assert "test.failing" not in performance_monitor.totals()
    assert any(m.getMessage().startswith("PERF_ERROR: test.failing failed") for m in caplog.records)


def test_timing_summary_lists_stages_and_resets(caplog):
    log_timing_summary()
    with caplog.at_level(logging.INFO):
        for _ in range(2):
            with timed_stage("test.repeated"):
                pass
        assert performance_monitor.totals()["test.repeated"][0] == 2
        log_timing_summary()
    assert any("TOTAL: test.repeated" in r.getMessage() and "over 2 call(s)" in r.getMessage()
               for r in caplog.records)
    assert performance_monitor.totals() == {}


def test_known_modules_cover_the_package():
    for name in ("CLI", "OPTICS", "MARKER", "PILOTWAVE", "SCENARIOS", "ORACLE", "CSV_WRITER", "SVG_PLOTTER"):
        assert name in logger_module.KNOWN_MODULES


def test_configuration_sets_external_logger_levels():
    config = RunConfig.from_dict({"debug": {"external_loggers": {"matplotlib.ticker": "ERROR", "noisy": "LOUD"}}})
    initialize_logger_manager(config)
    assert logging.getLogger("matplotlib.ticker").level == logging.ERROR
    assert logging.getLogger("noisy").level == logging.NOTSET
    assert get_module_log_level("PILOTWAVE") == "WARN"
    initialize_logger_manager(RunConfig())
