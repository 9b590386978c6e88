"""
日志配置测试

验证：
1. setup_logger 按参数设置级别，重复调用不重复添加 handler；未知级别名退回 INFO
2. 配置 LOG_FILE 时写入轮转日志文件
3. ConsoleReporter：结果与横幅输出到 stdout，其余走 logging
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import logging
from logging.handlers import RotatingFileHandler

from logger_config import ConsoleReporter, LoggerConfig


def test_level_and_single_handler():
    logger = LoggerConfig.setup_logger('kdsm-test-level', level='debug')
    assert logger.level == logging.DEBUG
    n_handlers = len(logger.handlers)
    again = LoggerConfig.setup_logger('kdsm-test-level', level='WARNING')
    assert again is logger
    assert len(again.handlers) == n_handlers
    assert again.level == logging.WARNING
    assert LoggerConfig.resolve_level('verbose') == logging.INFO


def test_log_file(tmp_path, monkeypatch):
    path = tmp_path / "logs" / "kdsm.log"
    monkeypatch.setattr(LoggerConfig, 'LOG_FILE', str(path))
    logger = LoggerConfig.setup_logger('kdsm-test-file', level='INFO')
    assert any(isinstance(h, RotatingFileHandler) for h in logger.handlers)
    logger.info("step 1 loss=0.5")
    for h in logger.handlers:
        h.flush()
    assert "step 1 loss=0.5" in path.read_text(encoding='utf-8')
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()


def test_console_reporter(capsys, caplog):
    reporter = ConsoleReporter(logging.getLogger('kdsm-test-reporter'))
    reporter.result("✅ done")
    reporter.banner("training", "fold 1")
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "✅ done"
    assert lines[1] == "=" * 60 and lines[-1] == "=" * 60
    assert lines[2:4] == ["training", "fold 1"]
    with caplog.at_level(logging.WARNING, logger='kdsm-test-reporter'):
        reporter.warning("fallback embedding used")
    assert "fallback embedding used" in caplog.text
