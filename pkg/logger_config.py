#!/usr/bin/env python
# coding: utf-8

"""
日志配置模块

CLI 启动时配置一次；库模块只使用 logging.getLogger(__name__)

环境变量：
    KDSM_LOG_LEVEL（或 LOG_LEVEL）  日志级别，默认 INFO（训练进度在 INFO 输出）
    KDSM_LOG_FILE（或 LOG_FILE）    可选，轮转日志文件（5MB × 2 份备份）
"""

import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional


def _env(*names: str, default: Optional[str] = None) -> Optional[str]:
    for name in names:
        value = os.getenv(name)
        if value:
            return value
    return default


class LoggerConfig:
    """日志配置类"""

    LOG_LEVEL = _env('KDSM_LOG_LEVEL', 'LOG_LEVEL', default='INFO')
    LOG_FILE = _env('KDSM_LOG_FILE', 'LOG_FILE')
    LOG_MAX_BYTES = 5 * 1024 * 1024
    LOG_BACKUP_COUNT = 2

    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

    @classmethod
    def resolve_level(cls, level: Optional[str] = None) -> int:
        """级别名 → logging 常量；未知名字退回 INFO"""
        return getattr(logging, (level or cls.LOG_LEVEL).upper(), logging.INFO)

    @classmethod
    def setup_logger(cls, name: Optional[str] = None, level: Optional[str] = None) -> logging.Logger:
        """
        配置日志器（默认根日志器，使各模块的 __name__ 日志器都能输出）

        重复调用只更新级别，不重复添加 handler
        """
        logger = logging.getLogger(name)
        logger.setLevel(cls.resolve_level(level))
        if logger.handlers:
            return logger

        formatter = logging.Formatter(fmt=cls.LOG_FORMAT, datefmt=cls.LOG_DATE_FORMAT)

        # stderr 给日志，stdout 留给命令结果（JSON / 表格）
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(formatter)
        logger.addHandler(console)

        if cls.LOG_FILE:
            handler = cls._file_handler(cls.LOG_FILE, formatter)
            if handler is not None:
                logger.addHandler(handler)
            else:
                logger.error(f"无法创建日志文件: {cls.LOG_FILE}")
        return logger

    @classmethod
    def _file_handler(cls, path: str, formatter: logging.Formatter) -> Optional[RotatingFileHandler]:
        try:
            log_dir = os.path.dirname(path)
            if log_dir:
                os.makedirs(log_dir, exist_ok=True)
            handler = RotatingFileHandler(path, maxBytes=cls.LOG_MAX_BYTES,
                                          backupCount=cls.LOG_BACKUP_COUNT, encoding='utf-8')
        except OSError:
            return None
        handler.setLevel(logging.DEBUG)
        handler.setFormatter(formatter)
        return handler


class ConsoleReporter:
    """CLI 输出 - 命令结果打印到 stdout，诊断信息走 logging"""

    BANNER_WIDTH = 60

    def __init__(self, logger: Optional[logging.Logger] = None):
        self.logger = logger or LoggerConfig.setup_logger()

    def result(self, message: str) -> None:
        print(message)

    def banner(self, *lines: str) -> None:
        print("=" * self.BANNER_WIDTH)
        for line in lines:
            print(line)
        print("=" * self.BANNER_WIDTH)

    def info(self, message: str) -> None:
        self.logger.info(message)

    def warning(self, message: str) -> None:
        self.logger.warning(message)

    def error(self, message: str) -> None:
        self.logger.error(message)


_reporter: Optional[ConsoleReporter] = None


def get_logger(name: Optional[str] = None, level: Optional[str] = None) -> ConsoleReporter:
    """获取全局 CLI 输出器（首次调用时配置日志；之后只更新级别）"""
    global _reporter
    if _reporter is None:
        _reporter = ConsoleReporter(LoggerConfig.setup_logger(name, level))
    elif level:
        _reporter.logger.setLevel(LoggerConfig.resolve_level(level))
    return _reporter
