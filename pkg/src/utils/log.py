# -*- coding: utf-8 -*-
"""
日志配置模块

所有模块共享名为 'MaskGCT' 的 logger，文件日志按大小回滚，同时输出到控制台。
"""

import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional

LOGGER_NAME = 'MaskGCT'


def setup_logging(log_dir: Optional[str] = None, level: Optional[str] = None) -> logging.Logger:
    """
    初始化 'MaskGCT' logger（重复调用只生效一次）

    Args:
        log_dir: 日志目录，默认读取环境变量 MGCT_LOG_DIR，否则为 logs
        level: 日志级别，默认读取 MGCT_LOG_LEVEL，否则为 INFO

    Returns:
        配置好的 logger
    """
    logger = logging.getLogger(LOGGER_NAME)
    level = (level or os.getenv('MGCT_LOG_LEVEL', 'INFO')).upper()
    logger.setLevel(getattr(logging, level, logging.INFO))

    # 防止重复添加 handler
    if logger.handlers:
        return logger

    formatter = logging.Formatter(
        '[%(asctime)s] %(levelname)s in %(module)s: %(message)s'
    )

    log_dir = log_dir or os.getenv('MGCT_LOG_DIR', 'logs')
    try:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, 'maskgct.log'), maxBytes=10*1024*1024, backupCount=5, encoding='utf-8'
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    except OSError as e:
        print(f"⚠️ 无法创建日志文件，仅输出到控制台: {e}", file=sys.stderr)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger
