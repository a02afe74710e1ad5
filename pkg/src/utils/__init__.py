# -*- coding: utf-8 -*-
"""
工具函数模块

提供日志初始化等通用辅助函数。
"""

from src.utils.log import setup_logging

__all__ = ["setup_logging"]
