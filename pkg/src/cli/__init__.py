# -*- coding: utf-8 -*-
"""
命令行工具模块

提供 maskgct 命令行入口（语料生成、训练、合成、评估、检查点查看）。
"""

from src.cli.maskgct import main

__all__ = ["main"]
