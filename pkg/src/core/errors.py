# -*- coding: utf-8 -*-
"""
异常定义模块

所有对外抛出的错误都带有稳定的错误码（code），命令行工具据此输出
单行、可机器解析的错误信息。
"""


class MaskGCTError(Exception):
    """项目内所有错误的基类"""

    code = "E_INTERNAL"

    def __init__(self, message: str, code: str = None):
        super().__init__(message)
        if code:
            self.code = code
        self.message = message

    def one_line(self) -> str:
        text = str(self.message).replace("\n", " ").replace('"', "'")
        return f'error code={self.code} message="{text}"'


class ContractViolation(MaskGCTError, ValueError):
    """调用方违反前置条件（形状、取值范围、保留 ID 等）"""

    code = "E_CONTRACT"

    def __init__(self, code: str, message: str):
        super().__init__(message, code)


class NumericError(MaskGCTError, ArithmeticError):
    """前向或反向计算中出现 NaN / Inf"""

    code = "E_NUMERIC"

    def __init__(self, op: str, message: str = "non-finite value"):
        super().__init__(f"{message} in op '{op}'")
        self.op = op


class MissingCheckpointError(ContractViolation):
    """合成/评估启动时缺少必需模块的检查点"""

    def __init__(self, module: str, path: str):
        super().__init__("E_MISSING_CHECKPOINT", f"missing checkpoint for module '{module}': {path}")
        self.module = module
        self.path = path
