"""
错误定义

每个错误带一个 code, CLI 直接用作退出码。
"""
from typing import Optional


ERROR_CODES = {
    1: "未知错误",
    2: "配置解析失败",
    3: "控制不变集为空",
    4: "修正目标集为空 (gamma 过大)",
    5: "闭环仿真中止",
    6: "输入含非有限值",
    7: "状态出现非有限值",
    8: "集合为空 (lb > ub)",
}


class ZmpcError(Exception):
    """工具链错误基类"""
    code = 1

    def __init__(self, detail: str = ""):
        self.detail = detail
        self.message = ERROR_CODES.get(self.code, f"未知错误: {self.code}")
        super().__init__(f"{self.message}: {detail}" if detail else self.message)


class ConfigError(ZmpcError):
    code = 2


class EmptyInvariantSet(ZmpcError):
    code = 3


class EmptyModifiedSet(ZmpcError):
    code = 4


class AbortedRun(ZmpcError):
    """连续求解失败次数超限"""
    code = 5

    def __init__(self, detail: str = "", step: Optional[int] = None):
        self.step = step
        super().__init__(detail)


class NonFiniteInput(ZmpcError):
    code = 6


class NonFiniteState(ZmpcError):
    code = 7


class EmptySet(ZmpcError):
    code = 8
