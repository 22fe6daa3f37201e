# app/models/errors.py
from typing import List, Optional, Sequence, Tuple


class RefCompError(Exception):
    """用户可修正的错误基类（CLI 退出码 1）"""


class InvalidArgumentError(RefCompError, ValueError):
    """参数不合法"""


class ShapeError(RefCompError, ValueError):
    """数组形状不匹配"""

    def __init__(self, message: str, *shapes: Tuple[int, ...]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class ParseError(RefCompError):
    """文件解析失败，带路径和位置"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None,
                 offset: Optional[int] = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"第{line}行")
        if offset is not None:
            where.append(f"字节{offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.line = line
        self.offset = offset


class DegenerateMaskError(RefCompError):
    """退化后掩码为空"""


class InsufficientReferencesError(RefCompError):
    """可用参考对数量不足"""

    def __init__(self, message: str, survivors: Sequence[Tuple[str, float]] = ()):
        listed = ", ".join(f"{sid}({cd:.6g})" for sid, cd in survivors) or "无"
        super().__init__(f"{message}; 保留: {listed}")
        self.survivors: List[Tuple[str, float]] = list(survivors)


class CheckpointError(RefCompError):
    """检查点格式、版本或结构不匹配"""


class ConfigError(RefCompError):
    """配置文件错误"""

    def __init__(self, message: str, unknown_keys: Sequence[str] = ()):
        if unknown_keys:
            message = f"{message}: {', '.join(unknown_keys)}"
        super().__init__(message)
        self.unknown_keys = list(unknown_keys)


class NonFiniteError(RefCompError, FloatingPointError):
    """损失出现 NaN/Inf"""

    def __init__(self, message: str, batch_ids: Sequence[str] = ()):
        if batch_ids:
            message = f"{message}; 批次样本: {', '.join(batch_ids)}"
        super().__init__(message)
        self.batch_ids = list(batch_ids)
