"""
KDSM - 异常定义

所有包内异常的统一层级，CLI 根据类型映射退出码：
- ConfigValidationError / DimensionError / ... → 2（配置错误）
- DataError 及其子类 → 3（数据错误）
- NumericFailure → 4（数值失败）
"""


class KDSMError(Exception):
    """包内异常基类"""
    exit_code = 1


class ConfigValidationError(KDSMError, ValueError):
    """配置校验失败（几何不合法、O 不可行、键名/取值错误等）"""
    exit_code = 2


class DimensionError(KDSMError, ValueError):
    """张量形状不匹配"""
    exit_code = 2

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shape_text = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {shape_text}")


class PromptValidationError(KDSMError, ValueError):
    """prompt 标识符为空"""
    exit_code = 2


class CapacityError(KDSMError, ValueError):
    """prompt 数超过 K"""
    exit_code = 2


class UsageError(KDSMError, ValueError):
    """接口误用（非标量 loss 反传、模式不匹配等）"""
    exit_code = 2


class DataError(KDSMError):
    """数据错误（样本缺失、图像不可读等）"""
    exit_code = 3


class GroupLookupError(DataError, KeyError):
    """(species, category) 未出现在聚类结果中"""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown pair"


class EmbeddingParseError(DataError):
    """
    KEMB 文件解析失败

    reason 取值: bad_magic / bad_version / truncated / duplicate_key / zero_vector
    """

    def __init__(self, reason: str, message: str):
        self.reason = reason
        super().__init__(message)


class CheckpointError(DataError):
    """
    KCKP 检查点读取失败

    reason 取值: missing / bad_magic / version_mismatch / truncated / checksum
    """

    def __init__(self, reason: str, message: str):
        self.reason = reason
        super().__init__(message)


class NumericFailure(KDSMError, ArithmeticError):
    """训练中出现非有限 loss"""
    exit_code = 4
