"""
KDSM - 枚举定义

定义训练/推理管道使用的枚举类型
"""

from enum import Enum


class PipelineMode(Enum):
    """训练模式"""
    BASELINE = "baseline"  # 基线：H = T × V
    KDSM = "kdsm"          # 分组匹配 + 关系感知注意力


class Setting(Enum):
    """
    零样本评估设置

    - A: 未见关键点类别（同一物种，训练/测试类别不相交）
    - B: 未见物种（训练/测试物种不相交）
    """
    A = "A"
    B = "B"


class AssignmentMode(Enum):
    """
    推理阶段的通道分配方式

    - MAX: 每行取最大值（默认，允许重复）
    - GREEDY: 优先队列贪心一对一分配（可选方案）
    """
    MAX = "max"
    GREEDY = "greedy"


class SuperCategory(Enum):
    """物种超类（由物种名最后一个词决定）"""
    FACE = "face"
    BODY = "body"
    OTHER = "other"

    @classmethod
    def of_species(cls, species: str) -> 'SuperCategory':
        """根据物种名推断超类，如 "fox body" → BODY"""
        tail = species.strip().split()[-1].lower() if species.strip() else ""
        for member in (cls.FACE, cls.BODY):
            if tail == member.value:
                return member
        return cls.OTHER
