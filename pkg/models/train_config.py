"""
KDSM - 强类型训练配置对象

负责：
1. 将YAML配置编译为强类型dataclass对象（由 ConfigCompiler 完成）
2. 提供类型安全的超参数访问
3. 配置版本追溯（version hash 写入检查点）

设计原则：
- 嵌套结构反映YAML层次
- 不可变对象（frozen=True，防止运行时修改）
- 默认值即完整尺度常量（K、O、C、σ、hei、wid、α、β 等）
"""

from dataclasses import dataclass, field, asdict
from typing import Optional, Tuple


# ==========================================
# 网络结构
# ==========================================

@dataclass(frozen=True)
class ModelConfig:
    """网络结构配置"""
    mode: str = "kdsm"               # baseline | kdsm
    K: int = 100                     # prompt 槽位数
    O: int = 100                     # 分组数 = 预测热图通道数
    C: int = 64                      # 适配后的特征宽度
    C0: int = 512                    # 原始文本嵌入宽度
    d: int = 512                     # 注意力嵌入宽度
    heads: int = 4
    self_layers: int = 3
    cross_layers: int = 3
    ffn_dim: int = 2048
    dropout: float = 0.1
    image_size: int = 64
    image_channels: int = 1
    encoder_blocks: int = 3          # stride-2 卷积块数
    encoder_channels: int = 64       # C_f
    head_channels: int = 32          # 反卷积中间宽度
    adapter_hidden: int = 256        # keypoint adapter 隐层
    vision_adapter_hidden: int = 256
    use_vkra: bool = True

    @property
    def feature_size(self) -> int:
        return self.image_size // (2 ** self.encoder_blocks)

    @property
    def heatmap_size(self) -> int:
        return self.feature_size * 8


# ==========================================
# 损失
# ==========================================

@dataclass(frozen=True)
class LossConfig:
    """损失与真值热图配置"""
    alpha: float = 1e-6              # 匹配损失权重
    beta: float = 1.0                # MSE 权重
    sigma: float = 2.0               # 高斯标准差（热图像素）
    log_clamp: float = 1e-12


# ==========================================
# 优化器
# ==========================================

@dataclass(frozen=True)
class OptimConfig:
    """Adam 与学习率阶梯衰减"""
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_milestones: Tuple[float, ...] = (0.7, 0.9)   # 占总步数比例
    decay_factor: float = 0.1


# ==========================================
# 训练日程
# ==========================================

@dataclass(frozen=True)
class ScheduleConfig:
    """训练日程（steps 与 epochs 二选一，steps 优先）"""
    preset: str = "desk"
    steps: Optional[int] = 2000
    epochs: Optional[int] = None
    batch_size: int = 16
    log_every: int = 50
    checkpoint_every: int = 500
    log_tail: int = 50


# ==========================================
# 数据
# ==========================================

@dataclass(frozen=True)
class DataConfig:
    """训练数据与嵌入来源"""
    augment: bool = True
    workers: int = 1
    embedding_table: Optional[str] = None
    allow_synth_fallback: bool = False
    assignment: str = "max"          # 推理默认分配方式
    kmeans_max_iter: int = 100
    kmeans_n_init: int = 10


# ==========================================
# 合成世界
# ==========================================

@dataclass(frozen=True)
class WorldConfig:
    """合成数据集生成配置"""
    n_species: int = 8
    cats_per_species: int = 6
    samples_per_species: int = 40
    image_size: int = 64
    n_folds: int = 5
    invisible_rate: float = 0.1
    noise_std: float = 0.03
    test_instance_ratio: float = 0.2
    seed: int = 7
    workers: int = 1


# ==========================================
# 顶层
# ==========================================

@dataclass(frozen=True)
class TrainConfig:
    """训练配置（顶层）"""
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    version: str = ""

    def to_dict(self) -> dict:
        """转换为可 JSON 序列化的字典（写入检查点）"""
        raw = asdict(self)
        raw['optim']['decay_milestones'] = list(self.optim.decay_milestones)
        return raw
