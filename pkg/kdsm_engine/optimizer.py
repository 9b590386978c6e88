"""
KDSM Engine - Adam 优化器与学习率阶梯

负责：
1. Adam（β₁=0.9, β₂=0.999, 偏差修正）
2. 学习率在总步数 70% / 90% 处各乘 0.1
3. 导出/恢复一阶、二阶矩与步数（检查点续训）
"""

import logging
from typing import Dict, Mapping, Sequence

import numpy as np

from models.errors import ConfigValidationError
from models.train_config import OptimConfig
from .autograd import Tensor

logger = logging.getLogger(__name__)


class StepSchedule:
    """按总步数比例的阶梯衰减"""

    def __init__(self, base_lr: float, total_steps: int,
                 milestones: Sequence[float] = (0.7, 0.9), factor: float = 0.1):
        if total_steps < 1:
            raise ConfigValidationError(f"total_steps must be >= 1, got {total_steps}")
        self.base_lr = base_lr
        self.factor = factor
        self.boundaries = sorted(int(round(m * total_steps)) for m in milestones)

    def lr_at(self, step: int) -> float:
        """第 step 步（从 0 开始）使用的学习率"""
        passed = sum(1 for b in self.boundaries if step >= b)
        return self.base_lr * (self.factor ** passed)


class Adam:
    """
    Adam

    参数按名字管理，step() 原地更新 Tensor.data 并清空梯度
    """

    def __init__(self, params: Mapping[str, Tensor], config: OptimConfig, total_steps: int):
        self.params = params
        self.config = config
        self.schedule = StepSchedule(config.learning_rate, total_steps,
                                     config.decay_milestones, config.decay_factor)
        self.t = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in params.items()}

    @property
    def lr(self) -> float:
        return self.schedule.lr_at(self.t)

    def step(self) -> float:
        """
        执行一步更新

        Returns:
            本步使用的学习率
        """
        cfg = self.config
        lr = self.lr
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, param in self.params.items():
            grad = param.grad
            if grad is None:
                continue
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * param.data
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * grad
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * grad * grad
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
            param.grad = None
        return lr

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """导出状态（键名 adam.m.* / adam.v.* / adam.t）"""
        state = {f'adam.m.{k}': v.copy() for k, v in self.m.items()}
        state.update({f'adam.v.{k}': v.copy() for k, v in self.v.items()})
        state['adam.t'] = np.array([float(self.t)])
        return state

    def load_state_arrays(self, state: Mapping[str, np.ndarray]) -> None:
        for name in self.m:
            key_m, key_v = f'adam.m.{name}', f'adam.v.{name}'
            if key_m in state and key_v in state:
                self.m[name] = np.array(state[key_m], dtype=np.float64)
                self.v[name] = np.array(state[key_v], dtype=np.float64)
            else:
                logger.warning(f"No optimizer moments for '{name}' in checkpoint, starting from zero")
        if 'adam.t' in state:
            self.t = int(np.asarray(state['adam.t']).reshape(-1)[0])
