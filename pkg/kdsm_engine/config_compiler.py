"""
KDSM Engine - 配置编译器

负责：
1. 读取YAML配置文件
2. 预设（desk / full）作为底值合并
3. 键名迁移（旧键→新键兼容）
4. 类型/范围校验
5. 生成配置版本hash
6. 编译为强类型 TrainConfig / WorldConfig 对象

设计原则：
- 启动时编译一次（fail-fast）
- 集中处理键名迁移（不在训练逻辑层处理）
- 未知键直接报错，错误信息带完整键路径
- 配置版本写入检查点，可追溯
"""

import copy
import hashlib
import json
import logging
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from models.enums import AssignmentMode, PipelineMode
from models.errors import ConfigValidationError
from models.train_config import (
    DataConfig, LossConfig, ModelConfig, OptimConfig, ScheduleConfig, TrainConfig, WorldConfig,
)

logger = logging.getLogger(__name__)

SECTIONS = {
    'model': ModelConfig,
    'loss': LossConfig,
    'optim': OptimConfig,
    'schedule': ScheduleConfig,
    'data': DataConfig,
}

# 预设只提供底值，文件里显式给出的键优先
PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    'desk': {
        'schedule': {'steps': 2000, 'epochs': None, 'batch_size': 16},
        'model': {'image_size': 64, 'encoder_blocks': 3},
    },
    'full': {
        'schedule': {'steps': None, 'epochs': 210, 'batch_size': 64},
        'model': {'image_size': 256, 'encoder_blocks': 5},
    },
}


class ConfigCompiler:
    """
    配置编译器

    将YAML配置编译为强类型 TrainConfig 对象
    """

    # ==========================================
    # 键名迁移映射（旧键 → 新键，均为点分路径）
    # ==========================================

    KEY_MIGRATIONS = {
        'lr': 'optim.learning_rate',
        'optim.lr': 'optim.learning_rate',
        'num_groups': 'model.O',
        'model.num_groups': 'model.O',
        'model.num_heads': 'model.heads',
        'batch_size': 'schedule.batch_size',
        'loss.gaussian_sigma': 'loss.sigma',
    }

    def __init__(self):
        self._migration_warnings: List[str] = []

    def compile(self, config_path: str) -> TrainConfig:
        """
        编译配置文件

        Args:
            config_path: YAML配置文件路径

        Returns:
            TrainConfig: 强类型配置对象

        Raises:
            ConfigValidationError: 配置校验失败
        """
        logger.info(f"Compiling config from: {config_path}")
        return self.compile_dict(self._load_yaml(config_path))

    def compile_dict(self, raw: Dict[str, Any]) -> TrainConfig:
        """编译已解析的配置字典（测试与检查点快照共用）"""
        self._migration_warnings = []
        raw = copy.deepcopy(raw or {})

        # 1. 键名迁移
        self._migrate_keys(raw)

        # 2. 合并预设
        merged = self._apply_preset(raw)

        # 3. 类型/范围校验
        self._validate_config(merged)

        # 4. 构建强类型对象
        config = self._build_config(merged, "")

        # 5. 计算版本hash（对完整配置计算，省略默认键与显式写出等价）
        config = _reversioned(config)
        version = config.version

        if self._migration_warnings:
            logger.warning("Config key migrations detected:")
            for warning in self._migration_warnings:
                logger.warning(f"  - {warning}")
            logger.warning("Please update your config file to use new keys.")

        logger.info(f"✅ Config compiled successfully (version: {version[:8]}...)")
        return config

    def compile_world(self, config_path: str) -> WorldConfig:
        """编译合成世界配置（顶层 world: 段，缺省时整个文件即为该段）"""
        raw = self._load_yaml(config_path)
        section = raw.get('world', raw)
        self._check_keys('world', section, WorldConfig)
        world = WorldConfig(**section)
        if world.n_species < 1 or world.cats_per_species < 2 or world.samples_per_species < 1:
            raise ConfigValidationError(
                "world.n_species must be >= 1, world.cats_per_species >= 2 and world.samples_per_species >= 1"
            )
        if world.image_size < 32:
            raise ConfigValidationError(f"world.image_size must be >= 32, got {world.image_size}")
        if not (0.0 <= world.invisible_rate < 1.0):
            raise ConfigValidationError(f"world.invisible_rate must be in [0, 1), got {world.invisible_rate}")
        return world

    # ==========================================
    # 步骤实现
    # ==========================================

    def _load_yaml(self, config_path: str) -> Dict[str, Any]:
        """读取YAML文件"""
        path = Path(config_path)
        if not path.exists():
            raise ConfigValidationError(f"Config file not found: {config_path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"Invalid YAML syntax: {e}")
        if raw is None:
            return {}
        if not isinstance(raw, dict):
            raise ConfigValidationError("Config file must contain a YAML dictionary")
        return raw

    def _migrate_keys(self, raw: Dict[str, Any]) -> None:
        """
        键名迁移（旧键 → 新键）

        修改raw字典（in-place），记录警告
        """
        for old, new in self.KEY_MIGRATIONS.items():
            old_parent, old_leaf = _split_path(raw, old)
            if old_parent is None or old_leaf not in old_parent:
                continue
            value = old_parent.pop(old_leaf)
            section, leaf = new.split('.', 1)
            target = raw.setdefault(section, {})
            if leaf not in target:
                target[leaf] = value
                self._migration_warnings.append(f"{old} → {new} (auto-migrated)")
            else:
                self._migration_warnings.append(f"{old} ignored, {new} already set")

    def _apply_preset(self, raw: Dict[str, Any]) -> Dict[str, Any]:
        top_level = raw.pop('preset', None)
        schedule = raw.get('schedule')
        preset = (schedule.get('preset') if isinstance(schedule, dict) else None) or top_level or 'desk'
        if preset not in PRESETS:
            raise ConfigValidationError(f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}")
        merged = copy.deepcopy(PRESETS[preset])
        for section, values in raw.items():
            if isinstance(values, dict) and section in SECTIONS:
                merged.setdefault(section, {}).update(values)
            else:
                merged[section] = values
        merged.setdefault('schedule', {})['preset'] = preset
        return merged

    def _check_keys(self, section: str, values: Any, cls) -> None:
        if not isinstance(values, dict):
            raise ConfigValidationError(f"Config section '{section}' must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigValidationError(f"Unknown config keys in '{section}': {', '.join(unknown)}")

    def _validate_config(self, raw: Dict[str, Any]) -> None:
        """
        配置校验

        检查：
        - 段名/键名合法
        - 取值范围
        - 网络几何一致（热图边长 = 8 × 编码器输出边长）
        """
        for section, values in raw.items():
            if section == 'seed':
                if not isinstance(values, int) or values < 0:
                    raise ConfigValidationError(f"seed must be a non-negative integer, got {values}")
                continue
            if section not in SECTIONS:
                raise ConfigValidationError(f"Unknown config section: {section}")
            self._check_keys(section, values, SECTIONS[section])

        model = ModelConfig(**raw.get('model', {}))
        loss = LossConfig(**raw.get('loss', {}))
        schedule = ScheduleConfig(**raw.get('schedule', {}))
        data = DataConfig(**raw.get('data', {}))
        optim = OptimConfig(**_tupled(raw.get('optim', {})))

        valid_modes = [m.value for m in PipelineMode]
        if model.mode not in valid_modes:
            raise ConfigValidationError(f"model.mode must be one of {valid_modes}, got '{model.mode}'")
        for key in ('K', 'O', 'C', 'heads', 'self_layers', 'cross_layers', 'encoder_blocks',
                    'encoder_channels', 'head_channels', 'adapter_hidden', 'vision_adapter_hidden', 'ffn_dim'):
            if getattr(model, key) < 1:
                raise ConfigValidationError(f"model.{key} must be >= 1, got {getattr(model, key)}")
        if model.C0 < 8:
            raise ConfigValidationError(f"model.C0 must be >= 8, got {model.C0}")
        if model.d % model.heads != 0:
            raise ConfigValidationError(f"model.d={model.d} must be divisible by model.heads={model.heads}")
        if not (0.0 <= model.dropout < 1.0):
            raise ConfigValidationError(f"model.dropout must be in [0, 1), got {model.dropout}")
        factor = 2 ** model.encoder_blocks
        if model.image_size < 32 or model.image_size % factor != 0:
            raise ConfigValidationError(
                f"model.image_size must be >= 32 and divisible by 2^encoder_blocks={factor}, got {model.image_size}"
            )

        if loss.sigma <= 0:
            raise ConfigValidationError(f"loss.sigma must be > 0, got {loss.sigma}")
        if loss.alpha < 0 or loss.beta < 0:
            raise ConfigValidationError(f"loss.alpha and loss.beta must be >= 0, got {loss.alpha}, {loss.beta}")

        if optim.learning_rate <= 0:
            raise ConfigValidationError(f"optim.learning_rate must be > 0, got {optim.learning_rate}")
        if any(not (0.0 < m <= 1.0) for m in optim.decay_milestones):
            raise ConfigValidationError(f"optim.decay_milestones must lie in (0, 1], got {optim.decay_milestones}")

        if schedule.steps is None and schedule.epochs is None:
            raise ConfigValidationError("schedule.steps or schedule.epochs must be set")
        if schedule.steps is not None and schedule.steps < 1:
            raise ConfigValidationError(f"schedule.steps must be >= 1, got {schedule.steps}")
        if schedule.batch_size < 1 or schedule.log_every < 1 or schedule.checkpoint_every < 1:
            raise ConfigValidationError("schedule.batch_size, log_every and checkpoint_every must be >= 1")

        valid_assign = [m.value for m in AssignmentMode]
        if data.assignment not in valid_assign:
            raise ConfigValidationError(f"data.assignment must be one of {valid_assign}, got '{data.assignment}'")
        if data.workers < 1:
            raise ConfigValidationError(f"data.workers must be >= 1, got {data.workers}")

        logger.debug("Config validation passed")

    @staticmethod
    def _compute_version(raw: Dict[str, Any]) -> str:
        """
        计算配置版本hash

        对合并后的配置做规范化 JSON 序列化后取 SHA256
        """
        config_str = json.dumps(raw, sort_keys=True, default=list)
        return hashlib.sha256(config_str.encode('utf-8')).hexdigest()[:16]

    def _build_config(self, raw: Dict[str, Any], version: str) -> TrainConfig:
        return TrainConfig(
            model=ModelConfig(**raw.get('model', {})),
            loss=LossConfig(**raw.get('loss', {})),
            optim=OptimConfig(**_tupled(raw.get('optim', {}))),
            schedule=ScheduleConfig(**raw.get('schedule', {})),
            data=DataConfig(**raw.get('data', {})),
            seed=int(raw.get('seed', 0)),
            version=version,
        )


# ==========================================
# 工具函数
# ==========================================

def _split_path(raw: Dict[str, Any], dotted: str):
    parts = dotted.split('.')
    node = raw
    for part in parts[:-1]:
        node = node.get(part) if isinstance(node, dict) else None
        if not isinstance(node, dict):
            return None, None
    return node, parts[-1]


def _tupled(optim: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(optim)
    if 'decay_milestones' in out:
        out['decay_milestones'] = tuple(out['decay_milestones'])
    return out


def train_config_from_dict(snapshot: Dict[str, Any]) -> TrainConfig:
    """
    从检查点快照（TrainConfig.to_dict 的输出）还原配置

    快照已经过编译校验，这里只重建对象、保留原 version
    """
    try:
        return TrainConfig(
            model=ModelConfig(**snapshot['model']),
            loss=LossConfig(**snapshot['loss']),
            optim=OptimConfig(**_tupled(snapshot['optim'])),
            schedule=ScheduleConfig(**snapshot['schedule']),
            data=DataConfig(**snapshot['data']),
            seed=int(snapshot.get('seed', 0)),
            version=snapshot.get('version', ''),
        )
    except (KeyError, TypeError) as e:
        raise ConfigValidationError(f"Invalid config snapshot: {e}")


def with_overrides(config: TrainConfig, section: str, **values) -> TrainConfig:
    """
    替换某一段中的若干键（CLI 覆盖、消融实验用）

    覆盖后重新计算 version，保证不同变体的检查点可区分
    """
    if section not in SECTIONS:
        raise ConfigValidationError(f"Unknown config section: {section}")
    current = getattr(config, section)
    known = {f.name for f in fields(current)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigValidationError(f"Unknown config keys in '{section}': {', '.join(unknown)}")
    return _reversioned(replace(config, **{section: replace(current, **values)}))


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    """替换顶层 seed（同样重新计算 version）"""
    if seed < 0:
        raise ConfigValidationError(f"seed must be a non-negative integer, got {seed}")
    return _reversioned(replace(config, seed=seed))


def _reversioned(config: TrainConfig) -> TrainConfig:
    snapshot = config.to_dict()
    snapshot.pop('version', None)
    return replace(config, version=ConfigCompiler._compute_version(snapshot))
