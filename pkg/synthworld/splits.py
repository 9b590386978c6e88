"""
SynthWorld - 零样本划分

Setting A（未见类别）：每个物种的类别按 ~70/30 划分为训练/测试，逐 fold 轮换；
                      同时每个物种的实例按 80/20 划分，测试图像不参与训练
Setting B（未见物种）：物种按 ~85/15 划分，逐 fold 轮换，使每个物种至少在一个 fold 中作为新物种

轮换规则：
    n_test = max(⌈ratio·n⌉, ⌈n/n_folds⌉)
    fold f（从 0 计）的测试块从 ⌊f·n/n_folds⌋ 开始，长度 n_test，越界回绕
"""

import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from models.enums import Setting
from models.errors import ConfigValidationError
from models.keypoint_types import SpeciesTemplate, SplitPlan

logger = logging.getLogger(__name__)

SETTING_A_TEST_RATIO = 0.3
SETTING_B_TEST_RATIO = 0.15
MIN_SPECIES_SETTING_B = 5


def _test_block(n: int, n_folds: int, fold_index: int, ratio: float) -> List[int]:
    n_test = max(math.ceil(ratio * n), math.ceil(n / n_folds))
    start = (fold_index * n) // n_folds
    return [(start + j) % n for j in range(n_test)]


def _instance_split(ids: Sequence[int], ratio: float, rng: np.random.Generator):
    order = list(rng.permutation(len(ids)))
    n_test = max(1, int(round(ratio * len(ids)))) if len(ids) > 1 else 0
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


def make_splits(world: Sequence[SpeciesTemplate], setting, n_folds: int = 5, seed: int = 0,
                sample_index: Optional[Dict[str, List[int]]] = None,
                test_instance_ratio: float = 0.2) -> List[SplitPlan]:
    """
    生成 n_folds 个划分

    Args:
        world: 物种模板
        setting: Setting.A / Setting.B（或 "A"/"B"）
        n_folds: fold 数
        seed: 随机种子
        sample_index: 物种 → 样本 id 列表（给出时划分中带上样本成员）
        test_instance_ratio: Setting A 中每个物种留作测试的实例比例

    Raises:
        ConfigValidationError: 物种或类别太少
    """
    setting = Setting(setting) if isinstance(setting, str) else setting
    if n_folds < 1:
        raise ConfigValidationError(f"n_folds must be >= 1, got {n_folds}")
    sample_index = sample_index or {}
    rng = np.random.default_rng([seed, 0 if setting == Setting.A else 1])
    plans = []

    if setting == Setting.A:
        for t in world:
            if len(t.categories) < 2:
                raise ConfigValidationError(f"Setting A needs >= 2 categories per species, '{t.name}' has {len(t.categories)}")
        perms = {t.name: [t.categories[i] for i in rng.permutation(len(t.categories))] for t in world}
        instances = {t.name: _instance_split(sample_index.get(t.name, []), test_instance_ratio, rng) for t in world}
        for f in range(n_folds):
            train_pairs, test_pairs = [], []
            for t in world:
                held = set(perms[t.name][i] for i in _test_block(len(t.categories), n_folds, f, SETTING_A_TEST_RATIO))
                if len(held) >= len(t.categories):
                    raise ConfigValidationError(f"species '{t.name}' has too few categories for Setting A")
                train_pairs += [(t.name, c) for c in t.categories if c not in held]
                test_pairs += [(t.name, c) for c in t.categories if c in held]
            species = tuple(t.name for t in world)
            plans.append(SplitPlan(
                setting=setting.value, fold=f + 1,
                train_pairs=tuple(train_pairs), test_pairs=tuple(test_pairs),
                train_species=species, test_species=species,
                train_samples=tuple(sorted(i for t in world for i in instances[t.name][0])),
                test_samples=tuple(sorted(i for t in world for i in instances[t.name][1])),
            ))
    else:
        if len(world) < MIN_SPECIES_SETTING_B:
            raise ConfigValidationError(
                f"Setting B needs >= {MIN_SPECIES_SETTING_B} species, world has {len(world)}"
            )
        order = [world[i] for i in rng.permutation(len(world))]
        for f in range(n_folds):
            held = set(_test_block(len(order), n_folds, f, SETTING_B_TEST_RATIO))
            train = [t for i, t in enumerate(order) if i not in held]
            test = [t for i, t in enumerate(order) if i in held]
            train = sorted(train, key=lambda t: t.name)
            test = sorted(test, key=lambda t: t.name)
            plans.append(SplitPlan(
                setting=setting.value, fold=f + 1,
                train_pairs=tuple((t.name, c) for t in train for c in t.categories),
                test_pairs=tuple((t.name, c) for t in test for c in t.categories),
                train_species=tuple(t.name for t in train),
                test_species=tuple(t.name for t in test),
                train_samples=tuple(sorted(i for t in train for i in sample_index.get(t.name, []))),
                test_samples=tuple(sorted(i for t in test for i in sample_index.get(t.name, []))),
            ))

    logger.info(f"Built {len(plans)} Setting {setting.value} folds over {len(world)} species")
    return plans
