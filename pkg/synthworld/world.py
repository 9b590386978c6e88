"""
SynthWorld - 物种模板与样本渲染

负责：
1. gen_world：从共享类别词表生成物种模板（同名类别跨物种复用同一图案）
2. render_sample：随机相似变换 + 在噪声背景上盖章式绘制各类别图案
3. 关键点 bbox（真值关键点外接框，外扩 10%）

设计原则：
- 世界与样本都是 (配置, seed) 的纯函数
- 每个类别图案为 5×5，中心像素是唯一最大值（=1.0）
- 关键点真值取整到像素中心，盖章中心与真值重合
- 图像按 8 位量化，内存中的样本与磁盘上的 PGM 完全一致
"""

import logging
import zlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from kdsm_engine.text_embeddings import build_prompts
from models.errors import ConfigValidationError
from models.keypoint_types import KeypointSet, Sample, SpeciesTemplate

logger = logging.getLogger(__name__)

# 共享类别词表：名字 → 单位正方形中的标准锚点
VOCABULARY: Tuple[Tuple[str, Tuple[float, float]], ...] = (
    ("left eye", (0.32, 0.28)),
    ("right eye", (0.68, 0.28)),
    ("nose", (0.50, 0.42)),
    ("mouth", (0.50, 0.56)),
    ("left ear", (0.20, 0.14)),
    ("right ear", (0.80, 0.14)),
    ("neck", (0.50, 0.70)),
    ("tail base", (0.50, 0.86)),
    ("left front paw", (0.18, 0.62)),
    ("right front paw", (0.82, 0.62)),
    ("left hind paw", (0.22, 0.86)),
    ("right hind paw", (0.78, 0.86)),
)

ANIMALS = (
    "fox", "dog", "cat", "giraffe", "zebra", "horse", "bear", "lion",
    "wolf", "deer", "panda", "tiger", "rabbit", "sheep", "monkey", "otter",
)

PATTERN_SIZE = 5
PATTERN_RADIUS = PATTERN_SIZE // 2
LAYOUT_JITTER = 0.03
BACKGROUND = 0.1


def category_names() -> List[str]:
    return [name for name, _ in VOCABULARY]


def pattern_for(style: int) -> np.ndarray:
    """
    图案 style 的 5×5 模板

    外围像素取 {0, 0.45..0.8} 中的值，中心为 1.0
    """
    rng = np.random.default_rng([1009, style])
    mask = rng.random((PATTERN_SIZE, PATTERN_SIZE)) < 0.55
    levels = rng.uniform(0.45, 0.8, size=(PATTERN_SIZE, PATTERN_SIZE))
    stamp = np.where(mask, levels, 0.0)
    stamp[PATTERN_RADIUS, PATTERN_RADIUS] = 1.0
    return stamp


def gen_world(n_species: int, cats_per_species: int, seed: int,
              max_categories: Optional[int] = None) -> List[SpeciesTemplate]:
    """
    生成物种模板

    Args:
        n_species: 物种数
        cats_per_species: 每个物种的类别数
        seed: 随机种子
        max_categories: O（每个物种类别数的上限），可选

    Raises:
        ConfigValidationError: 词表不足或类别数超过 O
    """
    if cats_per_species > len(VOCABULARY):
        raise ConfigValidationError(
            f"vocabulary has {len(VOCABULARY)} names, cannot give each species {cats_per_species} categories"
        )
    if max_categories is not None and cats_per_species > max_categories:
        raise ConfigValidationError(f"cats_per_species={cats_per_species} exceeds O={max_categories}")
    if cats_per_species < 2:
        raise ConfigValidationError(f"cats_per_species must be >= 2, got {cats_per_species}")
    if n_species > 2 * len(ANIMALS):
        raise ConfigValidationError(f"at most {2 * len(ANIMALS)} species are available, got {n_species}")

    rng = np.random.default_rng(seed)
    templates = []
    for i in range(n_species):
        lap, idx_animal = divmod(i, len(ANIMALS))
        suffix = "face" if (i + lap) % 2 == 0 else "body"
        name = f"{ANIMALS[idx_animal]} {suffix}"
        chosen = np.sort(rng.choice(len(VOCABULARY), size=cats_per_species, replace=False))
        jitter = rng.normal(0.0, LAYOUT_JITTER, size=(cats_per_species, 2))
        layout = []
        for idx, (dx, dy) in zip(chosen, jitter):
            ax, ay = VOCABULARY[idx][1]
            layout.append((float(np.clip(ax + dx, 0.08, 0.92)), float(np.clip(ay + dy, 0.08, 0.92))))
        templates.append(SpeciesTemplate(
            name=name,
            categories=tuple(VOCABULARY[idx][0] for idx in chosen),
            base_layout=tuple(layout),
            render_style=tuple(int(idx) for idx in chosen),
        ))
    logger.info(f"Generated world: {n_species} species x {cats_per_species} categories (seed={seed})")
    return templates


def keypoint_bbox(coords: np.ndarray, dilation: float = 0.1) -> Tuple[float, float, float, float]:
    """关键点外接框，宽高各外扩 dilation（两侧均分），最小边长 1 像素"""
    x0, y0 = coords.min(axis=0)
    x1, y1 = coords.max(axis=0)
    w = max(x1 - x0, 1.0)
    h = max(y1 - y0, 1.0)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    half_w = w * (1.0 + dilation) / 2.0
    half_h = h * (1.0 + dilation) / 2.0
    return (float(cx - half_w), float(cy - half_h), float(cx + half_w), float(cy + half_h))


def _place_layout(layout: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """随机相似变换（缩放 0.8–1.2，旋转 ±30°，平移保证在画面内），返回整数像素坐标"""
    margin = PATTERN_RADIUS + 1
    scale = rng.uniform(0.8, 1.2)
    theta = np.deg2rad(rng.uniform(-30.0, 30.0))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centered = (layout - 0.5) @ rot.T
    u = rng.random(2)
    while True:
        pts = centered * scale * size
        lo = margin - pts.min(axis=0)
        hi = (size - 1 - margin) - pts.max(axis=0)
        if np.all(hi >= lo):
            break
        scale *= 0.9
    center = lo + u * (hi - lo)
    return np.clip(np.round(pts + center), margin, size - 1 - margin)


def render_sample(template: SpeciesTemplate, instance_seed: int, size: int = 64,
                  invisible_rate: float = 0.1, noise_std: float = 0.03,
                  sample_id: int = -1) -> Sample:
    """
    渲染单个样本

    Args:
        template: 物种模板
        instance_seed: 实例种子
        size: 图像边长 S（≥ 32）

    Returns:
        Sample（图像 1×S×S，取值 [0,1]，8 位量化）
    """
    if size < 32:
        raise ConfigValidationError(f"image size must be >= 32, got {size}")
    rng = np.random.default_rng([instance_seed, zlib.crc32(template.name.encode('utf-8'))])
    coords = _place_layout(np.asarray(template.base_layout), size, rng)
    visible = rng.random(len(coords)) >= invisible_rate

    image = np.clip(BACKGROUND + rng.normal(0.0, noise_std, size=(size, size)), 0.0, 1.0)
    r = PATTERN_RADIUS
    for (x, y), style, shown in zip(coords.astype(int), template.render_style, visible):
        if not shown:
            continue
        region = image[y - r:y + r + 1, x - r:x + r + 1]
        np.maximum(region, pattern_for(style), out=region)
    image = np.round(image * 255.0) / 255.0

    kps = KeypointSet(coords=coords, visible=visible, bbox=keypoint_bbox(coords))
    return Sample(image=image[None, :, :], kps=kps, species=template.name,
                  prompts=build_prompts(template.name, template.categories), sample_id=sample_id)


def templates_by_name(world: Sequence[SpeciesTemplate]) -> Dict[str, SpeciesTemplate]:
    return {t.name: t for t in world}
