"""
SynthWorld - 数据集目录读写

目录布局：
    world.json                      物种模板 + 生成配置
    samples/NNNN.pgm                8 位二进制 PGM
    samples/NNNN.json               species / prompts / keypoints / visible / bbox
    splits/setting{A,B}_fold{f}.json

负责：
1. generate_dataset：生成世界、渲染全部样本、生成两种设置的划分并落盘
2. Dataset：按 id 读取样本（带缓存）、按划分取样本
3. PGM 读写（Pillow）

设计原则：
- 样本 id = 物种序号 × samples_per_species + j；实例种子由 (世界种子, id) 决定
- 渲染可多线程（executor.map 保序），结果与单线程完全一致
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from models.enums import Setting
from models.errors import DataError
from models.keypoint_types import KeypointSet, Sample, SpeciesTemplate, SplitPlan
from models.train_config import WorldConfig
from kdsm_engine.text_embeddings import build_prompts
from .splits import make_splits
from .world import gen_world, render_sample

logger = logging.getLogger(__name__)


# ==========================================
# PGM
# ==========================================

def write_pgm(image: np.ndarray, path: str) -> None:
    """写出 8 位 PGM（image 为 1×S×S 或 S×S，取值 [0,1]）"""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    pixels = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')


def read_pgm(path: str) -> np.ndarray:
    """
    读取灰度图像，返回 1×H×W float64，取值 [0,1]

    Raises:
        DataError: 文件不存在或无法解析
    """
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert('L'), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return (pixels / 255.0)[None, :, :]


# ==========================================
# 样本
# ==========================================

def sample_record(sample: Sample) -> Dict:
    return {
        'sample_id': sample.sample_id,
        'species': sample.species,
        'categories': sample.categories,
        'prompts': [p.rendered for p in sample.prompts],
        'keypoints': sample.kps.to_dict(),
    }


def _split_path(root: Path, setting: str, fold: int) -> Path:
    return root / "splits" / f"setting{setting}_fold{fold}.json"


class Dataset:
    """
    磁盘数据集视图

    样本按需加载并缓存；未知 id 抛 DataError
    """

    def __init__(self, root: str):
        self.root = Path(root)
        world_file = self.root / "world.json"
        if not world_file.exists():
            raise DataError(f"not a dataset directory (missing world.json): {root}")
        meta = json.loads(world_file.read_text(encoding='utf-8'))
        self.world: List[SpeciesTemplate] = [SpeciesTemplate.from_dict(t) for t in meta['templates']]
        self.world_config = WorldConfig(**meta.get('config', {}))
        self.sample_ids: List[int] = [int(i) for i in meta['sample_ids']]
        self._known = set(self.sample_ids)
        self._cache: Dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self.sample_ids)

    def sample(self, sample_id: int) -> Sample:
        if sample_id not in self._known:
            raise DataError(f"unknown sample id {sample_id} in {self.root}")
        if sample_id not in self._cache:
            stem = self.root / "samples" / f"{sample_id:04d}"
            record = json.loads(stem.with_suffix('.json').read_text(encoding='utf-8'))
            image = read_pgm(str(stem.with_suffix('.pgm')))
            self._cache[sample_id] = Sample(
                image=image,
                kps=KeypointSet.from_dict(record['keypoints']),
                species=record['species'],
                prompts=build_prompts(record['species'], record['categories']),
                sample_id=sample_id,
            )
        return self._cache[sample_id]

    def samples(self, ids: Sequence[int]) -> List[Sample]:
        return [self.sample(int(i)) for i in ids]

    def split(self, setting, fold: int) -> SplitPlan:
        setting = setting.value if isinstance(setting, Setting) else str(setting)
        path = _split_path(self.root, setting, fold)
        if not path.exists():
            raise DataError(f"split not found: Setting {setting} fold {fold} ({path})")
        plan = SplitPlan.from_dict(json.loads(path.read_text(encoding='utf-8')))
        unknown = [i for i in plan.train_samples + plan.test_samples if i not in self._known]
        if unknown:
            raise DataError(f"split {path.name} references unknown samples {unknown[:5]}")
        return plan

    def side_samples(self, plan: SplitPlan, side: str) -> List[Sample]:
        """划分一侧的样本，prompt 只保留该侧的 (物种, 类别)"""
        ids = plan.train_samples if side == 'train' else plan.test_samples
        out = []
        for s in self.samples(ids):
            cats = plan.categories_for(s.species, side)
            if cats:
                out.append(s.restrict(cats))
        return out


# ==========================================
# 生成
# ==========================================

def generate_dataset(world_cfg: WorldConfig, out_dir: str,
                     max_categories: Optional[int] = None) -> Dataset:
    """
    生成完整数据集并落盘

    Args:
        world_cfg: 生成配置
        out_dir: 输出目录（不存在则创建）
        max_categories: O，可选，用于提前拦截类别数过多

    Returns:
        Dataset
    """
    root = Path(out_dir)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(parents=True, exist_ok=True)

    world = gen_world(world_cfg.n_species, world_cfg.cats_per_species, world_cfg.seed,
                      max_categories=max_categories)
    jobs = []
    for s_idx, template in enumerate(world):
        for j in range(world_cfg.samples_per_species):
            sample_id = s_idx * world_cfg.samples_per_species + j
            jobs.append((template, sample_id))

    def _render(job):
        template, sample_id = job
        sample = render_sample(template, world_cfg.seed * 100000 + sample_id,
                               size=world_cfg.image_size,
                               invisible_rate=world_cfg.invisible_rate,
                               noise_std=world_cfg.noise_std,
                               sample_id=sample_id)
        stem = root / "samples" / f"{sample_id:04d}"
        write_pgm(sample.image, str(stem.with_suffix('.pgm')))
        stem.with_suffix('.json').write_text(json.dumps(sample_record(sample), indent=2), encoding='utf-8')
        return sample_id

    with ThreadPoolExecutor(max_workers=max(1, world_cfg.workers)) as pool:
        sample_ids = list(pool.map(_render, jobs))

    index: Dict[str, List[int]] = {}
    for template, sample_id in jobs:
        index.setdefault(template.name, []).append(sample_id)

    n_written = 0
    for setting in (Setting.A, Setting.B):
        if setting == Setting.B and len(world) < 5:
            logger.warning(f"⚠️  Skipping Setting B splits: world has only {len(world)} species")
            continue
        plans = make_splits(world, setting, n_folds=world_cfg.n_folds, seed=world_cfg.seed,
                            sample_index=index, test_instance_ratio=world_cfg.test_instance_ratio)
        for plan in plans:
            _split_path(root, setting.value, plan.fold).write_text(
                json.dumps(plan.to_dict(), indent=2), encoding='utf-8')
            n_written += 1

    meta = {
        'config': asdict(world_cfg),
        'templates': [t.to_dict() for t in world],
        'sample_ids': sample_ids,
    }
    (root / "world.json").write_text(json.dumps(meta, indent=2), encoding='utf-8')
    logger.info(f"✅ Dataset written to {root}: {len(sample_ids)} samples, {n_written} splits")
    return Dataset(str(root))
