"""
SynthWorld - 可复现的合成关键点数据集

所有输出都是 (配置, seed) 的纯函数
"""

from .world import gen_world, render_sample, category_names, keypoint_bbox, pattern_for
from .splits import make_splits
from .augment import augment, augment_with
from .dataset_store import Dataset, generate_dataset, read_pgm, write_pgm

__all__ = [
    'gen_world',
    'render_sample',
    'category_names',
    'keypoint_bbox',
    'pattern_for',
    'make_splits',
    'augment',
    'augment_with',
    'Dataset',
    'generate_dataset',
    'read_pgm',
    'write_pgm',
]
