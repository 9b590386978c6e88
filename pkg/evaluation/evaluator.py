"""
评估层 - 零样本评估与单图推理

负责：
1. LoadedModel：从检查点还原配置、参数、分组与文本嵌入来源（只读）
2. predict：一张图 + 一组 prompt → 每个 prompt 的 (x, y)、置信度、所选通道
3. evaluate：划分测试侧逐样本预测并计分，统计 argmax 分配冲突
4. infer：读 PGM（任意方形尺寸，缩放到模型输入），坐标按比例映射回原图

设计原则：
- 评估模式关闭 dropout，结果确定
- 不修改检查点（参数从检查点复制）
- KDSM：按 P 的逐行最大值（默认）或贪心一对一分配选择通道；baseline：第 i 个通道即第 i 个 prompt
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from models.enums import AssignmentMode, PipelineMode
from models.errors import DataError, PromptValidationError, UsageError
from models.keypoint_types import HeatmapStack, PromptSpec, Sample, SplitPlan
from models.metric_report import FoldMetrics
from models.train_config import TrainConfig
from kdsm_engine.autograd import Tensor
from kdsm_engine.checkpoint_store import Checkpoint
from kdsm_engine.config_compiler import train_config_from_dict
from kdsm_engine.heatmap_codec import decode_argmax, to_image_coords
from kdsm_engine.matching import assign, max_value_assign, predict_P, reorder_heatmaps
from kdsm_engine.network import KeypointNetwork, ModelParams
from kdsm_engine.text_embeddings import EmbeddingSource, embed_batch
from kdsm_engine.trainer import build_source
from synthworld.dataset_store import read_pgm
from .evalkit import KeypointTally

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KeypointPrediction:
    """单个 prompt 的预测（图像像素坐标）"""
    species: str
    category: str
    x: float
    y: float
    score: float
    group: int
    valid: bool

    def to_dict(self) -> dict:
        return {
            'species': self.species,
            'category': self.category,
            'x': self.x,
            'y': self.y,
            'score': self.score,
            'group': self.group,
            'valid': self.valid,
        }


@dataclass(frozen=True)
class SamplePrediction:
    """一张图的预测结果"""
    keypoints: List[KeypointPrediction]
    collision: bool                          # 逐行 argmax 是否有两个 prompt 落到同一通道

    @property
    def coords(self) -> np.ndarray:
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64).reshape(-1, 2)

    @property
    def valid(self) -> np.ndarray:
        return np.array([k.valid for k in self.keypoints], dtype=bool)


class LoadedModel:
    """检查点的只读视图"""

    def __init__(self, ckpt: Checkpoint, source: Optional[EmbeddingSource] = None):
        self.config: TrainConfig = train_config_from_dict(ckpt.config)
        self.mode = PipelineMode(self.config.model.mode)
        self.grouping = ckpt.grouping
        self.meta = dict(ckpt.meta)
        self.network = KeypointNetwork(ModelParams.from_arrays(self.config.model, ckpt.param_arrays))
        self.source = source or build_source(self.config)

    def predict(self, image, prompts: Sequence[PromptSpec],
                assignment_mode: Union[AssignmentMode, str] = AssignmentMode.MAX) -> SamplePrediction:
        """
        单图预测（image 尺寸须等于模型输入尺寸）

        Raises:
            PromptValidationError: prompt 为空
            CapacityError: prompt 数超过 K
        """
        if not prompts:
            raise PromptValidationError("at least one prompt is required")
        cfg = self.config.model
        batch = embed_batch(prompts, self.source, cfg.K)
        out = self.network.forward(image, batch, rng=None)
        n = batch.K_valid

        if self.mode == PipelineMode.KDSM:
            p = predict_P(out.logits_P.data).p[:n]
            groups = list(assign(p, assignment_mode).l)
            collision = max_value_assign(p).has_collision()
            channels = reorder_heatmaps(Tensor(out.H_raw.data), groups, n_out=n).data
        else:
            groups = list(range(n))
            collision = False
            channels = out.H_raw.data[:n]

        decoded = decode_argmax(HeatmapStack(channels=channels, valid=n))
        coords = to_image_coords(decoded, cfg.heatmap_size, cfg.heatmap_size, cfg.image_size)
        keypoints = [
            KeypointPrediction(species=prompt.species, category=prompt.keypoint_category,
                               x=float(xy[0]), y=float(xy[1]), score=d.score,
                               group=int(g), valid=d.valid)
            for prompt, xy, d, g in zip(prompts, coords, decoded, groups)
        ]
        return SamplePrediction(keypoints=keypoints, collision=collision)


def _resolve_mode(model: LoadedModel, assignment_mode) -> AssignmentMode:
    if assignment_mode is None:
        return AssignmentMode(model.config.data.assignment)
    return AssignmentMode(assignment_mode) if isinstance(assignment_mode, str) else assignment_mode


def predict_samples(model: LoadedModel, samples: Sequence[Sample],
                    assignment_mode=None) -> List[SamplePrediction]:
    mode = _resolve_mode(model, assignment_mode)
    return [model.predict(s.image, s.prompts, mode) for s in samples]


def evaluate(ckpt: Checkpoint, dataset, plan: SplitPlan, assignment_mode=None,
             expected_mode: Optional[str] = None, side: str = 'test') -> FoldMetrics:
    """
    在划分的一侧（默认测试侧）上评估

    Args:
        ckpt: 检查点
        dataset: synthworld.Dataset
        plan: 划分
        assignment_mode: max / greedy（默认取配置中的 data.assignment）
        expected_mode: 要求的训练模式（给出且不一致时报错）
        side: 'test' 或 'train'

    Raises:
        UsageError: 检查点模式与要求不一致
        DataError: 划分引用了未知样本
    """
    model = LoadedModel(ckpt)
    if expected_mode is not None and model.mode.value != expected_mode:
        raise UsageError(f"checkpoint was trained in '{model.mode.value}' mode, not '{expected_mode}'")
    mode = _resolve_mode(model, assignment_mode)
    samples = dataset.side_samples(plan, side)
    tally = KeypointTally()
    for sample, pred in zip(samples, predict_samples(model, samples, mode)):
        tally.add(pred.coords, sample.kps, sample.species, valid=pred.valid, collision=pred.collision)
    metrics = tally.to_fold_metrics(plan.fold, setting=plan.setting, assignment=mode.value)
    logger.info(f"Setting {plan.setting} fold {plan.fold} ({side}, {mode.value}): "
                f"PCK@0.2={metrics.pck_02:.4f} PCK@0.05={metrics.pck_005:.4f} NME={metrics.nme:.2f} "
                f"over {metrics.n_keypoints} keypoints, {metrics.collision_samples} collision samples")
    return metrics


def infer(ckpt: Checkpoint, image_path: str, prompts: Sequence[PromptSpec],
          assignment_mode=None) -> List[KeypointPrediction]:
    """
    单图推理

    任意方形尺寸的灰度图先线性缩放到模型输入尺寸，预测坐标再按同一比例映射回原图

    Raises:
        DataError: 图像不可读
        PromptValidationError / CapacityError: prompt 为空或超过 K
    """
    model = LoadedModel(ckpt)
    image = read_pgm(image_path)
    size = model.config.model.image_size
    height, width = image.shape[1:]
    if height != width:
        raise DataError(f"image must be square, got {width}x{height}")
    factor = width / size
    if width != size:
        image = ndimage.zoom(image[0], size / width, order=1)[None, :size, :size]
    pred = model.predict(image, prompts, _resolve_mode(model, assignment_mode))
    out = []
    for k in pred.keypoints:
        out.append(KeypointPrediction(species=k.species, category=k.category,
                                      x=k.x * factor, y=k.y * factor, score=k.score,
                                      group=k.group, valid=k.valid))
    return out
