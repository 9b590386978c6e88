"""
KDSM Engine - 训练循环

负责：
1. KDSM 模式：先对训练侧 (物种, 类别) 做约束聚类，得到 Grouping
2. 每步：取 batch → 增强 → 前向 → 损失（KDSM: α·L_match + β·MSE；baseline: 掩码 MSE）→ 反传 → Adam
3. 每步记录损失分量，保留最近 log_tail 条写入检查点
4. 周期性检查点；出现非有限 loss 时把最后一份有限状态写到 <out>.diverged.kckp 并抛 NumericFailure
5. 从检查点续训（参数 + Adam 矩 + 步数）

设计原则：
- 数据顺序、增强参数、dropout 掩码都只由 (seed, step) 决定 → 续训与不间断训练逐步一致
- 文本编码器冻结，嵌入是常量
- 训练集可以由调用方直接给出（测试、消融），也可由 Dataset + SplitPlan 得到
"""

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.enums import PipelineMode
from models.errors import ConfigValidationError, NumericFailure
from models.keypoint_types import PromptBatch, Sample, SplitPlan
from models.matching_types import Grouping
from models.train_config import TrainConfig
from synthworld.augment import augment
from .autograd import Tensor, backward
from .checkpoint_store import Checkpoint, save_checkpoint
from .config_compiler import train_config_from_dict
from .grouping import build_domain_matrix, constrained_kmeans
from .heatmap_codec import encode_gaussian
from .layers import softmax_rows
from .matching import heatmap_mse, reorder_heatmaps, total_loss
from .network import KeypointNetwork, ModelParams
from .optimizer import Adam
from .text_embeddings import EmbeddingSource, category_embeddings, embed_batch, make_source

logger = logging.getLogger(__name__)

# 冻结文本编码器的种子，与训练种子无关
TEXT_ENCODER_SEED = 0


def build_source(config: TrainConfig) -> EmbeddingSource:
    """按配置构造文本嵌入来源（合成编码器或 KEMB 表）"""
    return make_source(config.model.C0, TEXT_ENCODER_SEED,
                       table_path=config.data.embedding_table,
                       allow_synth_fallback=config.data.allow_synth_fallback)


def total_steps_for(config: TrainConfig, n_samples: int) -> int:
    """steps 优先；否则 epochs × ⌈n / batch⌉"""
    schedule = config.schedule
    if schedule.steps:
        return int(schedule.steps)
    if not schedule.epochs:
        raise ConfigValidationError("schedule needs either steps or epochs")
    return int(schedule.epochs) * max(1, math.ceil(n_samples / schedule.batch_size))


def cluster_pairs(pairs: Sequence[Tuple[str, str]], config: TrainConfig,
                  source: EmbeddingSource) -> Grouping:
    """对训练侧的 (物种, 类别) 做约束 K-means"""
    return constrained_kmeans(category_embeddings(pairs, source), config.model.O,
                              seed=config.seed,
                              max_iter=config.data.kmeans_max_iter,
                              n_init=config.data.kmeans_n_init)


@dataclass(frozen=True)
class StepLog:
    """单步损失记录"""
    step: int
    loss: float
    mse: float
    match: float
    lr: float

    def to_dict(self) -> Dict[str, float]:
        return {'step': self.step, 'loss': self.loss, 'mse': self.mse, 'match': self.match, 'lr': self.lr}


class Trainer:
    """
    单 fold 训练器

    用法：
        trainer = Trainer(config, samples, grouping=grouping, out_path="ck.kckp")
        ckpt = trainer.run()
    """

    def __init__(self, config: TrainConfig, samples: Sequence[Sample],
                 grouping: Optional[Grouping] = None,
                 source: Optional[EmbeddingSource] = None,
                 out_path: Optional[str] = None,
                 meta: Optional[Dict] = None):
        if not samples:
            raise ConfigValidationError("training set is empty")
        self.config = config
        self.mode = PipelineMode(config.model.mode)
        self.samples = list(samples)
        self.source = source or build_source(config)
        self.out_path = out_path
        self.meta = dict(meta or {})
        self.meta.setdefault('mode', self.mode.value)

        if self.mode == PipelineMode.KDSM and grouping is None:
            pairs = sorted({p.pair for s in self.samples for p in s.prompts})
            grouping = cluster_pairs(pairs, config, self.source)
        self.grouping = grouping

        self.params = ModelParams.initialize(config.model, config.seed)
        self.network = KeypointNetwork(self.params)
        self.total_steps = total_steps_for(config, len(self.samples))
        self.optimizer = Adam(self.params, config.optim, self.total_steps)
        self.step = 0
        self.log_tail: deque = deque(maxlen=config.schedule.log_tail)
        self._batches: Dict[Tuple[str, ...], PromptBatch] = {}
        self._orders: Dict[int, np.ndarray] = {}

    # ==========================================
    # 续训
    # ==========================================

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, samples: Sequence[Sample],
                        source: Optional[EmbeddingSource] = None,
                        out_path: Optional[str] = None) -> 'Trainer':
        """以检查点中的配置快照、参数、Adam 状态与步数继续训练"""
        config = train_config_from_dict(ckpt.config)
        trainer = cls(config, samples, grouping=ckpt.grouping, source=source,
                      out_path=out_path, meta=ckpt.meta)
        trainer.params = ModelParams.from_arrays(config.model, ckpt.param_arrays)
        trainer.network = KeypointNetwork(trainer.params)
        trainer.optimizer = Adam(trainer.params, config.optim, trainer.total_steps)
        trainer.optimizer.load_state_arrays(ckpt.optimizer_arrays)
        trainer.step = ckpt.step
        trainer.log_tail.extend(ckpt.log_tail)
        logger.info(f"Resuming {config.model.mode} training at step {ckpt.step}/{trainer.total_steps}")
        return trainer

    # ==========================================
    # 数据
    # ==========================================

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            rng = np.random.default_rng([self.config.seed, 1, epoch])
            self._orders[epoch] = rng.permutation(len(self.samples))
        return self._orders[epoch]

    def batch_indices(self, step: int) -> List[int]:
        """第 step 步（从 0 计）的样本下标；每个 epoch 一个固定排列，batch 可跨 epoch"""
        n = len(self.samples)
        size = self.config.schedule.batch_size
        out = []
        for pos in range(step * size, (step + 1) * size):
            epoch, offset = divmod(pos, n)
            out.append(int(self._epoch_order(epoch)[offset]))
        return out

    def batch_samples(self, step: int) -> List[Sample]:
        """取 batch 并做增强；workers > 1 时多线程增强，顺序不变"""
        cfg = self.config
        jobs = list(enumerate(self.batch_indices(step)))
        if not cfg.data.augment:
            return [self.samples[idx] for _, idx in jobs]

        def _augment(job):
            j, idx = job
            return augment(self.samples[idx], [cfg.seed, 2, step, j])

        if cfg.data.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.data.workers) as pool:
                return list(pool.map(_augment, jobs))
        return [_augment(job) for job in jobs]

    def prompt_batch(self, sample: Sample) -> PromptBatch:
        key = tuple(p.rendered for p in sample.prompts)
        if key not in self._batches:
            self._batches[key] = embed_batch(sample.prompts, self.source, self.config.model.K)
        return self._batches[key]

    # ==========================================
    # 损失
    # ==========================================

    def sample_loss(self, sample: Sample, rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Dict[str, float]]:
        """单个样本的损失与分量"""
        cfg = self.config
        size = cfg.model.heatmap_size
        batch = self.prompt_batch(sample)
        out = self.network.forward(sample.image, batch, rng)

        if self.mode == PipelineMode.BASELINE:
            g = encode_gaussian(sample.kps, cfg.model.K, size, size, cfg.loss.sigma, cfg.model.image_size)
            mse = heatmap_mse(out.H_raw, g, channels=batch.K_valid)
            return mse * cfg.loss.beta, {'mse': mse.item(), 'match': 0.0}

        d = build_domain_matrix(sample.prompts, self.grouping, cfg.model.K)
        g = encode_gaussian(sample.kps, cfg.model.O, size, size, cfg.loss.sigma, cfg.model.image_size)
        h = reorder_heatmaps(out.H_raw, d.selections, n_out=cfg.model.O)
        p = softmax_rows(out.logits_P)
        return total_loss(h, g, p, d, cfg.loss.alpha, cfg.loss.beta, cfg.loss.log_clamp)

    def train_step(self) -> StepLog:
        """执行一步并返回记录；loss 非有限时抛 NumericFailure（参数未更新）"""
        cfg = self.config
        step = self.step
        indices = self.batch_indices(step)
        total = None
        parts = {'mse': 0.0, 'match': 0.0}
        for j, sample in enumerate(self.batch_samples(step)):
            rng = np.random.default_rng([cfg.seed, 3, step, j])
            loss, sample_parts = self.sample_loss(sample, rng)
            total = loss if total is None else total + loss
            for key in parts:
                parts[key] += sample_parts[key] / len(indices)
        total = total * (1.0 / len(indices))

        value = total.item()
        if not np.isfinite(value):
            raise NumericFailure(f"non-finite loss {value} at step {step + 1}")

        backward(total)
        lr = self.optimizer.step()
        self.step += 1
        record = StepLog(step=self.step, loss=value, mse=parts['mse'], match=parts['match'], lr=lr)
        self.log_tail.append(record.to_dict())
        logger.debug(f"step {record.step}: loss={value:.6g} mse={record.mse:.6g} match={record.match:.6g}")
        return record

    # ==========================================
    # 主循环
    # ==========================================

    def checkpoint(self) -> Checkpoint:
        tensors = self.params.to_arrays()
        tensors.update(self.optimizer.state_arrays())
        return Checkpoint(config=self.config.to_dict(), tensors=tensors, grouping=self.grouping,
                          log_tail=list(self.log_tail), step=self.step, meta=dict(self.meta))

    def run(self, max_steps: Optional[int] = None) -> Checkpoint:
        """
        训练到 total_steps（或额外 max_steps 步）

        Returns:
            最终检查点（out_path 给出时同时落盘）

        Raises:
            NumericFailure: 出现非有限 loss
        """
        schedule = self.config.schedule
        end = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        logger.info(f"Training {self.mode.value} model: steps {self.step}→{end}, "
                    f"{len(self.samples)} samples, batch {schedule.batch_size}")

        while self.step < end:
            try:
                record = self.train_step()
            except NumericFailure:
                if self.out_path:
                    diverged = f"{self.out_path}.diverged.kckp"
                    save_checkpoint(self.checkpoint(), diverged)
                    logger.error(f"❌ Training diverged at step {self.step + 1}; last finite state → {diverged}")
                raise
            if record.step % schedule.log_every == 0 or record.step == end:
                logger.info(f"step {record.step}/{self.total_steps} loss={record.loss:.6f} "
                            f"mse={record.mse:.6f} match={record.match:.4f} lr={record.lr:.2e}")
            if self.out_path and schedule.checkpoint_every and record.step % schedule.checkpoint_every == 0 \
                    and record.step < end:
                save_checkpoint(self.checkpoint(), self.out_path)

        ckpt = self.checkpoint()
        if self.out_path:
            save_checkpoint(ckpt, self.out_path)
        logger.info(f"✅ Training finished at step {self.step}")
        return ckpt


def train(config: TrainConfig, dataset, plan: SplitPlan, out_path: Optional[str] = None,
          resume: Optional[Checkpoint] = None, grouping: Optional[Grouping] = None,
          extra_meta: Optional[Dict] = None) -> Checkpoint:
    """
    在某个划分的训练侧上训练

    Args:
        config: 训练配置
        dataset: synthworld.Dataset
        plan: 划分
        out_path: 检查点路径（可选）
        resume: 续训的检查点（可选，其配置快照优先）
        grouping: 预先计算的分组（可选，KDSM 模式）
        extra_meta: 额外写入检查点 meta 的字段
    """
    samples = dataset.side_samples(plan, 'train')
    meta = {'setting': plan.setting, 'fold': plan.fold, 'train_pairs': len(plan.train_pairs)}
    meta.update(extra_meta or {})
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, samples, out_path=out_path)
    else:
        trainer = Trainer(config, samples, grouping=grouping, out_path=out_path, meta=meta)
    return trainer.run()
