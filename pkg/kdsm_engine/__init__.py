"""
KDSM Engine - 开放词表关键点检测引擎

核心模块：
- autograd / layers / attention: 反向自动微分与网络层
- text_embeddings: prompt 构造、合成文本编码器、KEMB 嵌入表
- heatmap_codec: 高斯热图编码与 argmax 解码
- grouping: 约束 K-means 与域分布矩阵
- network: baseline / KDSM 前向
- matching: 预测分布矩阵、匹配损失、通道重排、推理分配
- optimizer: Adam + 阶梯学习率
- checkpoint_store: KCKP 检查点与 KGRP 分组文件
- config_compiler: YAML → TrainConfig
- trainer: 训练循环（依赖 synthworld，按需导入）
"""

from .autograd import Tensor, backward
from .text_embeddings import build_prompt, build_prompts, embed_batch, make_source
from .heatmap_codec import decode_argmax, encode_gaussian
from .grouping import build_domain_matrix, constrained_kmeans
from .network import KeypointNetwork, ModelParams
from .matching import assign, greedy_assign, max_value_assign, predict_P
from .checkpoint_store import Checkpoint, load_checkpoint, save_checkpoint
from .config_compiler import ConfigCompiler

__all__ = [
    'Tensor',
    'backward',
    'build_prompt',
    'build_prompts',
    'embed_batch',
    'make_source',
    'decode_argmax',
    'encode_gaussian',
    'build_domain_matrix',
    'constrained_kmeans',
    'KeypointNetwork',
    'ModelParams',
    'assign',
    'greedy_assign',
    'max_value_assign',
    'predict_P',
    'Checkpoint',
    'load_checkpoint',
    'save_checkpoint',
    'ConfigCompiler',
]


def create_trainer(config_path: str, samples, **kwargs):
    """
    从配置文件创建训练器

    Args:
        config_path: YAML 配置路径
        samples: 训练样本
    """
    from .trainer import Trainer
    return Trainer(ConfigCompiler().compile(config_path), samples, **kwargs)
