"""
KDSM Engine - 网络计算图

负责：
1. ModelParams：所有可学习张量（按名字存取，确定性初始化）
2. 基础组件：vision_encode / keypoint_adapter / vkra_forward / merge_residual /
   vision_head / vision_adapter
3. 两条前向路径：
   - baseline_forward：H = T′ × V（K 通道）
   - kdsm_forward：encoder → VKRA → 残差合并 → head(O 通道) → vision adapter；
     logits_P = T′ × V′

设计原则：
- 文本编码器冻结：raw 嵌入是常量
- 每个参数的初始值只由 (seed, 参数名) 决定 → 两种模式的共享组件初始权重逐位相同
- dropout 只在传入 rng（训练模式）时生效
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from models.enums import PipelineMode
from models.errors import ConfigValidationError, DimensionError, UsageError
from models.keypoint_types import HeatmapStack, PromptBatch
from models.train_config import ModelConfig
from .attention import (
    attention_layer, attention_layer_shapes, decoder_layer, decoder_layer_shapes, sub_params,
)
from .autograd import Tensor, as_tensor
from .layers import conv2d, deconv2d, layer_norm, linear

logger = logging.getLogger(__name__)

HEAD_BLOCKS = 3


# ==========================================
# 参数
# ==========================================

def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """按配置列出全部参数形状（名字 → 形状）"""
    shapes: Dict[str, Tuple[int, ...]] = {}

    c_in = cfg.image_channels
    for i in range(cfg.encoder_blocks):
        shapes[f'encoder.conv{i}.w'] = (cfg.encoder_channels, c_in, 3, 3)
        shapes[f'encoder.conv{i}.b'] = (cfg.encoder_channels,)
        c_in = cfg.encoder_channels

    shapes.update({
        'text_adapter.w1': (cfg.C0, cfg.adapter_hidden), 'text_adapter.b1': (cfg.adapter_hidden,),
        'text_adapter.w2': (cfg.adapter_hidden, cfg.C), 'text_adapter.b2': (cfg.C,),
    })

    c_in = cfg.encoder_channels
    for i in range(HEAD_BLOCKS):
        shapes[f'head.deconv{i}.w'] = (c_in, cfg.head_channels, 4, 4)
        shapes[f'head.deconv{i}.b'] = (cfg.head_channels,)
        c_in = cfg.head_channels

    if cfg.mode == PipelineMode.BASELINE.value:
        shapes['head.out.w'] = (cfg.C, cfg.head_channels, 1, 1)
        shapes['head.out.b'] = (cfg.C,)
        return shapes

    shapes['head.out.w'] = (cfg.O, cfg.head_channels, 1, 1)
    shapes['head.out.b'] = (cfg.O,)
    grid = cfg.heatmap_size * cfg.heatmap_size
    shapes.update({
        'vision_adapter.w1': (grid, cfg.vision_adapter_hidden),
        'vision_adapter.b1': (cfg.vision_adapter_hidden,),
        'vision_adapter.w2': (cfg.vision_adapter_hidden, cfg.C),
        'vision_adapter.b2': (cfg.C,),
    })

    if cfg.use_vkra:
        d, tokens = cfg.d, cfg.feature_size * cfg.feature_size
        shapes.update({'vkra.text_in.w': (cfg.C0, d), 'vkra.text_in.b': (d,)})
        for i in range(cfg.self_layers):
            shapes.update({f'vkra.text.{i}.{k}': v for k, v in attention_layer_shapes(d, cfg.ffn_dim).items()})
        shapes.update({'vkra.text_norm.gamma': (d,), 'vkra.text_norm.beta': (d,)})
        shapes.update({'vkra.vis_in.w': (cfg.encoder_channels, d), 'vkra.vis_in.b': (d,),
                       'vkra.pos': (tokens, d)})
        for i in range(cfg.cross_layers):
            shapes.update({f'vkra.cross.{i}.{k}': v for k, v in decoder_layer_shapes(d, cfg.ffn_dim).items()})
        shapes.update({'vkra.vis_out.w': (d, cfg.encoder_channels), 'vkra.vis_out.b': (cfg.encoder_channels,)})
    return shapes


def init_tensor(name: str, shape: Tuple[int, ...], seed: int) -> np.ndarray:
    """
    单个参数的初始值

    - 权重（w*）：Kaiming-uniform，界 √(6/fan_in)
    - 偏置（b*）与 LayerNorm beta：0；LayerNorm gamma：1
    - 位置嵌入：N(0, 0.02²)
    """
    leaf = name.rsplit('.', 1)[-1]
    rng = np.random.default_rng([seed, zlib.crc32(name.encode('utf-8'))])
    if leaf == 'gamma':
        return np.ones(shape)
    if leaf == 'beta' or leaf.startswith('b'):
        return np.zeros(shape)
    if leaf == 'pos':
        return 0.02 * rng.standard_normal(shape)
    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParams(Mapping[str, Tensor]):
    """
    可学习参数集合（名字有序）

    训练时由优化器原地更新 data；评估时只读
    """

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self._tensors = dict(sorted(tensors.items()))

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> 'ModelParams':
        validate_geometry(config)
        tensors = {name: Tensor(init_tensor(name, shape, seed), requires_grad=True, name=name)
                   for name, shape in param_shapes(config).items()}
        params = cls(config, tensors)
        logger.info(f"Initialized {config.mode} model: {len(params)} tensors, {params.n_parameters:,} parameters")
        return params

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> 'ModelParams':
        expected = param_shapes(config)
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise ConfigValidationError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"param[{name}]", arr.shape, shape)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def sub(self, prefix: str) -> Dict[str, Tensor]:
        return sub_params(self._tensors, prefix)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()


def validate_geometry(cfg: ModelConfig) -> None:
    """网络几何一致性检查"""
    factor = 2 ** cfg.encoder_blocks
    if cfg.image_size % factor != 0 or cfg.feature_size < 1:
        raise ConfigValidationError(
            f"image_size {cfg.image_size} must be divisible by 2^encoder_blocks = {factor}"
        )
    if cfg.d % cfg.heads != 0:
        raise ConfigValidationError(f"d={cfg.d} is not divisible by heads={cfg.heads}")


# ==========================================
# 组件
# ==========================================

def vision_encode(image: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """stride-2 卷积块（conv + bias + ReLU）× encoder_blocks，输出 C_f × S/2^n × S/2^n"""
    image = as_tensor(image)
    factor = 2 ** cfg.encoder_blocks
    if image.ndim != 3 or image.shape[1] % factor or image.shape[2] % factor:
        raise ConfigValidationError(f"vision_encode: image shape {image.shape} not divisible by {factor}")
    x = image
    for i in range(cfg.encoder_blocks):
        x = conv2d(x, params[f'encoder.conv{i}.w'], params[f'encoder.conv{i}.b'], stride=2, padding=1).relu()
    return x


def keypoint_adapter(raw: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """两层 MLP（C₀ → hidden → C），逐行独立"""
    raw = as_tensor(raw)
    w1 = params['text_adapter.w1']
    if raw.shape[-1] != w1.shape[0]:
        raise ConfigValidationError(f"keypoint_adapter: input width {raw.shape[-1]} != C0 {w1.shape[0]}")
    hidden = linear(raw, w1, params['text_adapter.b1']).relu()
    return linear(hidden, params['text_adapter.w2'], params['text_adapter.b2'])


def vkra_forward(raw_text: Tensor, vision_feat: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig,
                 rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """
    视觉-关键点关系感知

    文本：投影到 d → self_layers 层自注意力 → LayerNorm，得到 Y_t (K × d)
    视觉：h·w 个 token 投影到 d 并加位置嵌入 → cross_layers 层解码器（Y_t 作 key/value）
          → 投影回 C_f 并还原形状，得到 V_tilde

    Returns:
        (Y_t, V_tilde)
    """
    raw_text = as_tensor(raw_text)
    c_f, h, w = vision_feat.shape
    pos = params['vkra.pos']
    if raw_text.shape[-1] != params['vkra.text_in.w'].shape[0] or c_f != params['vkra.vis_in.w'].shape[0] \
            or pos.shape[0] != h * w:
        raise ConfigValidationError(
            f"vkra_forward: text {raw_text.shape} / vision {vision_feat.shape} do not match the configured widths"
        )
    rate = cfg.dropout

    y = linear(raw_text, params['vkra.text_in.w'], params['vkra.text_in.b'])
    for i in range(cfg.self_layers):
        y = attention_layer(y, y, y, sub_params(params, f'vkra.text.{i}.'), cfg.heads, rate, rng)
    y_t = layer_norm(y, params['vkra.text_norm.gamma'], params['vkra.text_norm.beta'])

    tokens = vision_feat.reshape(c_f, h * w).transpose(1, 0)
    x = linear(tokens, params['vkra.vis_in.w'], params['vkra.vis_in.b']) + pos
    for i in range(cfg.cross_layers):
        x = decoder_layer(x, y_t, sub_params(params, f'vkra.cross.{i}.'), cfg.heads, rate, rng)
    out = linear(x, params['vkra.vis_out.w'], params['vkra.vis_out.b'])
    v_tilde = out.transpose(1, 0).reshape(c_f, h, w)
    return y_t, v_tilde


def merge_residual(v: Tensor, v_tilde: Tensor) -> Tensor:
    """逐元素相加"""
    if v.shape != v_tilde.shape:
        raise DimensionError("merge_residual", v.shape, v_tilde.shape)
    return v + v_tilde


def vision_head(feat: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """3 个 stride-2 反卷积 + ReLU，再接 1×1 卷积到 N 通道（无末端激活）"""
    x = feat
    for i in range(HEAD_BLOCKS):
        w = params[f'head.deconv{i}.w']
        if x.shape[0] != w.shape[0]:
            raise ConfigValidationError(f"vision_head: feature channels {x.shape[0]} != {w.shape[0]}")
        x = deconv2d(x, w, params[f'head.deconv{i}.b'], stride=2, padding=1).relu()
    return conv2d(x, params['head.out.w'], params['head.out.b'])


def vision_adapter(h_raw: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """每个通道的 hei·wid 网格展平后过共享两层 MLP，输出 C × O"""
    n = h_raw.shape[0]
    flat = h_raw.reshape(n, -1)
    w1 = params['vision_adapter.w1']
    if flat.shape[1] != w1.shape[0]:
        raise DimensionError("vision_adapter", h_raw.shape, w1.shape)
    hidden = linear(flat, w1, params['vision_adapter.b1']).relu()
    return linear(hidden, params['vision_adapter.w2'], params['vision_adapter.b2']).transpose(1, 0)


# ==========================================
# 前向
# ==========================================

@dataclass
class ForwardOutputs:
    """
    前向结果

    H_raw: baseline 为 K 通道，KDSM 为 O 通道
    V_adapted / logits_P 只在 KDSM 模式下存在
    """
    H_raw: Tensor
    T_adapted: Tensor
    K_valid: int
    V_adapted: Optional[Tensor] = None
    logits_P: Optional[Tensor] = None
    Y_t: Optional[Tensor] = None

    def heatmaps(self) -> HeatmapStack:
        return HeatmapStack(channels=self.H_raw.data, valid=self.K_valid)


def _check_mode(cfg: ModelConfig, expected: PipelineMode) -> None:
    if cfg.mode != expected.value:
        raise UsageError(f"model is configured for mode '{cfg.mode}', not '{expected.value}'")


def baseline_forward(image, batch: PromptBatch, params: Mapping[str, Tensor], cfg: ModelConfig,
                     rng: Optional[np.random.Generator] = None) -> ForwardOutputs:
    """H = T′ × V，V 为 head 输出的 C × (hei·wid)"""
    _check_mode(cfg, PipelineMode.BASELINE)
    t_adapted = keypoint_adapter(batch.raw, params)
    v = vision_head(vision_encode(image, params, cfg), params)
    c, hei, wid = v.shape
    h = (t_adapted @ v.reshape(c, hei * wid)).reshape(batch.K, hei, wid)
    return ForwardOutputs(H_raw=h, T_adapted=t_adapted, K_valid=batch.K_valid)


def kdsm_forward(image, batch: PromptBatch, params: Mapping[str, Tensor], cfg: ModelConfig,
                 rng: Optional[np.random.Generator] = None) -> ForwardOutputs:
    """
    KDSM 前向

    use_vkra 关闭时跳过关系感知模块（组件消融）
    """
    _check_mode(cfg, PipelineMode.KDSM)
    v = vision_encode(image, params, cfg)
    y_t = None
    if cfg.use_vkra:
        y_t, v_tilde = vkra_forward(batch.raw, v, params, cfg, rng)
        v = merge_residual(v, v_tilde)
    h_raw = vision_head(v, params)
    v_adapted = vision_adapter(h_raw, params)
    t_adapted = keypoint_adapter(batch.raw, params)
    logits = t_adapted @ v_adapted
    return ForwardOutputs(H_raw=h_raw, T_adapted=t_adapted, K_valid=batch.K_valid,
                          V_adapted=v_adapted, logits_P=logits, Y_t=y_t)


class KeypointNetwork:
    """按模式分派前向的网络封装"""

    def __init__(self, params: ModelParams):
        self.params = params
        self.config = params.config

    @property
    def mode(self) -> PipelineMode:
        return PipelineMode(self.config.mode)

    def forward(self, image, batch: PromptBatch, rng: Optional[np.random.Generator] = None) -> ForwardOutputs:
        if self.mode == PipelineMode.BASELINE:
            return baseline_forward(image, batch, self.params, self.config, rng)
        return kdsm_forward(image, batch, self.params, self.config, rng)
