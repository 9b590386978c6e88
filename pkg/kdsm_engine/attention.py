"""
KDSM Engine - 注意力层

负责：
1. 多头缩放点积注意力（缩放 1/√(d/heads)）
2. pre-norm 注意力层：LN → MHA → 残差 → LN → FFN → 残差
3. 解码器层：自注意力 → 交叉注意力（文本特征作 key/value）→ FFN

参数约定（层内相对键名）：
    ln1.gamma / ln1.beta           注意力前 LayerNorm
    ln_kv.gamma / ln_kv.beta       交叉注意力 key/value 的 LayerNorm（可选）
    attn.wq|wk|wv|wo, attn.bq|bk|bv|bo
    ln2.gamma / ln2.beta           FFN 前 LayerNorm
    ffn.w1 / ffn.b1 / ffn.w2 / ffn.b2
解码器层在此基础上加 self. / cross. 前缀

dropout 作用于注意力权重之后和 FFN 每一层之后
"""

from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from models.errors import ConfigValidationError, DimensionError
from .autograd import Tensor
from .layers import dropout, layer_norm, linear, softmax_rows

Params = Mapping[str, Tensor]


def sub_params(params: Params, prefix: str) -> Dict[str, Tensor]:
    """取出某前缀下的参数并去掉前缀"""
    cut = len(prefix)
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix)}


def _check_heads(d: int, heads: int) -> int:
    if heads <= 0 or d % heads != 0:
        raise ConfigValidationError(f"attention: width {d} is not divisible by {heads} heads")
    return d // heads


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: Params, heads: int,
                         dropout_rate: float = 0.0,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    多头注意力（不含残差与归一化）

    Args:
        q: Lq × d
        k, v: Lk × d
    """
    lq, d = q.shape
    lk = k.shape[0]
    if k.shape[1] != d or v.shape != k.shape:
        raise DimensionError("multi_head_attention", q.shape, k.shape, v.shape)
    dh = _check_heads(d, heads)

    def split(x: Tensor, length: int) -> Tensor:
        return x.reshape(length, heads, dh).transpose(1, 0, 2)

    qh = split(linear(q, params['attn.wq'], params['attn.bq']), lq)
    kh = split(linear(k, params['attn.wk'], params['attn.bk']), lk)
    vh = split(linear(v, params['attn.wv'], params['attn.bv']), lk)

    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
    weights = dropout(softmax_rows(scores), dropout_rate, rng)
    context = (weights @ vh).transpose(1, 0, 2).reshape(lq, d)
    return linear(context, params['attn.wo'], params['attn.bo'])


def feed_forward(x: Tensor, params: Params, dropout_rate: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    hidden = dropout(linear(x, params['ffn.w1'], params['ffn.b1']).relu(), dropout_rate, rng)
    return dropout(linear(hidden, params['ffn.w2'], params['ffn.b2']), dropout_rate, rng)


def attention_layer(q: Tensor, k: Tensor, v: Tensor, params: Params, heads: int,
                    dropout_rate: float = 0.0,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    pre-norm 注意力层

    自注意力时（k、v 与 q 是同一对象）复用 q 的归一化结果；
    交叉注意力时若存在 ln_kv 则先对 key/value 归一化

    Returns:
        Lq × d
    """
    _check_heads(q.shape[-1], heads)
    qn = layer_norm(q, params['ln1.gamma'], params['ln1.beta'])
    if k is q:
        kn = qn
    elif 'ln_kv.gamma' in params:
        kn = layer_norm(k, params['ln_kv.gamma'], params['ln_kv.beta'])
    else:
        kn = k
    vn = kn if v is k else (qn if v is q else v)

    x = q + multi_head_attention(qn, kn, vn, params, heads, dropout_rate, rng)
    xn = layer_norm(x, params['ln2.gamma'], params['ln2.beta'])
    return x + feed_forward(xn, params, dropout_rate, rng)


def decoder_layer(x: Tensor, memory: Tensor, params: Params, heads: int,
                  dropout_rate: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    解码器层：视觉 token 自注意力，再以 memory（文本特征）为 key/value 做交叉注意力 + FFN
    """
    own = sub_params(params, 'self.')
    xn = layer_norm(x, own['ln1.gamma'], own['ln1.beta'])
    x = x + multi_head_attention(xn, xn, xn, own, heads, dropout_rate, rng)
    return attention_layer(x, memory, memory, sub_params(params, 'cross.'), heads, dropout_rate, rng)


# ==========================================
# 参数形状
# ==========================================

def _attention_shapes(d: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for name in ('q', 'k', 'v', 'o'):
        shapes[f'attn.w{name}'] = (d, d)
        shapes[f'attn.b{name}'] = (d,)
    return shapes


def attention_layer_shapes(d: int, ffn_dim: int, kv_norm: bool = False) -> Dict[str, Tuple[int, ...]]:
    """attention_layer 所需的参数形状"""
    shapes = {'ln1.gamma': (d,), 'ln1.beta': (d,)}
    if kv_norm:
        shapes.update({'ln_kv.gamma': (d,), 'ln_kv.beta': (d,)})
    shapes.update(_attention_shapes(d))
    shapes.update({
        'ln2.gamma': (d,), 'ln2.beta': (d,),
        'ffn.w1': (d, ffn_dim), 'ffn.b1': (ffn_dim,),
        'ffn.w2': (ffn_dim, d), 'ffn.b2': (d,),
    })
    return shapes


def decoder_layer_shapes(d: int, ffn_dim: int) -> Dict[str, Tuple[int, ...]]:
    """decoder_layer 所需的参数形状"""
    shapes = {'self.ln1.gamma': (d,), 'self.ln1.beta': (d,)}
    shapes.update({f'self.{k}': v for k, v in _attention_shapes(d).items()})
    shapes.update({f'cross.{k}': v for k, v in attention_layer_shapes(d, ffn_dim).items()})
    return shapes
