"""
KDSM Engine - 神经网络基础算子

负责：
1. 线性层 / softmax / LayerNorm / dropout
2. conv2d（im2col）与 deconv2d（col2im，conv2d 的伴随）
3. 损失构件：MSE、带下限的 log、按索引选通道

设计原则：
- 每个算子是一个融合节点（前向 + 手写反向），减少图节点数
- 几何不合法 → ConfigValidationError；形状不匹配 → DimensionError
- dropout 只在显式传入 rng 时生效（评估模式传 None）
"""

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from models.errors import ConfigValidationError, DimensionError
from .autograd import Tensor, as_tensor


# ==========================================
# 线性 / 归一化
# ==========================================

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w + b，w 形状 (in, out)"""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError("linear", x.shape, w.shape)
    out = x @ w
    return out + b if b is not None else out


def softmax_rows(x: Tensor) -> Tensor:
    """沿最后一维 softmax（先减行最大值）"""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), "softmax", _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """沿最后一维做 LayerNorm"""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    lead_axes = tuple(range(x.ndim - 1))

    def _backward(g):
        dxhat = g * gamma.data
        dx = inv_std / n * (n * dxhat
                            - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead_axes), g.sum(axis=lead_axes)

    return Tensor.from_op(out, (x, gamma, beta), "layer_norm", _backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """
    inverted dropout

    rng 为 None（评估模式）或 rate 为 0 时直接返回输入
    """
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# ==========================================
# 卷积
# ==========================================

def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """(C, Hp, Wp) → (h_out·w_out, C·kh·kw)"""
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :h_out, :w_out]
    c = xp.shape[0]
    return windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c * kh * kw)


def _col2im(cols: np.ndarray, channels: int, kh: int, kw: int, stride: int,
            h_in: int, w_in: int, hp: int, wp: int) -> np.ndarray:
    """_im2col 的伴随：把 (h_in·w_in, C·kh·kw) 按步长散射累加回 (C, hp, wp)"""
    blocks = cols.reshape(h_in, w_in, channels, kh, kw)
    out = np.zeros((channels, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * h_in:stride, j:j + stride * w_in:stride] += \
                blocks[:, :, :, i, j].transpose(2, 0, 1)
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    二维互相关

    Args:
        x: C_in × H × W
        w: C_out × C_in × kh × kw
        b: C_out（可选）

    Returns:
        C_out × H′ × W′，H′ = ⌊(H+2p−kh)/stride⌋+1
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise DimensionError("conv2d", x.shape, w.shape)
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    h_out = conv_output_extent(h, kh, stride, padding)
    w_out = conv_output_extent(wd, kw, stride, padding)
    if h_out <= 0 or w_out <= 0 or stride <= 0:
        raise ConfigValidationError(
            f"conv2d: kernel {kh}x{kw} stride {stride} padding {padding} does not fit input {h}x{wd}"
        )

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape(c_out, h_out, w_out)
    if b is not None:
        out = out + b.data[:, None, None]
    hp, wp = xp.shape[1], xp.shape[2]

    def _backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols).reshape(w.shape)
        gxp = _col2im(g2.T @ wmat, c_in, kh, kw, stride, h_out, w_out, hp, wp)
        gx = gxp[:, padding:padding + h, padding:padding + wd]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, "conv2d", _backward)


def deconv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
             stride: int = 2, padding: int = 1, output_padding: int = 0) -> Tensor:
    """
    转置卷积（conv2d 的伴随，权重共享同一布局）

    Args:
        x: C_in × H × W
        w: C_in × C_out × kh × kw
        b: C_out（可选）

    Returns:
        C_out × H′ × W′，H′ = (H−1)·stride − 2p + kh + output_padding
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[0]:
        raise DimensionError("deconv2d", x.shape, w.shape)
    c_in, h, wd = x.shape
    _, c_out, kh, kw = w.shape
    if stride <= 0 or not (0 <= output_padding < stride):
        raise ConfigValidationError(
            f"deconv2d: output_padding {output_padding} must lie in [0, stride={stride})"
        )
    h_out = (h - 1) * stride - 2 * padding + kh + output_padding
    w_out = (wd - 1) * stride - 2 * padding + kw + output_padding
    if h_out <= 0 or w_out <= 0 or padding < 0:
        raise ConfigValidationError(
            f"deconv2d: kernel {kh}x{kw} stride {stride} padding {padding} gives empty output for {h}x{wd}"
        )

    hp, wp = h_out + 2 * padding, w_out + 2 * padding
    wmat = w.data.reshape(c_in, -1)
    xmat = x.data.reshape(c_in, -1)
    full = _col2im(xmat.T @ wmat, c_out, kh, kw, stride, h, wd, hp, wp)
    out = full[:, padding:padding + h_out, padding:padding + w_out]
    if b is not None:
        out = out + b.data[:, None, None]

    def _backward(g):
        gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(gp, kh, kw, stride, h, wd)
        gx = (cols @ wmat.T).T.reshape(x.shape)
        gw = (xmat @ cols).reshape(w.shape)
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(np.ascontiguousarray(out), parents, "deconv2d", _backward)


# ==========================================
# 损失构件
# ==========================================

def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """均方误差（对全部元素求平均），target 视为常量"""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError("mse_loss", pred.shape, target.shape)
    diff = pred.data - target
    n = diff.size
    return Tensor.from_op(np.array((diff ** 2).sum() / n), (pred,), "mse",
                          lambda g: (g * 2.0 * diff / n,))


def clamped_log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor))，低于下限处梯度为 0"""
    above = x.data > floor
    safe = np.where(above, x.data, floor)
    return Tensor.from_op(np.log(safe), (x,), "clamped_log",
                          lambda g: (np.where(above, g / safe, 0.0),))


def select_channels(x: Tensor, indices: Sequence[int], n_out: int) -> Tensor:
    """
    按索引选取首维切片

    输出第 i 个切片 = x[indices[i]]（i < len(indices)）；
    索引为 -1 的位置以及 len(indices) 之后的切片为 0
    """
    idx = np.asarray(list(indices), dtype=np.int64)
    if len(idx) > n_out:
        raise DimensionError("select_channels", (len(idx),), (n_out,))
    if len(idx) and (idx.min() < -1 or idx.max() >= x.shape[0]):
        raise DimensionError("select_channels", x.shape, tuple(idx.tolist()))
    rows = np.flatnonzero(idx >= 0)
    src = idx[rows]
    out = np.zeros((n_out,) + x.shape[1:])
    out[rows] = x.data[src]

    def _backward(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, src, g[rows])
        return (gx,)

    return Tensor.from_op(out, (x,), "select_channels", _backward)
