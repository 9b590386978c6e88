"""
KDSM Engine - 热图编解码

负责：
1. 真值关键点 → 截断高斯热图（峰值 1，σ 默认 2 像素，截断半径 3σ）
2. 预测热图 → argmax 坐标 + 置信度

设计原则：
- 图像坐标到热图网格用 floor(coord · hei / image_size)
- 不做亚像素修正（纯 argmax）
- 不可见关键点、以及 valid 之后的通道全为 0
"""

from typing import List

import numpy as np

from models.errors import CapacityError, ConfigValidationError
from models.keypoint_types import DecodedKeypoint, HeatmapStack, KeypointSet


def encode_gaussian(kps: KeypointSet, n_channels: int, hei: int = 64, wid: int = 64,
                    sigma: float = 2.0, image_size: int = 64) -> HeatmapStack:
    """
    编码真值热图

    Args:
        kps: 关键点（图像像素坐标）
        n_channels: 输出通道数（K 或 O）
        hei, wid: 热图尺寸
        sigma: 高斯标准差（热图像素）
        image_size: 图像边长

    Returns:
        HeatmapStack，valid = 关键点个数，visible 为编码后的可见性
        （3σ 窗口完全落在网格外的关键点可见性被清除）
    """
    if sigma <= 0:
        raise ConfigValidationError(f"heatmap sigma must be positive, got {sigma}")
    if len(kps) > n_channels:
        raise CapacityError(f"{len(kps)} keypoints exceed {n_channels} heatmap channels")

    channels = np.zeros((n_channels, hei, wid))
    visible = kps.visible.copy()
    radius = int(3 * sigma)
    scale_y = hei / image_size
    scale_x = wid / image_size

    for i, (x, y) in enumerate(kps.coords):
        if not visible[i]:
            continue
        cx = int(np.floor(x * scale_x))
        cy = int(np.floor(y * scale_y))
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, wid)
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, hei)
        if x0 >= x1 or y0 >= y1:
            visible[i] = False
            continue
        xs = np.arange(x0, x1) - cx
        ys = np.arange(y0, y1) - cy
        sq = ys[:, None] ** 2 + xs[None, :] ** 2
        channels[i, y0:y1, x0:x1] = np.exp(-sq / (2.0 * sigma * sigma))

    return HeatmapStack(channels=channels, valid=len(kps), visible=visible)


def decode_argmax(h: HeatmapStack) -> List[DecodedKeypoint]:
    """
    逐通道取最大值位置（行主序最先出现者优先）

    最大值 ≤ 0 的通道标记为无效，分数记 0
    """
    channels = np.asarray(h.channels)
    n, _, wid = channels.shape
    flat = channels.reshape(n, -1)
    idx = flat.argmax(axis=1)
    peaks = flat[np.arange(n), idx]
    decoded = []
    for i in range(n):
        if peaks[i] > 0:
            y, x = divmod(int(idx[i]), wid)
            decoded.append(DecodedKeypoint(x=x, y=y, score=float(peaks[i]), valid=True))
        else:
            decoded.append(DecodedKeypoint(x=0, y=0, score=0.0, valid=False))
    return decoded


def to_image_coords(decoded: List[DecodedKeypoint], hei: int, wid: int,
                    image_size: float) -> np.ndarray:
    """热图网格坐标线性映射回图像像素坐标"""
    sx = image_size / wid
    sy = image_size / hei
    return np.array([[d.x * sx, d.y * sy] for d in decoded], dtype=np.float64).reshape(-1, 2)
