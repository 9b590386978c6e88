"""
SynthWorld - 训练期数据增强

随机缩放（±15%）与随机旋转（±15°），图像与关键点联合变换；
变换后落出画面的关键点标记为不可见
"""

import logging
from dataclasses import replace

import numpy as np
from scipy import ndimage

from models.keypoint_types import KeypointSet, Sample
from .world import BACKGROUND, keypoint_bbox

logger = logging.getLogger(__name__)

SCALE_RANGE = 0.15
ROTATION_DEG = 15.0


def draw_params(rng: np.random.Generator):
    """抽取 (scale, angle_deg)，均在上述范围内"""
    scale = 1.0 + rng.uniform(-SCALE_RANGE, SCALE_RANGE)
    angle = rng.uniform(-ROTATION_DEG, ROTATION_DEG)
    return scale, angle


def augment(sample: Sample, seed: int) -> Sample:
    return augment_with(sample, *draw_params(np.random.default_rng(seed)))


def augment_with(sample: Sample, scale: float, angle_deg: float) -> Sample:
    """
    以图像中心为原点做 p′ = c + s·R(θ)(p − c)

    图像用双线性插值（order=1）反向采样，画面外填背景灰度
    """
    if scale == 1.0 and angle_deg == 0.0:
        return replace(sample, image=sample.image.copy())

    size = sample.image.shape[-1]
    c = (size - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    forward_xy = scale * np.array([[cos, -sin], [sin, cos]])

    # (row, col) = (y, x) 坐标系下的逆变换
    forward_rc = forward_xy[::-1, ::-1]
    inverse_rc = np.linalg.inv(forward_rc)
    offset = np.array([c, c]) - inverse_rc @ np.array([c, c])
    warped = ndimage.affine_transform(sample.image[0], inverse_rc, offset=offset,
                                      order=1, mode='constant', cval=BACKGROUND)

    coords = c + (sample.kps.coords - c) @ forward_xy.T
    inside = np.all((coords >= 0) & (coords <= size - 1), axis=1)
    kps = KeypointSet(coords=coords, visible=sample.kps.visible & inside, bbox=keypoint_bbox(coords))
    return replace(sample, image=warped[None, :, :], kps=kps)
