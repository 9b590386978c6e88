"""
热图编解码测试

测试覆盖：
1. 高斯编码：峰值 1、相邻像素 exp(-1/8)、截断半径 3σ、不可见通道为 0
2. 出界关键点可见性被清除、容量与 σ 校验
3. argmax 解码：行主序并列规则、全零通道无效
4. 编码 → 解码往返 + 坐标映射
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest

from models.errors import CapacityError, ConfigValidationError
from models.keypoint_types import HeatmapStack, KeypointSet
from kdsm_engine.heatmap_codec import decode_argmax, encode_gaussian, to_image_coords


# ============ Helper函数 ============

def make_kps(coords, visible=None, bbox=(0.0, 0.0, 64.0, 64.0)):
    coords = np.asarray(coords, dtype=np.float64)
    if visible is None:
        visible = np.ones(len(coords), dtype=bool)
    return KeypointSet(coords=coords, visible=visible, bbox=bbox)


# ===== 测试1: 高斯编码 =====

def test_peak_and_neighbour_values():
    stack = encode_gaussian(make_kps([[20.0, 30.0]]), n_channels=1, sigma=2.0)
    ch = stack.channels[0]
    assert ch[30, 20] == 1.0
    expected = math.exp(-1.0 / 8.0)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        assert abs(ch[30 + dy, 20 + dx] - expected) <= 1e-12


def test_window_truncated_at_three_sigma():
    ch = encode_gaussian(make_kps([[32.0, 32.0]]), n_channels=1, sigma=2.0).channels[0]
    assert ch[32, 38] > 0.0
    assert ch[32, 39] == 0.0
    assert ch[26, 32] > 0.0
    assert ch[25, 32] == 0.0


def test_sub_pixel_coords_floor_to_grid():
    ch = encode_gaussian(make_kps([[10.9, 5.2]]), n_channels=1).channels[0]
    assert ch[5, 10] == 1.0


def test_padding_channels_and_invisible_are_zero():
    kps = make_kps([[10.0, 10.0], [40.0, 40.0]], visible=[True, False])
    stack = encode_gaussian(kps, n_channels=5)
    assert stack.n_channels == 5
    assert stack.valid == 2
    assert stack.channels[0].max() == 1.0
    assert not stack.channels[1:].any()
    assert stack.visible.tolist() == [True, False]


def test_grid_scaling_for_smaller_heatmap():
    stack = encode_gaussian(make_kps([[40.0, 8.0]]), n_channels=1, hei=16, wid=16, image_size=64)
    assert stack.size == (16, 16)
    assert stack.channels[0][2, 10] == 1.0


# ===== 测试2: 出界与校验 =====

def test_far_outside_keypoint_loses_visibility():
    kps = make_kps([[200.0, 10.0], [-50.0, 10.0]])
    stack = encode_gaussian(kps, n_channels=2)
    assert stack.visible.tolist() == [False, False]
    assert not stack.channels.any()
    # 输入不被修改
    assert kps.visible.tolist() == [True, True]


def test_partially_outside_window_is_clipped():
    stack = encode_gaussian(make_kps([[66.0, 10.0]]), n_channels=1)
    assert stack.visible.tolist() == [True]
    assert stack.channels[0][10, 63] == pytest.approx(math.exp(-9.0 / 8.0))


def test_capacity_exceeded():
    with pytest.raises(CapacityError):
        encode_gaussian(make_kps([[1.0, 1.0]] * 4), n_channels=3)


def test_non_positive_sigma():
    with pytest.raises(ConfigValidationError):
        encode_gaussian(make_kps([[1.0, 1.0]]), n_channels=1, sigma=0.0)


# ===== 测试3: 解码 =====

def test_decode_tie_prefers_row_major_first():
    ch = np.zeros((1, 8, 8))
    ch[0, 5, 1] = 0.7
    ch[0, 2, 6] = 0.7
    ch[0, 2, 7] = 0.7
    decoded = decode_argmax(HeatmapStack(channels=ch, valid=1))
    assert (decoded[0].x, decoded[0].y) == (6, 2)
    assert decoded[0].score == 0.7
    assert decoded[0].valid


def test_decode_non_positive_channel_is_invalid():
    ch = np.full((2, 4, 4), -0.5)
    ch[1, 3, 0] = 0.2
    decoded = decode_argmax(HeatmapStack(channels=ch, valid=2))
    assert not decoded[0].valid
    assert decoded[0].score == 0.0
    assert decoded[1].valid and (decoded[1].x, decoded[1].y) == (0, 3)


# ===== 测试4: 往返 =====

def test_encode_decode_round_trip():
    rng = np.random.default_rng(9)
    coords = rng.integers(0, 64, size=(6, 2)).astype(np.float64)
    stack = encode_gaussian(make_kps(coords), n_channels=6)
    decoded = decode_argmax(stack)
    back = to_image_coords(decoded, 64, 64, 64)
    assert np.array_equal(back, coords)


def test_to_image_coords_scales_grid():
    stack = encode_gaussian(make_kps([[40.0, 8.0]]), n_channels=1, hei=16, wid=16, image_size=64)
    back = to_image_coords(decode_argmax(stack), 16, 16, 64)
    assert back.tolist() == [[40.0, 8.0]]
    assert to_image_coords([], 16, 16, 64).shape == (0, 2)
