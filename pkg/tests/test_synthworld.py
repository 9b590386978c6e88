"""
合成数据集测试

测试覆盖：
1. gen_world：确定性、同名类别跨物种共享图案、词表/类别数校验
2. render_sample：取值范围与 8 位量化、关键点落在画面内、可见点中心像素为 1
3. 关键点 bbox 外扩
4. 零样本划分：两侧不相交、逐 fold 轮换覆盖全部类别/物种、Setting B 物种下限
5. 数据增强：恒等变换、90° 旋转像素与关键点一致、出界点不可见、随机增强后亮点与关键点相差 ≤ 1 像素
6. 数据集目录：生成 → 读取与内存渲染一致、多线程生成一致、错误路径
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import logging
from dataclasses import replace

import numpy as np
import pytest

from models.enums import Setting
from models.errors import ConfigValidationError, DataError
from models.keypoint_types import KeypointSet
from models.train_config import WorldConfig
from synthworld import (
    Dataset, augment, augment_with, category_names, gen_world, generate_dataset, keypoint_bbox,
    make_splits, pattern_for, read_pgm, render_sample, write_pgm,
)
from synthworld.augment import ROTATION_DEG, SCALE_RANGE, draw_params
from synthworld.world import BACKGROUND


# ============ Helper函数 ============

def small_world_config(**overrides):
    base = dict(n_species=5, cats_per_species=4, samples_per_species=5, image_size=32,
                n_folds=2, seed=3, workers=1)
    base.update(overrides)
    return WorldConfig(**base)


@pytest.fixture
def world():
    return gen_world(8, 6, seed=7)


@pytest.fixture
def visible_sample(world):
    return render_sample(world[0], instance_seed=11, invisible_rate=0.0)


# ===== 测试1: gen_world =====

class TestWorld:

    def test_deterministic(self):
        assert gen_world(6, 5, seed=1) == gen_world(6, 5, seed=1)
        assert gen_world(6, 5, seed=1) != gen_world(6, 5, seed=2)

    def test_shared_category_shares_pattern(self, world):
        style_of = {}
        for t in world:
            assert len(set(t.categories)) == len(t.categories) == 6
            for name, style in zip(t.categories, t.render_style):
                style_of.setdefault(name, set()).add(style)
        assert all(len(styles) == 1 for styles in style_of.values())
        # 8 个物种 × 6 个类别取自 12 个名字，必然存在跨物种复用
        assert any(sum(name in t.categories for t in world) > 1 for name in category_names())

    def test_species_names_unique(self):
        names = [t.name for t in gen_world(32, 3, seed=0)]
        assert len(set(names)) == 32

    def test_layout_in_unit_square(self, world):
        for t in world:
            pts = np.asarray(t.base_layout)
            assert pts.min() >= 0.08 and pts.max() <= 0.92

    @pytest.mark.parametrize("kwargs", [
        dict(n_species=4, cats_per_species=13, seed=0),
        dict(n_species=4, cats_per_species=1, seed=0),
        dict(n_species=33, cats_per_species=3, seed=0),
        dict(n_species=4, cats_per_species=6, seed=0, max_categories=5),
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ConfigValidationError):
            gen_world(**kwargs)

    def test_pattern_center_is_unique_max(self):
        for style in range(12):
            stamp = pattern_for(style)
            assert stamp.shape == (5, 5)
            assert stamp[2, 2] == 1.0
            others = np.delete(stamp.reshape(-1), 12)
            assert others.max() <= 0.8


# ===== 测试2: render_sample =====

class TestRender:

    def test_image_range_and_quantization(self, world):
        sample = render_sample(world[1], instance_seed=5)
        assert sample.image.shape == (1, 64, 64)
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        levels = sample.image * 255.0
        assert np.allclose(levels, np.round(levels), atol=1e-9)

    def test_keypoints_inside_and_on_pixel_centers(self, world):
        for seed in range(20):
            sample = render_sample(world[seed % len(world)], instance_seed=seed)
            coords = sample.kps.coords
            assert np.array_equal(coords, np.round(coords))
            assert coords.min() >= 3 and coords.max() <= 60

    def test_visible_keypoint_pixel_is_one(self, visible_sample):
        assert visible_sample.kps.visible.all()
        for x, y in visible_sample.kps.coords.astype(int):
            assert visible_sample.image[0, y, x] == 1.0

    def test_all_invisible_leaves_background(self, world):
        sample = render_sample(world[0], instance_seed=2, invisible_rate=1.0)
        assert not sample.kps.visible.any()
        assert sample.image.max() < 0.45

    def test_deterministic_and_prompts(self, world):
        a = render_sample(world[2], instance_seed=9, sample_id=4)
        b = render_sample(world[2], instance_seed=9, sample_id=4)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.kps.coords, b.kps.coords)
        assert a.categories == list(world[2].categories)
        assert a.species == world[2].name and a.sample_id == 4

    def test_small_image_rejected(self, world):
        with pytest.raises(ConfigValidationError):
            render_sample(world[0], instance_seed=0, size=16)


# ===== 测试3: bbox =====

def test_keypoint_bbox_dilation():
    assert keypoint_bbox(np.array([[0.0, 0.0], [10.0, 20.0]])) == pytest.approx((-0.5, -1.0, 10.5, 21.0))
    # 单点退化为 1 像素边长
    assert keypoint_bbox(np.array([[5.0, 5.0]])) == pytest.approx((4.45, 4.45, 5.55, 5.55))


# ===== 测试4: 零样本划分 =====

class TestSplits:

    def test_setting_a_disjoint_and_covering(self, world):
        plans = make_splits(world, Setting.A, n_folds=5, seed=0)
        assert [p.fold for p in plans] == [1, 2, 3, 4, 5]
        all_pairs = {(t.name, c) for t in world for c in t.categories}
        tested = set()
        for plan in plans:
            train, test = set(plan.train_pairs), set(plan.test_pairs)
            assert not train & test
            assert train | test == all_pairs
            for t in world:
                assert plan.categories_for(t.name, 'train')
                assert plan.categories_for(t.name, 'test')
            tested |= test
        assert tested == all_pairs

    def test_setting_a_instances_held_out(self, world):
        index = {t.name: list(range(i * 10, i * 10 + 10)) for i, t in enumerate(world)}
        plan = make_splits(world, "A", n_folds=5, seed=0, sample_index=index)[0]
        assert not set(plan.train_samples) & set(plan.test_samples)
        assert len(plan.test_samples) == 2 * len(world)
        assert sorted(plan.train_samples + plan.test_samples) == list(range(80))

    def test_setting_b_species_disjoint_and_rotating(self, world):
        plans = make_splits(world, Setting.B, n_folds=5, seed=0)
        held = set()
        for plan in plans:
            assert not set(plan.train_species) & set(plan.test_species)
            assert len(plan.train_species) + len(plan.test_species) == len(world)
            assert {s for s, _ in plan.test_pairs} == set(plan.test_species)
            held |= set(plan.test_species)
        assert held == {t.name for t in world}

    def test_setting_b_needs_five_species(self):
        with pytest.raises(ConfigValidationError, match="5 species"):
            make_splits(gen_world(4, 3, seed=0), Setting.B)

    def test_deterministic(self, world):
        assert make_splits(world, Setting.A, seed=4) == make_splits(world, Setting.A, seed=4)


# ===== 测试5: 数据增强 =====

class TestAugment:

    def test_identity(self, visible_sample):
        out = augment_with(visible_sample, 1.0, 0.0)
        assert np.array_equal(out.image, visible_sample.image)
        assert out.image is not visible_sample.image
        assert np.array_equal(out.kps.coords, visible_sample.kps.coords)

    def test_quarter_turn_moves_pixels_with_keypoints(self, visible_sample):
        out = augment_with(visible_sample, 1.0, 90.0)
        c = 31.5
        for (x, y), (x2, y2) in zip(visible_sample.kps.coords, out.kps.coords):
            assert (x2, y2) == pytest.approx((c - (y - c), c + (x - c)), abs=1e-9)
            assert out.image[0, int(round(y2)), int(round(x2))] == pytest.approx(1.0, abs=1e-6)
        assert out.kps.visible.all()

    def test_points_leaving_frame_become_invisible(self, visible_sample):
        out = augment_with(visible_sample, 3.0, 0.0)
        coords = out.kps.coords
        inside = np.all((coords >= 0) & (coords <= 63), axis=1)
        assert not inside.all()
        assert np.array_equal(out.kps.visible, inside)

    def test_random_params_in_range_and_deterministic(self, visible_sample):
        for seed in range(50):
            scale, angle = draw_params(np.random.default_rng(seed))
            assert 1.0 - SCALE_RANGE <= scale <= 1.0 + SCALE_RANGE
            assert -ROTATION_DEG <= angle <= ROTATION_DEG
        a = augment(visible_sample, seed=3)
        b = augment(visible_sample, seed=3)
        assert np.array_equal(a.image, b.image)
        assert a.image.min() >= 0.0 and a.image.max() <= 1.0

    def test_stamped_points_follow_their_keypoints(self, visible_sample):
        """单像素亮点随机增强后，局部最亮像素与变换后的关键点逐轴相差不超过 1 像素"""
        points = [(20, 20), (43, 20), (20, 43), (43, 43), (31, 12), (50, 31)]
        n = min(len(points), len(visible_sample.kps))
        coords = np.array(points[:n], dtype=np.float64)
        image = np.full((1, 64, 64), BACKGROUND)
        for x, y in points[:n]:
            image[0, y, x] = 1.0
        stamped = visible_sample.restrict(visible_sample.categories[:n])
        stamped = replace(stamped, image=image,
                          kps=KeypointSet(coords=coords, visible=np.ones(n, dtype=bool),
                                          bbox=keypoint_bbox(coords)))
        for seed in range(20):
            out = augment(stamped, seed=seed)
            assert out.kps.visible.all()
            for x, y in out.kps.coords:
                cx, cy = int(round(x)), int(round(y))
                window = out.image[0, cy - 2:cy + 3, cx - 2:cx + 3]
                row, col = np.unravel_index(np.argmax(window), window.shape)
                assert abs(cx - 2 + col - x) <= 1.0
                assert abs(cy - 2 + row - y) <= 1.0


# ===== 测试6: 数据集目录 =====

class TestDatasetStore:

    def test_generated_samples_match_rendering(self, tmp_path):
        cfg = small_world_config()
        dataset = generate_dataset(cfg, str(tmp_path / "data"))
        assert len(dataset) == 25
        template = dataset.world[2]
        sample_id = 2 * cfg.samples_per_species + 3
        rendered = render_sample(template, cfg.seed * 100000 + sample_id, size=32,
                                 invisible_rate=cfg.invisible_rate, noise_std=cfg.noise_std)
        loaded = dataset.sample(sample_id)
        assert np.array_equal(loaded.image, rendered.image)
        assert np.array_equal(loaded.kps.coords, rendered.kps.coords)
        assert np.array_equal(loaded.kps.visible, rendered.kps.visible)
        assert loaded.species == template.name

    def test_splits_written_and_consistent(self, tmp_path):
        dataset = generate_dataset(small_world_config(), str(tmp_path / "data"))
        for setting in ("A", "B"):
            for fold in (1, 2):
                plan = dataset.split(setting, fold)
                assert plan.setting == setting and plan.fold == fold
        plan = dataset.split(Setting.A, 1)
        for s in dataset.side_samples(plan, 'test'):
            assert set(s.categories) == set(plan.categories_for(s.species, 'test'))
            assert len(s.kps) == len(s.prompts)

    def test_setting_b_skipped_for_small_world(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            dataset = generate_dataset(small_world_config(n_species=4), str(tmp_path / "data"))
        assert any("Setting B" in r.getMessage() for r in caplog.records)
        with pytest.raises(DataError):
            dataset.split("B", 1)

    def test_worker_count_does_not_change_output(self, tmp_path):
        generate_dataset(small_world_config(workers=1), str(tmp_path / "one"))
        generate_dataset(small_world_config(workers=3), str(tmp_path / "three"))
        for name in ("0000.pgm", "0007.json", "0024.pgm"):
            assert (tmp_path / "one" / "samples" / name).read_bytes() == \
                (tmp_path / "three" / "samples" / name).read_bytes()

    def test_errors(self, tmp_path):
        with pytest.raises(DataError, match="world.json"):
            Dataset(str(tmp_path))
        dataset = generate_dataset(small_world_config(), str(tmp_path / "data"))
        with pytest.raises(DataError):
            dataset.sample(999)
        with pytest.raises(DataError):
            read_pgm(str(tmp_path / "absent.pgm"))

    def test_pgm_round_trip(self, tmp_path):
        image = np.arange(64, dtype=np.float64).reshape(8, 8) / 255.0
        path = str(tmp_path / "img.pgm")
        write_pgm(image, path)
        assert (tmp_path / "img.pgm").read_bytes().startswith(b"P5")
        assert np.array_equal(read_pgm(path)[0], image)
