"""
评估与推理测试

测试覆盖：
1. evaluate：同一检查点 + 划分评估两次结果完全一致，且不修改检查点
2. 检查点模式与要求不一致 → UsageError
3. max 与 greedy 分配只在逐行 argmax 冲突的样本上不同；greedy 分配一对一
4. baseline 检查点：第 i 个通道即第 i 个 prompt
5. infer：单 prompt 返回一个关键点；坐标随图像尺寸线性缩放；非方形/空 prompt/超过 K 报错
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from scipy import ndimage

from models.enums import AssignmentMode
from models.errors import CapacityError, DataError, PromptValidationError, UsageError
from models.train_config import WorldConfig
from kdsm_engine.config_compiler import ConfigCompiler
from kdsm_engine.text_embeddings import build_prompts
from kdsm_engine.trainer import Trainer
from evaluation.evaluator import LoadedModel, evaluate, infer, predict_samples
from synthworld import generate_dataset, write_pgm

TINY_MODEL = {'K': 4, 'O': 4, 'C': 8, 'C0': 16, 'd': 16, 'heads': 2, 'self_layers': 1, 'cross_layers': 1,
              'ffn_dim': 16, 'image_size': 32, 'encoder_channels': 8, 'head_channels': 4,
              'adapter_hidden': 8, 'vision_adapter_hidden': 8}


# ============ Helper函数 ============

def tiny_config(mode='kdsm'):
    return ConfigCompiler().compile_dict({
        'model': dict(TINY_MODEL, mode=mode),
        'schedule': {'steps': 2, 'batch_size': 2},
        'data': {'kmeans_n_init': 2},
        'seed': 1,
    })


@pytest.fixture(scope='module')
def dataset(tmp_path_factory):
    cfg = WorldConfig(n_species=5, cats_per_species=4, samples_per_species=4, image_size=32,
                      n_folds=2, seed=2)
    return generate_dataset(cfg, str(tmp_path_factory.mktemp("data")))


@pytest.fixture(scope='module')
def kdsm_ckpt(dataset):
    plan = dataset.split("B", 1)
    return Trainer(tiny_config(), dataset.side_samples(plan, 'train')).run()


@pytest.fixture(scope='module')
def baseline_ckpt(dataset):
    plan = dataset.split("B", 1)
    return Trainer(tiny_config('baseline'), dataset.side_samples(plan, 'train')).run()


# ===== 测试1: 确定性 =====

def test_evaluate_is_deterministic_and_read_only(kdsm_ckpt, dataset):
    plan = dataset.split("B", 1)
    before = {k: v.copy() for k, v in kdsm_ckpt.tensors.items()}
    first = evaluate(kdsm_ckpt, dataset, plan)
    second = evaluate(kdsm_ckpt, dataset, plan)
    assert first.to_dict() == second.to_dict()
    assert first.n_keypoints > 0
    assert first.pck_005 <= first.pck_02
    assert first.assignment == 'max'
    for k, v in kdsm_ckpt.tensors.items():
        assert np.array_equal(v, before[k])


def test_train_side_evaluation(kdsm_ckpt, dataset):
    plan = dataset.split("B", 1)
    metrics = evaluate(kdsm_ckpt, dataset, plan, side='train')
    train_samples = dataset.side_samples(plan, 'train')
    assert metrics.n_keypoints == sum(int(s.kps.visible.sum()) for s in train_samples)
    assert metrics.n_samples == len(train_samples)


# ===== 测试2: 模式检查 =====

def test_mode_mismatch(kdsm_ckpt, dataset):
    with pytest.raises(UsageError, match="kdsm"):
        evaluate(kdsm_ckpt, dataset, dataset.split("B", 1), expected_mode='baseline')


# ===== 测试3: 分配方式 =====

def test_greedy_differs_only_on_collisions(kdsm_ckpt, dataset):
    model = LoadedModel(kdsm_ckpt)
    samples = dataset.side_samples(dataset.split("A", 1), 'test')
    by_max = predict_samples(model, samples, AssignmentMode.MAX)
    by_greedy = predict_samples(model, samples, 'greedy')
    for a, b in zip(by_max, by_greedy):
        groups_max = [k.group for k in a.keypoints]
        groups_greedy = [k.group for k in b.keypoints]
        assert len(set(groups_greedy)) == len(groups_greedy)
        assert a.collision == b.collision
        if not a.collision:
            assert groups_max == groups_greedy
            assert np.array_equal(a.coords, b.coords)
        else:
            assert len(set(groups_max)) < len(groups_max)


# ===== 测试4: baseline =====

def test_baseline_channels_follow_prompts(baseline_ckpt, dataset):
    model = LoadedModel(baseline_ckpt)
    sample = dataset.sample(0)
    pred = model.predict(sample.image, sample.prompts)
    assert [k.group for k in pred.keypoints] == list(range(len(sample.prompts)))
    assert not pred.collision
    assert evaluate(baseline_ckpt, dataset, dataset.split("B", 1), expected_mode='baseline').n_keypoints > 0


# ===== 测试5: 推理 =====

class TestInfer:

    def test_single_prompt(self, kdsm_ckpt, dataset, tmp_path):
        sample = dataset.sample(3)
        path = str(tmp_path / "img.pgm")
        write_pgm(sample.image, path)
        out = infer(kdsm_ckpt, path, sample.prompts[:1])
        assert len(out) == 1
        assert (out[0].species, out[0].category) == sample.prompts[0].pair
        assert 0.0 <= out[0].x < 32 and 0.0 <= out[0].y < 32
        assert 0 <= out[0].group < 4

    def test_native_size_matches_predict(self, kdsm_ckpt, dataset, tmp_path):
        sample = dataset.sample(5)
        path = str(tmp_path / "img.pgm")
        write_pgm(sample.image, path)
        out = infer(kdsm_ckpt, path, sample.prompts)
        direct = LoadedModel(kdsm_ckpt).predict(sample.image, sample.prompts)
        assert np.array_equal(np.array([[k.x, k.y] for k in out]), direct.coords)

    def test_coordinates_scale_with_image_size(self, kdsm_ckpt, dataset, tmp_path):
        sample = dataset.sample(5)
        big = np.kron(sample.image[0], np.ones((2, 2)))
        path = str(tmp_path / "big.pgm")
        write_pgm(big, path)
        out = infer(kdsm_ckpt, path, sample.prompts)

        loaded = np.round(big * 255.0) / 255.0
        resized = ndimage.zoom(loaded, 0.5, order=1)[None, :32, :32]
        direct = LoadedModel(kdsm_ckpt).predict(resized, sample.prompts)
        assert np.allclose(np.array([[k.x, k.y] for k in out]), 2.0 * direct.coords)

    def test_rejects_bad_inputs(self, kdsm_ckpt, dataset, tmp_path):
        path = str(tmp_path / "wide.pgm")
        write_pgm(np.zeros((32, 48)), path)
        with pytest.raises(DataError, match="square"):
            infer(kdsm_ckpt, path, build_prompts("fox face", ["nose"]))

        square = str(tmp_path / "square.pgm")
        write_pgm(np.zeros((32, 32)), square)
        with pytest.raises(PromptValidationError):
            infer(kdsm_ckpt, square, [])
        with pytest.raises(CapacityError):
            infer(kdsm_ckpt, square, build_prompts("fox face", ["a", "b", "c", "d", "e"]))
        with pytest.raises(DataError):
            infer(kdsm_ckpt, str(tmp_path / "absent.pgm"), build_prompts("fox face", ["nose"]))
