"""
训练循环测试

测试覆盖：
1. 数据顺序：每个 epoch 一个固定排列，batch 可跨 epoch，只由 seed 决定
2. 步数：steps 优先，否则 epochs × ⌈n / batch⌉
3. KDSM 模式先对训练侧类别聚类；baseline 模式无分组、匹配损失为 0
4. 续训：从中途检查点继续与不间断训练逐位一致；同配置两次训练检查点字节相同
5. 发散：非有限 loss 抛 NumericFailure，并写出 <out>.diverged.kckp
6. 小样本过拟合：训练 MSE 下降
7. 桌面尺度验收与 α 消融方向（slow）
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dataclasses import replace

import numpy as np
import pytest
import yaml

from models.errors import ConfigValidationError, NumericFailure
from models.train_config import WorldConfig
from kdsm_engine import create_trainer
from kdsm_engine.checkpoint_store import load_checkpoint, save_checkpoint
from kdsm_engine.config_compiler import ConfigCompiler, with_overrides
from kdsm_engine.trainer import Trainer, total_steps_for, train
from synthworld import gen_world, generate_dataset, render_sample
from evaluation.evaluator import evaluate

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config')

TINY_MODEL = {'K': 3, 'O': 4, 'C': 8, 'C0': 16, 'd': 16, 'heads': 2, 'self_layers': 1, 'cross_layers': 1,
              'ffn_dim': 16, 'image_size': 32, 'encoder_channels': 8, 'head_channels': 4,
              'adapter_hidden': 8, 'vision_adapter_hidden': 8}


# ============ Helper函数 ============

def tiny_config(mode='kdsm', steps=4, batch_size=2, augment=True, seed=5, **sections):
    raw = {
        'model': dict(TINY_MODEL, mode=mode),
        'schedule': {'steps': steps, 'batch_size': batch_size, 'log_every': 1, 'checkpoint_every': 2},
        'data': {'augment': augment, 'kmeans_n_init': 2},
        'seed': seed,
    }
    for section, values in sections.items():
        raw.setdefault(section, {}).update(values)
    return ConfigCompiler().compile_dict(raw)


def tiny_samples(n=5, seed=0):
    world = gen_world(2, 3, seed=seed)
    return [render_sample(world[i % 2], instance_seed=seed * 100 + i, size=32, sample_id=i) for i in range(n)]


def params_equal(a, b):
    return list(a) == list(b) and all(np.array_equal(a[k].data, b[k].data) for k in a)


# ===== 测试1: 数据顺序 =====

class TestBatchOrder:

    def test_each_epoch_is_a_permutation(self):
        trainer = Trainer(tiny_config(), tiny_samples(5))
        positions = [i for step in range(5) for i in trainer.batch_indices(step)]
        assert sorted(positions[:5]) == list(range(5))
        assert sorted(positions[5:]) == list(range(5))

    def test_order_depends_only_on_seed(self):
        a = Trainer(tiny_config(), tiny_samples(5))
        b = Trainer(tiny_config(), tiny_samples(5))
        c = Trainer(tiny_config(seed=6), tiny_samples(5))
        assert [a.batch_indices(s) for s in range(6)] == [b.batch_indices(s) for s in range(6)]
        assert [a.batch_indices(s) for s in range(6)] != [c.batch_indices(s) for s in range(6)]

    def test_augmented_batch_independent_of_workers(self):
        one = Trainer(tiny_config(), tiny_samples(5))
        many = Trainer(tiny_config(data={'workers': 3}), tiny_samples(5))
        for a, b in zip(one.batch_samples(1), many.batch_samples(1)):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.kps.coords, b.kps.coords)


# ===== 测试2: 步数 =====

def test_total_steps():
    cfg = tiny_config(steps=7)
    assert total_steps_for(cfg, 100) == 7
    by_epoch = with_overrides(cfg, 'schedule', steps=None, epochs=3)
    assert total_steps_for(by_epoch, 5) == 9


def test_empty_training_set():
    with pytest.raises(ConfigValidationError):
        Trainer(tiny_config(), [])


def test_create_trainer_from_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({'model': TINY_MODEL, 'schedule': {'steps': 3}}), encoding='utf-8')
    trainer = create_trainer(str(path), tiny_samples(3))
    assert trainer.total_steps == 3
    assert trainer.config.model.K == 3


# ===== 测试3: 模式 =====

class TestModes:

    def test_kdsm_clusters_training_pairs(self):
        samples = tiny_samples(4)
        trainer = Trainer(tiny_config(), samples)
        pairs = {p.pair for s in samples for p in s.prompts}
        assert set(trainer.grouping.assignment) == pairs
        assert trainer.grouping.O == 4

    def test_baseline_has_no_grouping_and_no_match_loss(self):
        trainer = Trainer(tiny_config(mode='baseline'), tiny_samples(4))
        assert trainer.grouping is None
        record = trainer.train_step()
        assert record.match == 0.0
        assert record.loss == pytest.approx(record.mse)
        assert trainer.checkpoint().meta['mode'] == 'baseline'

    def test_step_log_and_lr(self):
        trainer = Trainer(tiny_config(steps=10), tiny_samples(4))
        records = [trainer.train_step() for _ in range(8)]
        assert [r.step for r in records] == list(range(1, 9))
        assert records[0].lr == 1e-3
        assert records[7].lr == pytest.approx(1e-4)
        assert all(np.isfinite(r.loss) and r.match > 0.0 for r in records)


# ===== 测试4: 续训与确定性 =====

class TestResume:

    def test_resume_matches_uninterrupted(self, tmp_path):
        samples = tiny_samples(5)
        straight = Trainer(tiny_config(steps=4), samples)
        full = straight.run()

        first = Trainer(tiny_config(steps=4), samples)
        first.run(max_steps=2)
        path = str(tmp_path / "mid.kckp")
        save_checkpoint(first.checkpoint(), path)

        resumed = Trainer.from_checkpoint(load_checkpoint(path), samples)
        assert resumed.step == 2
        final = resumed.run()
        assert params_equal(straight.params, resumed.params)
        assert [r['loss'] for r in final.log_tail] == [r['loss'] for r in full.log_tail]

    def test_identical_runs_write_identical_checkpoints(self, tmp_path):
        for name in ("a.kckp", "b.kckp"):
            Trainer(tiny_config(steps=3), tiny_samples(5), out_path=str(tmp_path / name)).run()
        assert (tmp_path / "a.kckp").read_bytes() == (tmp_path / "b.kckp").read_bytes()

    def test_final_checkpoint_contents(self, tmp_path):
        path = str(tmp_path / "ck.kckp")
        Trainer(tiny_config(steps=4), tiny_samples(5), out_path=path, meta={'fold': 1}).run()
        ckpt = load_checkpoint(path)
        assert ckpt.step == 4
        assert [r['step'] for r in ckpt.log_tail] == [1, 2, 3, 4]
        assert ckpt.meta == {'fold': 1, 'mode': 'kdsm'}
        assert ckpt.grouping is not None
        assert 'adam.t' in ckpt.optimizer_arrays


# ===== 测试5: 发散 =====

def test_divergence_saves_last_finite_state(tmp_path):
    samples = [replace(s, image=np.full_like(s.image, np.nan)) for s in tiny_samples(4)]
    path = str(tmp_path / "ck.kckp")
    trainer = Trainer(tiny_config(augment=False), samples, out_path=path)
    initial = trainer.params.to_arrays()
    with pytest.raises(NumericFailure) as exc:
        trainer.run()
    assert exc.value.exit_code == 4
    diverged = load_checkpoint(path + ".diverged.kckp")
    assert diverged.step == 0
    for name, arr in initial.items():
        assert np.array_equal(diverged.param_arrays[name], arr)


# ===== 测试6: 过拟合 =====

def test_loss_decreases_on_single_sample():
    cfg = tiny_config(steps=30, batch_size=1, augment=False,
                      model={'dropout': 0.0}, optim={'learning_rate': 1e-2})
    trainer = Trainer(cfg, tiny_samples(1))
    records = [trainer.train_step() for _ in range(30)]
    assert min(r.mse for r in records[-5:]) < 0.5 * records[0].mse


@pytest.mark.slow
def test_overfit_ten_samples():
    cfg = tiny_config(steps=200, batch_size=2, augment=False,
                      model={'dropout': 0.0}, optim={'learning_rate': 3e-3})
    trainer = Trainer(cfg, tiny_samples(10))
    first = trainer.train_step().mse
    trainer.run()
    tail = [r['mse'] for r in list(trainer.log_tail)[-10:]]
    assert np.mean(tail) < 0.1 * first


# ===== 测试7: 桌面尺度验收（slow） =====

@pytest.fixture(scope='module')
def desk_dataset(tmp_path_factory):
    compiler = ConfigCompiler()
    world_cfg = compiler.compile_world(os.path.join(CONFIG_DIR, 'world.yaml'))
    assert isinstance(world_cfg, WorldConfig)
    return generate_dataset(world_cfg, str(tmp_path_factory.mktemp("desk")))


@pytest.mark.slow
@pytest.mark.parametrize("setting,kdsm_floor", [("B", 0.80), ("A", 0.75)])
def test_desk_kdsm_beats_baseline(desk_dataset, setting, kdsm_floor):
    config = ConfigCompiler().compile(os.path.join(CONFIG_DIR, 'kdsm_train.yaml'))
    plan = desk_dataset.split(setting, 1)
    kdsm = evaluate(train(config, desk_dataset, plan), desk_dataset, plan)
    baseline_cfg = with_overrides(config, 'model', mode='baseline')
    base = evaluate(train(baseline_cfg, desk_dataset, plan), desk_dataset, plan)
    assert kdsm.pck_02 >= kdsm_floor
    assert kdsm.pck_02 - base.pck_02 >= 0.10


@pytest.mark.slow
def test_desk_match_loss_ablation(desk_dataset):
    config = ConfigCompiler().compile(os.path.join(CONFIG_DIR, 'kdsm_train.yaml'))
    plan = desk_dataset.split("B", 1)
    with_match = evaluate(train(config, desk_dataset, plan), desk_dataset, plan)
    without = evaluate(train(with_overrides(config, 'loss', alpha=0.0), desk_dataset, plan), desk_dataset, plan)
    assert without.pck_02 < with_match.pck_02
