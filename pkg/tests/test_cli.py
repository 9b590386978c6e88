"""
命令行测试

测试覆盖：
1. gen-data → cluster → train → eval → report → infer 全流程（小世界、2 步训练）
2. eval 默认取检查点记录的数据目录、设置与 fold
3. 退出码：配置错误 2、数据错误 3、用法错误 2
4. ablate：没有任何变体时报错
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json

import pytest
import yaml

from kdsm_cli import main

TINY_TRAIN = {
    'model': {'K': 4, 'O': 4, 'C': 8, 'C0': 16, 'd': 16, 'heads': 2, 'self_layers': 1, 'cross_layers': 1,
              'ffn_dim': 16, 'image_size': 32, 'encoder_channels': 8, 'head_channels': 4,
              'adapter_hidden': 8, 'vision_adapter_hidden': 8},
    'schedule': {'steps': 2, 'batch_size': 2, 'log_every': 1},
    'data': {'kmeans_n_init': 2},
}

TINY_WORLD = {'world': {'n_species': 5, 'cats_per_species': 4, 'samples_per_species': 4,
                        'image_size': 32, 'n_folds': 2, 'seed': 2}}


# ============ Helper函数 ============

@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "world.yaml").write_text(yaml.safe_dump(TINY_WORLD), encoding='utf-8')
    (root / "train.yaml").write_text(yaml.safe_dump(TINY_TRAIN), encoding='utf-8')
    assert main(['gen-data', '--config', str(root / "world.yaml"), '--out', str(root / "data")]) == 0
    assert main(['train', '--config', str(root / "train.yaml"), '--data', str(root / "data"),
                 '--setting', 'B', '--fold', '1', '--out', str(root / "ck.kckp")]) == 0
    return root


# ===== 测试1: 全流程 =====

def test_generated_layout(workspace):
    data = workspace / "data"
    assert (data / "world.json").exists()
    assert (data / "samples" / "0000.pgm").exists()
    assert (data / "splits" / "settingA_fold1.json").exists()
    assert (data / "splits" / "settingB_fold2.json").exists()
    assert (workspace / "ck.kckp").exists()


def test_cluster(workspace, capsys):
    out = str(workspace / "grouping.bin")
    code = main(['cluster', '--config', str(workspace / "train.yaml"), '--data', str(workspace / "data"),
                 '--setting', 'A', '--fold', '1', '--out', out])
    assert code == 0
    assert os.path.exists(out) and os.path.exists(out + ".txt")
    assert "group" in capsys.readouterr().out


def test_train_with_precomputed_grouping_and_resume(workspace):
    grouping = str(workspace / "grouping_b.bin")
    common = ['--config', str(workspace / "train.yaml"), '--data', str(workspace / "data"),
              '--setting', 'B', '--fold', '2']
    assert main(['cluster', *common, '--out', grouping]) == 0
    ck = str(workspace / "ck_b2.kckp")
    assert main(['train', *common, '--grouping', grouping, '--out', ck]) == 0
    assert main(['train', *common, '--resume', ck, '--steps', '3', '--out', ck]) == 0


def test_eval_and_report(workspace, capsys):
    first = str(workspace / "eval_max.json")
    second = str(workspace / "eval_greedy.json")
    assert main(['eval', '--ckpt', str(workspace / "ck.kckp"), '--out', first]) == 0
    assert main(['eval', '--ckpt', str(workspace / "ck.kckp"), '--assign', 'greedy', '--out', second]) == 0
    with open(first, encoding='utf-8') as f:
        metrics = json.load(f)
    assert metrics['setting'] == 'B' and metrics['fold'] == 1
    assert 0.0 <= metrics['pck_02'] <= 1.0

    capsys.readouterr()
    report = str(workspace / "report.json")
    assert main(['report', '--in', first, second, '--out', report]) == 0
    with open(report, encoding='utf-8') as f:
        assert len(json.load(f)['folds']) == 2
    assert capsys.readouterr().out.strip()


def test_eval_is_deterministic(workspace):
    paths = [str(workspace / f"det_{i}.json") for i in range(2)]
    for path in paths:
        assert main(['eval', '--ckpt', str(workspace / "ck.kckp"), '--out', path]) == 0
    with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
        assert a.read() == b.read()


def test_infer(workspace, capsys):
    capsys.readouterr()
    image = str(workspace / "data" / "samples" / "0000.pgm")
    code = main(['infer', '--ckpt', str(workspace / "ck.kckp"), '--image', image,
                 '--prompt', 'fox face:nose', '--prompt', 'fox face:left eye'])
    assert code == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [(p['species'], p['category']) for p in lines] == [("fox face", "nose"), ("fox face", "left eye")]


# ===== 测试2: 退出码 =====

class TestExitCodes:

    def test_missing_config(self, tmp_path):
        assert main(['gen-data', '--config', str(tmp_path / "absent.yaml"), '--out', str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(['eval', '--ckpt', str(tmp_path / "absent.kckp")]) == 3

    def test_mode_mismatch(self, workspace):
        assert main(['eval', '--ckpt', str(workspace / "ck.kckp"), '--mode', 'baseline']) == 2

    def test_bad_prompt(self, workspace):
        image = str(workspace / "data" / "samples" / "0000.pgm")
        assert main(['infer', '--ckpt', str(workspace / "ck.kckp"), '--image', image, '--prompt', 'nose']) == 2

    def test_missing_dataset(self, workspace, tmp_path):
        assert main(['train', '--config', str(workspace / "train.yaml"), '--data', str(tmp_path),
                     '--setting', 'A', '--fold', '1', '--out', str(tmp_path / "ck.kckp")]) == 3

    def test_argparse_rejects_unknown_setting(self):
        with pytest.raises(SystemExit):
            main(['eval', '--ckpt', 'x', '--setting', 'C'])


def test_ablate_needs_variants(workspace, tmp_path):
    code = main(['ablate', '--config', str(workspace / "train.yaml"), '--data', str(workspace / "data"),
                 '--setting', 'A', '--fold', '1', '--out', str(tmp_path / "abl")])
    assert code == 2
