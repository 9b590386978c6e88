"""
检查点存储测试

测试覆盖：
1. 保存 → 读取 → 再保存逐字节相同；张量/配置/分组/日志尾完整恢复
2. 损坏检测：missing / bad_magic / version_mismatch / truncated / checksum
3. 调用方配置与快照不同 → 以快照为准并告警
4. 分组文件 KGRP 与人类可读 sidecar
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import logging
import struct

import numpy as np
import pytest

from models.errors import CheckpointError
from models.matching_types import Grouping
from kdsm_engine.checkpoint_store import (
    Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, load_grouping,
    save_checkpoint, save_grouping,
)


# ============ Helper函数 ============

def make_grouping():
    return Grouping(centroids=np.arange(6, dtype=np.float64).reshape(3, 2) / 7.0,
                    assignment={("fox face", "nose"): 2, ("fox face", "left eye"): 0, ("cat face", "nose"): 2},
                    objective=0.125, objective_history=(1.5, 0.5, 0.125))


def make_checkpoint(with_grouping=True):
    rng = np.random.default_rng(0)
    return Checkpoint(
        config={'model': {'mode': 'kdsm', 'K': 3}, 'seed': 0, 'version': 'abc'},
        tensors={'encoder.conv0.w': rng.normal(size=(2, 1, 3, 3)),
                 'head.out.b': rng.normal(size=4),
                 'adam.t': np.array([7.0]),
                 'scalar': np.array(3.25)},
        grouping=make_grouping() if with_grouping else None,
        log_tail=[{'step': 6, 'loss': 0.5}],
        step=7,
        meta={'setting': 'A', 'fold': 1},
    )


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "ck.kckp"
    save_checkpoint(make_checkpoint(), str(path))
    return path


# ===== 测试1: 往返 =====

class TestRoundTrip:

    def test_resave_is_byte_identical(self, saved, tmp_path):
        again = tmp_path / "again.kckp"
        save_checkpoint(load_checkpoint(str(saved)), str(again))
        assert saved.read_bytes() == again.read_bytes()

    def test_contents_restored(self, saved):
        original = make_checkpoint()
        ckpt = load_checkpoint(str(saved))
        assert ckpt.config == original.config
        assert ckpt.step == 7
        assert ckpt.meta == {'setting': 'A', 'fold': 1}
        assert ckpt.log_tail == [{'step': 6, 'loss': 0.5}]
        for name, arr in original.tensors.items():
            assert ckpt.tensors[name].shape == arr.shape
            assert np.array_equal(ckpt.tensors[name], arr)
        assert set(ckpt.param_arrays) == {'encoder.conv0.w', 'head.out.b', 'scalar'}
        assert set(ckpt.optimizer_arrays) == {'adam.t'}

    def test_grouping_restored_with_sidecar(self, saved):
        grouping = load_checkpoint(str(saved)).grouping
        assert grouping.assignment == make_grouping().assignment
        assert np.array_equal(grouping.centroids, make_grouping().centroids)
        assert grouping.objective_history == (1.5, 0.5, 0.125)
        sidecar = (saved.parent / "ck.kckp.groups.txt").read_text(encoding='utf-8').splitlines()
        assert sidecar[0].startswith("#")
        assert sidecar[1] == "cat face\tnose\t2"

    def test_without_grouping(self):
        ckpt = decode_checkpoint(encode_checkpoint(make_checkpoint(with_grouping=False)))
        assert ckpt.grouping is None


# ===== 测试2: 损坏 =====

class TestCorruption:

    def _reason(self, path):
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(str(path))
        return exc.value.reason

    def test_missing(self, tmp_path):
        assert self._reason(tmp_path / "nope.kckp") == 'missing'

    def test_flipped_payload_byte(self, saved):
        data = bytearray(saved.read_bytes())
        data[40] ^= 0xFF
        saved.write_bytes(bytes(data))
        assert self._reason(saved) == 'checksum'

    def test_truncated(self, saved):
        data = saved.read_bytes()
        saved.write_bytes(data[:len(data) - 10])
        assert self._reason(saved) == 'truncated'

    def test_shorter_than_header(self, saved):
        saved.write_bytes(b"KCKP\x01")
        assert self._reason(saved) == 'truncated'

    def test_bad_magic(self, saved):
        data = saved.read_bytes()
        saved.write_bytes(b"XXXX" + data[4:])
        assert self._reason(saved) == 'bad_magic'

    def test_version_mismatch(self, saved):
        data = bytearray(saved.read_bytes())
        data[4:8] = struct.pack('<I', 99)
        saved.write_bytes(bytes(data))
        assert self._reason(saved) == 'version_mismatch'

    def test_exit_code_is_data_error(self, tmp_path):
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(str(tmp_path / "nope.kckp"))
        assert exc.value.exit_code == 3


# ===== 测试3: 配置快照优先 =====

def test_snapshot_config_wins_with_warning(saved, caplog):
    with caplog.at_level(logging.WARNING):
        ckpt = load_checkpoint(str(saved), requested_config={'model': {'mode': 'baseline'}})
    assert ckpt.config['model']['mode'] == 'kdsm'
    assert any("snapshot" in r.getMessage() for r in caplog.records)


def test_same_config_no_warning(saved, caplog):
    with caplog.at_level(logging.WARNING):
        load_checkpoint(str(saved), requested_config=make_checkpoint().config)
    assert not [r for r in caplog.records if r.levelno >= logging.WARNING]


# ===== 测试4: 分组文件 =====

def test_grouping_file_round_trip(tmp_path):
    path = tmp_path / "grouping.bin"
    save_grouping(make_grouping(), str(path))
    loaded = load_grouping(str(path))
    assert loaded.assignment == make_grouping().assignment
    assert loaded.O == 3
    assert (tmp_path / "grouping.bin.txt").exists()


def test_grouping_file_rejects_checkpoint_magic(saved):
    with pytest.raises(CheckpointError) as exc:
        load_grouping(str(saved))
    assert exc.value.reason == 'bad_magic'
