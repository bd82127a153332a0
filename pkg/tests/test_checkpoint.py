import struct
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from cov3d.checkpoint import (
    Checkpoint,
    CheckpointError,
    decode,
    encode,
    load_checkpoint,
    load_into,
    save_checkpoint,
    transfer_init,
)
from cov3d.model import build_model, preset


@pytest.fixture
def tiny():
    return build_model(preset("tiny3d"), init_seed=1)


def test_roundtrip_bit_exact(tiny, tmp_path):
    save_checkpoint(tiny, tmp_path / "m.c3dw")
    ckpt = load_checkpoint(tmp_path / "m.c3dw")
    state = tiny.state_dict()
    assert list(ckpt.entries) == list(state)
    for name, arr in state.items():
        assert ckpt.entries[name].tobytes() == arr.tobytes(), name
    assert ckpt.metadata["model"] == preset("tiny3d").to_dict()
    other = build_model(preset("tiny3d"), init_seed=2)
    load_into(other, ckpt)
    for name, arr in other.state_dict().items():
        assert arr.tobytes() == state[name].tobytes()


def test_header_layout():
    ckpt = Checkpoint(OrderedDict(w=np.array([[1.0, 2.0, 3.0]], dtype=np.float32)), {"a": 1})
    buf = encode(ckpt)
    meta = b'{"a": 1}'
    expected = (b"C3DW" + struct.pack("<II", 1, len(meta)) + meta + struct.pack("<I", 1)
                + struct.pack("<H", 1) + b"w" + bytes([0, 2]) + struct.pack("<II", 1, 3)
                + np.array([1, 2, 3], "<f4").tobytes())
    assert buf == expected


def test_truncated_file_rejected_without_mutation(tiny, tmp_path):
    save_checkpoint(tiny, tmp_path / "m.c3dw")
    buf = (tmp_path / "m.c3dw").read_bytes()
    (tmp_path / "t.c3dw").write_bytes(buf[: len(buf) - 10])
    target = build_model(preset("tiny3d"), init_seed=5)
    before = {k: v.copy() for k, v in target.state_dict().items()}
    with pytest.raises(CheckpointError, match="truncated") as info:
        load_into(target, load_checkpoint(tmp_path / "t.c3dw"))
    assert info.value.offset is not None
    for k, v in target.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b + b"\x00", "trailing"),
])
def test_corruption_detected(tiny, mutate, match):
    with pytest.raises(CheckpointError, match=match):
        decode(mutate(encode(Checkpoint.from_model(tiny))))


def test_empty_checkpoint(tmp_path):
    meta = b"{}"
    (tmp_path / "e.c3dw").write_bytes(b"C3DW" + struct.pack("<II", 1, 2) + meta + struct.pack("<I", 0))
    with pytest.raises(CheckpointError, match="empty checkpoint"):
        load_checkpoint(tmp_path / "e.c3dw")
    with pytest.raises(CheckpointError, match="empty checkpoint"):
        encode(Checkpoint(OrderedDict()))


def test_transfer_identical_config(tiny):
    target = build_model(preset("tiny3d"), init_seed=9)
    rep = transfer_init(target, Checkpoint.from_model(tiny), reinit_head=False)
    assert rep.skipped == []
    assert len(rep.loaded) == len(tiny.state_dict())


def test_transfer_mismatched_head(tiny):
    three = build_model(replace(preset("tiny3d"), num_classes=3), init_seed=4)
    ckpt = Checkpoint.from_model(three)
    target = build_model(preset("tiny3d"), init_seed=9)
    rep = transfer_init(target, ckpt)
    assert sorted(n for n, _ in rep.skipped) == ["head.bias", "head.weight"]
    assert all(not n.startswith("head.") for n in rep.loaded)
    assert len(rep.loaded) == len(target.state_dict()) - 2
    state = target.state_dict()
    for name in rep.loaded:
        assert state[name].tobytes() == ckpt.entries[name].tobytes()
    assert state["head.weight"].shape == (2, 256)
    assert not state["head.bias"].any()


def test_transfer_mismatch_without_head_reinit_skips_and_reports(tiny):
    three = build_model(replace(preset("tiny3d"), num_classes=3), init_seed=4)
    target = build_model(preset("tiny3d"), init_seed=9)
    rep = transfer_init(target, Checkpoint.from_model(three), reinit_head=False)
    assert sorted(n for n, _ in rep.skipped) == ["head.bias", "head.weight"]
    with pytest.raises(CheckpointError, match="head.weight"):
        transfer_init(target, Checkpoint.from_model(three), skip_mismatched=False, reinit_head=False)


def test_transfer_empty_intersection_strict():
    ckpt = Checkpoint(OrderedDict(unrelated=np.zeros(3, np.float32)))
    target = build_model(preset("tiny3d"))
    before = target.state_dict()["stem.conv.weight"].copy()
    with pytest.raises(CheckpointError, match="unrelated"):
        transfer_init(target, ckpt, skip_mismatched=False)
    np.testing.assert_array_equal(target.state_dict()["stem.conv.weight"], before)
