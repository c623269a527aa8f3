import json
import struct

import numpy as np
import pytest

from submoe.calib import CalibSet, load_calib, make_calib, save_calib
from submoe.io import (
    BadMagicError,
    LengthMismatchError,
    TruncatedFileError,
    VersionMismatchError,
    decode_checkpoint,
    decode_container,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from submoe.merge import MergeConfig, compress_model
from submoe.cluster import ClusterPlan
from submoe.model import FactoredExpert


def _assert_models_equal(a, b):
    assert a.config == b.config
    for la, lb in zip(a.layers, b.layers):
        assert la.router.tobytes() == lb.router.tobytes()
        assert la.expert_map.tolist() == lb.expert_map.tolist()
        for ea, eb in zip(la.experts, lb.experts):
            assert type(ea) is type(eb)
            for role in ("gate", "up", "down"):
                assert ea.weight(role).tobytes() == eb.weight(role).tobytes()


def test_roundtrip_bitwise(tmp_path, small_model):
    p = tmp_path / "m.smoe"
    save_checkpoint(small_model, p)
    loaded = load_checkpoint(p)
    _assert_models_equal(small_model, loaded)
    p2 = tmp_path / "m2.smoe"
    save_checkpoint(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_layout(small_model):
    buf = encode_checkpoint(small_model)
    magic, version, hlen = struct.unpack_from("<4sIQ", buf)
    assert magic == b"SMOE" and version == 1
    header = json.loads(buf[16 : 16 + hlen])
    assert header["config"]["n_experts"] == 6
    assert header["expert_maps"] == [list(range(6))] * 2
    assert header["tensors"][0] == {"name": "layer.0.router", "dtype": "f32", "shape": [6, 8], "offset": 0}
    payload_start = (16 + hlen + 7) // 8 * 8
    assert len(buf) - payload_start == sum(np.prod(t["shape"]) * 4 for t in header["tensors"])
    assert buf[16 + hlen : payload_start] == b"\x00" * (payload_start - 16 - hlen)


def test_bad_magic(small_model):
    buf = bytearray(encode_checkpoint(small_model))
    buf[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode_checkpoint(bytes(buf))


def test_version_mismatch(small_model):
    buf = bytearray(encode_checkpoint(small_model))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(bytes(buf))


def test_truncated(small_model):
    buf = encode_checkpoint(small_model)
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(buf[:10])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(buf[:40])
    with pytest.raises(LengthMismatchError):
        decode_checkpoint(buf[:-4])


def test_header_shape_edit_without_payload(small_model):
    buf = encode_checkpoint(small_model)
    _, _, hlen = struct.unpack_from("<4sIQ", buf)
    header = json.loads(buf[16 : 16 + hlen])
    header["tensors"][0]["shape"] = [7, 8]
    hb = json.dumps(header, separators=(",", ":")).encode()
    pad = (-(16 + len(hb))) % 8
    old_start = (16 + hlen + 7) // 8 * 8
    forged = struct.pack("<4sIQ", b"SMOE", 1, len(hb)) + hb + b"\0" * pad + buf[old_start:]
    with pytest.raises(LengthMismatchError):
        decode_checkpoint(forged)


def test_factored_roundtrip(tmp_path, dup_model, dup_trace):
    plan = ClusterPlan([[[i, i + 4] for i in range(4)]] * 2, 1, 0.5, 8)
    out, _ = compress_model(dup_model, plan, dup_trace, MergeConfig(rank_ratio=0.3, store_factored=True))
    assert isinstance(out.layers[0].experts[0], FactoredExpert)
    p = tmp_path / "f.smoe"
    save_checkpoint(out, p)
    loaded = load_checkpoint(p)
    assert isinstance(loaded.layers[0].experts[0], FactoredExpert)
    assert loaded.layers[1].expert_map.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    p2 = tmp_path / "f2.smoe"
    save_checkpoint(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_calib_file_roundtrip(tmp_path):
    c = make_calib(5, m=7, seed=1)
    p = tmp_path / "c.smoe"
    save_calib(c, p)
    back = load_calib(p)
    assert back.tokens.tobytes() == c.tokens.tobytes()
    header, tensors = decode_container(p.read_bytes())
    assert [t["name"] for t in header["tensors"]] == ["calib"]
    assert tensors["calib"].shape == (7, 5)
