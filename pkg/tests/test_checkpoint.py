import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from trihorn.checkpoint import (CheckpointError, decode, encode, load_checkpoint, load_model_weights,
                                save_checkpoint, save_model)
from trihorn.config import preset_config
from trihorn.model import build_model


def handmade(name, arr):
    """The expected bytes for a single-record file, laid out field by field."""
    arr = np.asarray(arr, dtype="<f4")
    body = b"THN1" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    nb = name.encode("utf-8")
    body += len(nb).to_bytes(4, "little") + nb + arr.ndim.to_bytes(4, "little")
    for d in arr.shape:
        body += d.to_bytes(8, "little")
    body += arr.tobytes()
    return body + (zlib.crc32(body) & 0xFFFFFFFF).to_bytes(4, "little")


class TestFormat:
    def test_matches_handmade_layout(self):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        assert encode({"w": a}) == handmade("w", a)

    def test_scalar_and_unicode_name(self):
        state = {"gewicht_ä": np.float32(2.5).reshape(()), "b": np.zeros(0, dtype=np.float32)}
        out = decode(encode(state))
        assert list(out) == list(state)
        assert out["gewicht_ä"].shape == () and out["gewicht_ä"] == 2.5
        assert out["b"].shape == (0,)

    def test_float64_stored_as_float32(self):
        out = decode(encode({"x": np.array([1 / 3], dtype=np.float64)}))
        assert out["x"].dtype == np.float32
        assert out["x"][0] == np.float32(1 / 3)

    def test_empty_state(self):
        assert decode(encode({})) == {}

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                      elements=st.floats(-1e6, 1e6, width=32)))
    def test_round_trip_property(self, arr):
        out = decode(encode({"p": arr}))["p"]
        assert out.shape == arr.shape
        assert out.tobytes() == arr.astype("<f4").tobytes()


class TestCorruption:
    def blob(self):
        return encode({"a": np.ones((3, 3), np.float32), "b": np.arange(4, dtype=np.float32)})

    def test_bad_magic(self):
        b = bytearray(self.blob())
        b[:4] = b"XXXX"
        with pytest.raises(CheckpointError, match="magic"):
            decode(bytes(b))

    @pytest.mark.parametrize("pos", [8, 20, 40, -5])
    def test_flipped_byte(self, pos):
        b = bytearray(self.blob())
        b[pos] ^= 0x40
        with pytest.raises(CheckpointError, match="CRC"):
            decode(bytes(b))

    def test_truncated(self):
        with pytest.raises(CheckpointError):
            decode(self.blob()[:-10])

    def test_wrong_version(self):
        body = bytearray(self.blob()[:-4])
        body[4:8] = struct.pack("<I", 7)
        blob = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
        with pytest.raises(CheckpointError, match="version"):
            decode(blob)

    def test_trailing_bytes(self):
        body = self.blob()[:-4] + b"\0\0\0\0"
        with pytest.raises(CheckpointError, match="trailing"):
            decode(body + struct.pack("<I", zlib.crc32(body)))


class TestFiles:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = build_model(preset_config("default", n_joints=14).model_spec(), seed=3)
        p1 = save_model(tmp_path / "a.thn", model)
        other = build_model(preset_config("default", n_joints=14).model_spec(), seed=99)
        load_model_weights(p1, other)
        p2 = save_model(tmp_path / "b.thn", other)
        assert p1.read_bytes() == p2.read_bytes()

    def test_no_temp_left_behind(self, tmp_path):
        save_checkpoint(tmp_path / "m.thn", {"x": np.ones(2, np.float32)})
        assert sorted(p.name for p in tmp_path.iterdir()) == ["m.thn"]

    def test_load_restores_values(self, tmp_path):
        state = {"k": np.random.default_rng(0).standard_normal((2, 5)).astype(np.float32)}
        save_checkpoint(tmp_path / "m.thn", state)
        np.testing.assert_array_equal(load_checkpoint(tmp_path / "m.thn")["k"], state["k"])

    def test_mismatched_model_rejected(self, tmp_path):
        small = build_model(preset_config("toy").model_spec(), seed=0)
        big = build_model(preset_config("default").model_spec(), seed=0)
        p = save_model(tmp_path / "s.thn", small)
        with pytest.raises((KeyError, ValueError)):
            load_model_weights(p, big)
