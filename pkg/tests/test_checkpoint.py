"""Checkpoint binary format: byte layout, round-trips, error handling."""

import struct

import numpy as np
import pytest

from mlsa4rec.tensor import (CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             CheckpointError, ParameterStore,
                             load_checkpoint, save_checkpoint)


@pytest.fixture
def store():
    s = ParameterStore(0)
    s.uniform("embedding.M", (5, 3), 3)
    s.zeros("head.b", (4,))
    s.add("scalar_rowvec", np.array([1.5, -2.5]))
    return s


class TestRoundTrip:
    def test_bit_exact(self, store, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(store, path)
        loaded = load_checkpoint(path)
        assert loaded.names() == store.names()
        for name in store.names():
            np.testing.assert_array_equal(loaded[name].data, store[name].data)

    def test_gradients_never_serialized(self, store, tmp_path):
        store["head.b"].grad += 123.0
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(store, path)
        loaded = load_checkpoint(path)
        assert np.all(loaded["head.b"].grad == 0.0)
        # value payload identical whether grads were set or not
        store.zero_grads()
        path2 = str(tmp_path / "m2.ckpt")
        save_checkpoint(store, path2)
        assert open(path, "rb").read() == open(path2, "rb").read()


class TestByteLayout:
    def test_header(self, store, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(store, path)
        blob = open(path, "rb").read()
        assert blob[:4] == CHECKPOINT_MAGIC == b"MLSA"
        version, count = struct.unpack_from("<II", blob, 4)
        assert version == CHECKPOINT_VERSION
        assert count == 3

    def test_first_record_fields(self, store, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(store, path)
        blob = open(path, "rb").read()
        off = 12
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        assert name == "embedding.M"
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from("<2I", blob, off)
        off += 8
        assert rank == 2 and dims == (5, 3)
        values = np.frombuffer(blob, dtype="<f4", count=15, offset=off)
        np.testing.assert_array_equal(values.reshape(5, 3),
                                      store["embedding.M"].data)

    def test_values_little_endian_f32(self, tmp_path):
        s = ParameterStore(0)
        s.add("x", np.array([1.0]))
        path = str(tmp_path / "one.ckpt")
        save_checkpoint(s, path)
        assert open(path, "rb").read()[-4:] == struct.pack("<f", 1.0)


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.ckpt")
        open(path, "wb").write(b"NOPE" + b"\x00" * 8)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_version(self, store, tmp_path):
        path = str(tmp_path / "v.ckpt")
        save_checkpoint(store, path)
        blob = bytearray(open(path, "rb").read())
        blob[4:8] = struct.pack("<I", 99)
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_garbage(self, store, tmp_path):
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(store, path)
        with open(path, "ab") as fh:
            fh.write(b"\x00\x01")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
