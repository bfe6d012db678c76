import json
import struct
import zlib

import numpy as np
import pytest

from patchssl.container import MAGIC, ContainerError, load_container, read_header, save_container
from patchssl.seeds import STREAMS, derive_seed, rng_for


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
               "scalar": np.float32(2.5), "empty": np.zeros((0, 3), np.float32)}
    save_container(tmp_path / "x.bin", tensors, {"k": [1, 2]})
    back, meta = load_container(tmp_path / "x.bin")
    assert meta == {"k": [1, 2]}
    for k, v in tensors.items():
        assert back[k].dtype == np.float32 and back[k].shape == np.shape(v)
        assert back[k].tobytes() == np.asarray(v).tobytes()


def test_layout(tmp_path):
    save_container(tmp_path / "x.bin", {"w": np.array([1.0, 2.0])}, {})
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    blob = raw[16 + n:]
    assert header["tensors"]["w"] == {"dtype": "<f4", "shape": [2], "offset": 0, "nbytes": 8}
    assert header["crc32"] == zlib.crc32(blob)
    assert np.frombuffer(blob, "<f4").tolist() == [1.0, 2.0]
    assert read_header(tmp_path / "x.bin")["data_bytes"] == 8


def test_corruption_is_detected(tmp_path):
    save_container(tmp_path / "x.bin", {"w": np.arange(10, dtype=np.float32)}, {})
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-3])
    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    (tmp_path / "flip.bin").write_bytes(bytes(flipped))
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short.bin").write_bytes(raw[:12])
    for name in ("trunc", "flip", "magic", "short"):
        with pytest.raises(ContainerError):
            load_container(tmp_path / f"{name}.bin")
    assert issubclass(ContainerError, OSError)


def test_no_temp_file_left(tmp_path):
    save_container(tmp_path / "x.bin", {"w": np.zeros(2)}, {})
    assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]


def test_seed_streams_are_independent_and_stable():
    assert derive_seed(0, "train", 4, 0) == derive_seed(0, "train", 4, 0)
    seeds = {derive_seed(0, s, 4, 0) for s in STREAMS}
    assert len(seeds) == len(STREAMS)
    assert derive_seed(0, "train", 4, 0) != derive_seed(0, "train", 4, 1)
    assert derive_seed(0, "train", 4, 0) != derive_seed(1, "train", 4, 0)
    assert rng_for(3, "epoch", 7).random() == rng_for(3, "epoch", 7).random()
    with pytest.raises(KeyError):
        derive_seed(0, "nope")
