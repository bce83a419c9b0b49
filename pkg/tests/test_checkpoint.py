import struct

import numpy as np
import pytest

from dynfusion.checkpoint import MAGIC, Checkpoint
from dynfusion.errors import CheckpointError
from dynfusion.rng import PCG32


def sample():
    rng = PCG32(0, 31)
    ckpt = Checkpoint(metadata={"stage": 3, "seed": 7, "model_config": {"d": [1, 2]}})
    ckpt.add("fusion.w_t", np.array([1.0]))
    ckpt.add("tf.blocks.0.weight", rng.normal(2 * 1 * 3 * 3).reshape(2, 1, 3, 3))
    ckpt.add("scalar", np.array(2.5))
    ckpt.add("empty", np.zeros((0, 4)))
    return ckpt


class TestCheckpoint:
    def test_byte_round_trip(self, tmp_path):
        ckpt = sample()
        blob = ckpt.to_bytes()
        back = Checkpoint.from_bytes(blob)
        assert back.names() == ckpt.names()
        assert back.metadata == ckpt.metadata
        for name in ckpt.names():
            assert back[name].shape == ckpt[name].shape
            assert back[name].tobytes() == ckpt[name].tobytes()
        assert back.to_bytes() == blob
        ckpt.save(tmp_path / "c.ckpt")
        assert (tmp_path / "c.ckpt").read_bytes() == blob

    def test_header_layout(self):
        blob = sample().to_bytes()
        assert blob[:4] == MAGIC
        assert struct.unpack("<I", blob[4:8]) == (1,)

    def test_payload_size(self):
        ckpt = Checkpoint()
        ckpt.add("w", np.zeros((3, 5)))
        # magic, version, meta_len, "{}", count, name_len, "w", dtype+rank, 2 dims, payload
        assert len(ckpt.to_bytes()) == 4 + 4 + 4 + 2 + 4 + 4 + 1 + 5 + 16 + 8 * 15

    def test_special_values_preserved(self):
        ckpt = Checkpoint()
        ckpt.add("v", np.array([-0.0, 5e-324, 1.7976931348623157e308]))
        back = Checkpoint.from_bytes(ckpt.to_bytes())
        assert back["v"].tobytes() == ckpt["v"].tobytes()

    def test_duplicate_name(self):
        ckpt = Checkpoint()
        ckpt.add("a", np.zeros(1))
        with pytest.raises(CheckpointError):
            ckpt.add("a", np.zeros(1))

    @pytest.mark.parametrize("cut", [3, 10, 40, -1])
    def test_truncated(self, cut):
        blob = sample().to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(blob[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(sample().to_bytes() + b"\x00")

    def test_bad_magic_and_version(self):
        blob = sample().to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(blob[:4] + struct.pack("<I", 9) + blob[8:])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nope.ckpt")
