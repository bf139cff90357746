import struct

import pytest
import torch

from defectgen import checkpoint


def test_round_trip_nested(tmp_path):
    meta = {"step": 3, "name": "x", "params": {"w": torch.randn(2, 3), "b": torch.arange(4)},
            "opt": {"state": {0: {"exp_avg": torch.ones(2, dtype=torch.float64)}}, "groups": [{"lr": 0.1}]},
            "combos": [["disc", "spot"]]}
    checkpoint.save(tmp_path / "c.ckpt", meta)
    back = checkpoint.load(tmp_path / "c.ckpt")
    assert back["step"] == 3 and back["combos"] == [["disc", "spot"]]
    assert torch.equal(back["params"]["w"], meta["params"]["w"])
    assert back["params"]["b"].dtype == torch.int64
    assert torch.equal(back["opt"]["state"][0]["exp_avg"], meta["opt"]["state"][0]["exp_avg"])


def test_header_layout():
    blob = checkpoint.dumps({"t": torch.tensor([1.0], dtype=torch.float32)})
    assert blob[:8] == b"DGCKPT\r\n"
    version, endian, hdr_len = struct.unpack_from("<IBQ", blob, 8)
    assert (version, endian) == (1, 0)
    assert blob[-4:] == struct.pack("<f", 1.0)
    assert len(blob) == 8 + 13 + hdr_len + 4


def test_rejects_bad_files():
    blob = bytearray(checkpoint.dumps({"a": 1}))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + bytes(blob[8:]))
    blob[8] = 9
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(bytes(blob))
