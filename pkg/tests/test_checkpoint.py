import struct

import numpy as np
import pytest

from muca import checkpoint
from muca.ctsa import CtsaParams
from muca.errors import DataError
from muca.model import SegModel, StageSpec

SPEC = StageSpec(channels=(4, 4, 8, 8), decoder_channels=8, dropout_rate=0.2)


def _models():
    s = SegModel(SPEC, seed=1)
    t = SegModel(SPEC, seed=2, requires_grad=False)
    return s, t, CtsaParams.init(8, 2, seed=3)


def test_round_trip(tmp_path):
    s, t, c = _models()
    path = tmp_path / "a.ckpt"
    checkpoint.save(path, s, t, c, {"lr0": 0.007, "mode": "muca"})
    got = checkpoint.load(path)
    assert got["spec"] == SPEC
    assert got["meta"]["mode"] == "muca" and got["meta"]["lr0"] == "0.007"
    for a, b in ((got["student"], s), (got["teacher"], t)):
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)
    for (_, pa), (_, pb) in zip(got["ctsa"].named_parameters(), c.named_parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert not got["teacher"].parameters()[0].requires_grad


def test_bytes_are_deterministic():
    s, t, c = _models()
    assert checkpoint.dumps(s, t, c, {"a": 1}) == checkpoint.dumps(s, t, c, {"a": 1})


def test_bad_magic_refused():
    s, t, c = _models()
    raw = bytearray(checkpoint.dumps(s, t, c))
    raw[:4] = b"NOPE"
    with pytest.raises(DataError, match="magic"):
        checkpoint.loads(bytes(raw))


def test_version_mismatch_refused():
    s, t, c = _models()
    raw = bytearray(checkpoint.dumps(s, t, c))
    raw[4:6] = struct.pack("<H", checkpoint.VERSION + 1)
    with pytest.raises(DataError, match="version"):
        checkpoint.loads(bytes(raw))


def test_truncated_refused():
    s, t, c = _models()
    raw = checkpoint.dumps(s, t, c)
    with pytest.raises(DataError, match="truncated"):
        checkpoint.loads(raw[:len(raw) // 2])


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        checkpoint.load(tmp_path / "nope.ckpt")
