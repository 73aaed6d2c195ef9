import struct

import numpy as np
import pytest
import torch

from importantaug import checkpoint
from importantaug.errors import CheckpointError
from importantaug.models import Recognizer, init_params


@pytest.fixture(scope="module")
def rec():
    return init_params(0, n_classes=4)[0]


def test_round_trip_is_exact(rec, tmp_path):
    ckpt = checkpoint.from_module("recognizer", rec, {"seed": 0}, {"words": list("abcd")})
    path = checkpoint.save(ckpt, tmp_path / "r.ckpt")
    loaded = checkpoint.load(path, "recognizer")
    assert loaded.meta == {"words": list("abcd")} and loaded.config == {"seed": 0}
    fresh = loaded.load_into(Recognizer(n_classes=4))
    for a, b in zip(rec.parameters(), fresh.parameters()):
        assert torch.equal(a, b)
    x = torch.randn(2, 257, 126)
    assert torch.equal(rec(x), fresh(x))


def test_equal_content_equal_bytes(rec):
    a = checkpoint.dumps(checkpoint.from_module("recognizer", rec, {"b": 1, "a": 2}))
    b = checkpoint.dumps(checkpoint.from_module("recognizer", rec, {"a": 2, "b": 1}))
    assert a == b


def test_version_mismatch(rec):
    blob = bytearray(checkpoint.dumps(checkpoint.from_module("recognizer", rec)))
    struct.pack_into("<I", blob, 8, 99)
    with pytest.raises(CheckpointError, match="version 99"):
        checkpoint.loads(bytes(blob))


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + bytes(20))


def test_truncated(rec):
    blob = checkpoint.dumps(checkpoint.from_module("recognizer", rec))
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob[:-8])


def test_kind_mismatch(rec, tmp_path):
    path = checkpoint.save(checkpoint.from_module("recognizer", rec), tmp_path / "r.ckpt")
    with pytest.raises(CheckpointError, match="expected generator"):
        checkpoint.load(path, "generator")


def test_shape_mismatch(rec):
    ckpt = checkpoint.from_module("recognizer", rec)
    with pytest.raises(CheckpointError):
        ckpt.load_into(Recognizer(n_classes=5))


def test_nan_meta_refused(rec):
    with pytest.raises(ValueError):
        checkpoint.dumps(checkpoint.from_module("recognizer", rec, meta={"x": float("nan")}))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "nope.ckpt")
