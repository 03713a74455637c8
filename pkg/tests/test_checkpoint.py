import numpy as np
import pytest

from fuselab import checkpoint as ckpt_io
from fuselab.errors import FormatError


def sample():
    rng = np.random.default_rng(0)
    return ckpt_io.Checkpoint(
        model={"width": 8}, train={"lr0": 1e-3}, meta={"epoch": 3},
        tensors={"param/w": rng.standard_normal((2, 3)).astype(np.float32),
                 "adam.m/w": rng.standard_normal((2, 3))},
        rng_state=np.random.default_rng(1).bit_generator.state)


def test_round_trip(tmp_path):
    ck = sample()
    ckpt_io.save(ck, tmp_path / "a.u2ck")
    back = ckpt_io.load(tmp_path / "a.u2ck")
    assert back.model == ck.model and back.meta == ck.meta and back.rng_state == ck.rng_state
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v)
    assert set(back.group("param")) == {"w"}


def test_encoding_is_deterministic():
    assert ckpt_io.encode(sample()) == ckpt_io.encode(sample())


def test_corruption_is_rejected():
    buf = ckpt_io.encode(sample())
    with pytest.raises(FormatError, match="magic"):
        ckpt_io.decode(b"XXXX" + buf[4:])
    for cut in (5, 40, len(buf) - 1):
        with pytest.raises(FormatError, match="offset"):
            ckpt_io.decode(buf[:cut])
    with pytest.raises(FormatError):
        ckpt_io.decode(buf + b"!")
