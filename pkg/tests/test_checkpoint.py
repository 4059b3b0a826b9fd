import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hyperguide.checkpoint import (MAGIC, Checkpoint, ComponentMismatch, CorruptCheckpoint, FingerprintMismatch,
                                   VersionMismatch, decode, encode, fingerprint, load_checkpoint, prefixed,
                                   save_checkpoint, unprefix)


def sample():
    rng = np.random.default_rng(0)
    arrays = {"w": rng.standard_normal((3, 4)), "ids": np.arange(5), "mask": np.array([True, False]),
              "scalar": np.array(2.5), "empty": np.zeros((0, 3))}
    return Checkpoint("thing", arrays, fingerprint="abc", seed=3, meta={"k": [1, 2], "name": "x"})


def test_round_trip_bit_exact(tmp_path):
    ck = sample()
    path = save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(path, "thing", "abc")
    assert back.component == "thing" and back.seed == 3 and back.meta == ck.meta
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype.kind == v.dtype.kind
        assert np.array_equal(back.arrays[k], v) and back.arrays[k].shape == v.shape
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_resave_is_byte_identical(tmp_path):
    a = save_checkpoint(tmp_path / "a.ckpt", sample())
    b = save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_insertion_order_irrelevant():
    ck = sample()
    flipped = Checkpoint(ck.component, dict(reversed(list(ck.arrays.items()))), ck.fingerprint, ck.seed, ck.meta)
    assert encode(ck) == encode(flipped)


def test_special_floats_survive():
    ck = Checkpoint("c", {"x": np.array([np.nan, np.inf, -0.0, 5e-324])})
    back = decode(encode(ck)).arrays["x"]
    assert np.array_equal(back.view(np.int64), ck.arrays["x"].view(np.int64))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, width=64)))
def test_any_float_array_round_trips(a):
    back = decode(encode(Checkpoint("c", {"a": a}))).arrays["a"]
    assert back.shape == a.shape and back.tobytes() == np.ascontiguousarray(a).tobytes()


def test_errors(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", sample())
    with pytest.raises(ComponentMismatch):
        load_checkpoint(path, "other")
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(path, "thing", "zzz")
    assert load_checkpoint(path, "thing", "zzz", force=True).fingerprint == "abc"
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_corruption_detected(tmp_path):
    data = bytearray(encode(sample()))
    data[-1] ^= 0xFF
    with pytest.raises(CorruptCheckpoint):
        decode(bytes(data))
    with pytest.raises(CorruptCheckpoint):
        decode(b"not a checkpoint")
    with pytest.raises(CorruptCheckpoint):
        decode(MAGIC + b"\x01")


def test_version_mismatch():
    data = bytearray(encode(sample()))
    data[len(MAGIC)] = 99
    with pytest.raises(VersionMismatch):
        decode(bytes(data))


def test_unsupported_dtype():
    with pytest.raises(Exception):
        encode(Checkpoint("c", {"s": np.array(["a"])}))


def test_fingerprint_canonical():
    assert fingerprint({"a": 1, "b": (1, 2)}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})
    assert len(fingerprint({})) == 64


def test_prefix_helpers():
    flat = prefixed({"enc": {"w": 1}, "dec": {"w": 2}})
    assert flat == {"enc/w": 1, "dec/w": 2}
    assert unprefix(flat, "dec") == {"w": 2}
