import numpy as np
import pytest

from monotakd import container


def sample(rng):
    return {"a/x": rng.normal(size=(3, 4)), "a/y": rng.normal(size=5).astype(np.float32),
            "b": np.arange(6, dtype=np.int64).reshape(2, 3), "scalar": np.array(2.5), "empty": np.zeros((0, 3))}


def test_round_trip_bit_exact(rng, tmp_path):
    recs = sample(rng)
    back = container.read(container.write(tmp_path / "x.takd", recs))
    assert list(back) == list(recs)
    for k, v in recs.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_encoding_is_deterministic(rng):
    recs = sample(rng)
    assert container.encode(recs) == container.encode(dict(recs))


def test_flipped_payload_byte_fails_checksum(rng):
    buf = bytearray(container.encode({"w": rng.normal(size=16)}))
    buf[-10] ^= 0x01
    with pytest.raises(container.ChecksumError):
        container.decode(bytes(buf))


@pytest.mark.parametrize("buf", [b"", b"TAKD", b"NOPE\x01\x00\x00\x00\x00\x00"])
def test_malformed_inputs(buf):
    with pytest.raises(container.ContainerError):
        container.decode(buf)


def test_truncated_and_trailing(rng):
    buf = container.encode({"w": rng.normal(size=4)})
    with pytest.raises(container.ContainerError):
        container.decode(buf[:-1])
    with pytest.raises(container.ContainerError):
        container.decode(buf + b"\x00")


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        container.encode({"u": np.zeros(3, dtype=np.uint8)})


def test_group_and_flatten():
    tree = {"teacher": {"conv": {"w": np.ones(2)}}, "meta": np.zeros(1)}
    flat = dict(container.flatten(tree))
    assert set(flat) == {"teacher/conv/w", "meta"}
    assert list(container.group(flat, "teacher")) == ["conv/w"]
