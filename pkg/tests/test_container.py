import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icm_fusion.container import (FORMAT_VERSION, MAGIC, ChecksumMismatch, ContainerError,
                                  DuplicateSection, MalformedContainer, VersionMismatch, crc64,
                                  decode_container, encode_container, load_container,
                                  save_container)


def _same(a: dict, b: dict):
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
        assert a[k].tobytes() == b[k].tobytes()


def test_crc64_check_value():
    # standard CRC-64/XZ check value
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA
    assert crc64(b"") == 0
    assert crc64(b"6789", crc64(b"12345")) == crc64(b"123456789")


def test_empty_map_roundtrip():
    buf = encode_container({})
    assert buf[:4] == MAGIC and len(buf) == 20
    assert struct.unpack("<II", buf[4:12]) == (FORMAT_VERSION, 0)
    assert decode_container(buf) == {}


def test_three_f64_sections(tmp_path, rng):
    secs = {"a": rng.normal(size=(3, 4)), "b/c": rng.normal(size=7), "d": np.array(2.5)}
    path = tmp_path / "x.icmf"
    save_container(secs, path)
    _same(secs, load_container(path))
    assert not (tmp_path / "x.icmf.tmp").exists()


def test_f32_and_special_values():
    secs = {"f": np.array([np.nan, -0.0, np.inf, 1e-45], dtype=np.float32),
            "z": np.zeros((0, 3))}
    _same(secs, decode_container(encode_container(secs)))


def test_header_layout():
    buf = encode_container({"ab": np.arange(3, dtype=np.float64)})
    off = 12
    assert struct.unpack_from("<I", buf, off) == (2,)
    assert buf[off + 4:off + 6] == b"ab"
    tag, rank = struct.unpack_from("<BI", buf, off + 6)
    (dim,) = struct.unpack_from("<Q", buf, off + 11)
    offset, length = struct.unpack_from("<QQ", buf, off + 19)
    assert (tag, rank, dim, length) == (2, 1, 3, 24)
    assert offset == off + 35 and len(buf) == offset + length + 8
    assert struct.unpack("<Q", buf[-8:])[0] == crc64(buf[:-8])


def test_rejects_unsupported_dtype():
    with pytest.raises(TypeError):
        encode_container({"i": np.arange(3)})


def test_truncation_is_malformed(rng):
    buf = encode_container({"a": rng.normal(size=5), "b": rng.normal(size=2)})
    for cut in range(len(buf)):
        with pytest.raises(ContainerError):
            decode_container(buf[:cut])
    with pytest.raises(MalformedContainer):
        decode_container(buf[:30])


def test_corrupted_payload_checksum(rng):
    buf = bytearray(encode_container({"a": rng.normal(size=16)}))
    buf[-20] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        decode_container(bytes(buf))


def test_corrupted_trailer_checksum(rng):
    buf = bytearray(encode_container({"a": rng.normal(size=4)}))
    buf[-1] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        decode_container(bytes(buf))


def test_bad_magic():
    buf = b"XXXX" + encode_container({})[4:]
    with pytest.raises(MalformedContainer):
        decode_container(buf)


def test_version_mismatch():
    buf = encode_container({"a": np.ones(2)}, version=FORMAT_VERSION + 1)
    with pytest.raises(VersionMismatch, match="version"):
        decode_container(buf)
    assert decode_container(buf, version=FORMAT_VERSION + 1)["a"].tolist() == [1.0, 1.0]


def test_duplicate_names():
    with pytest.raises(DuplicateSection):
        encode_container([("a", np.ones(1)), ("a", np.ones(1))])
    # craft a file carrying a duplicate by renaming the second section
    buf = bytearray(encode_container([("a", np.ones(1)), ("b", np.ones(1))]))
    i = buf.index(b"b", 12)
    buf[i] = ord("a")
    body = bytes(buf[:-8])
    with pytest.raises(DuplicateSection):
        decode_container(body + struct.pack("<Q", crc64(body)))


names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=8)
arrays = st.tuples(st.sampled_from([np.float32, np.float64]),
                   st.lists(st.integers(0, 4), min_size=0, max_size=3), st.integers(0, 2 ** 32 - 1))


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(names, arrays, max_size=5))
def test_roundtrip_property(spec):
    secs = {k: np.random.default_rng(s).normal(size=tuple(shape)).astype(dt)
            for k, (dt, shape, s) in spec.items()}
    _same(secs, decode_container(encode_container(secs)))


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=80))
def test_fuzz_never_crashes(blob):
    try:
        decode_container(blob)
    except ContainerError:
        pass
