import struct

import numpy as np
import pytest

from adaptdiff.gridio import (
    GridFormatError,
    Manifest,
    decode_grid,
    encode_grid,
    read_grid,
    write_grid,
    write_pgm,
)


def test_mask_round_trip(tmp_path):
    m = (np.random.default_rng(0).random((64, 64)) > 0.7).astype(np.uint8)
    write_grid(tmp_path / "m.avdt", m)
    back = read_grid(tmp_path / "m.avdt")
    assert back.dtype == np.uint8
    assert back.tobytes() == m.tobytes()


def test_image_round_trip_bit_exact(tmp_path):
    img = np.random.default_rng(1).random((37, 51)).astype(np.float32)
    img[0, 0], img[0, 1] = 0.0, 1.0
    write_grid(tmp_path / "i.avdt", img)
    back = read_grid(tmp_path / "i.avdt")
    assert back.dtype == np.float32
    assert back.tobytes() == img.tobytes()


def test_header_layout():
    raw = encode_grid(np.ones((2, 3), np.uint8))
    assert raw[:4] == b"AVDT"
    assert raw[4] == 1 and raw[5] == 1
    assert struct.unpack_from("<II", raw, 6) == (2, 3)
    assert len(raw) == 14 + 6


def test_truncated_payload():
    raw = encode_grid(np.zeros((4, 4), np.float32))[:-3]
    with pytest.raises(GridFormatError, match="expected 64 bytes, got 61") as e:
        decode_grid(raw)
    assert e.value.offset == 14


@pytest.mark.parametrize("offset,value,msg", [(0, b"XVDT", "magic"), (4, b"\x02", "version"), (5, b"\x07", "kind")])
def test_bad_header_fields(offset, value, msg):
    raw = bytearray(encode_grid(np.zeros((2, 2), np.uint8)))
    raw[offset:offset + len(value)] = value
    with pytest.raises(GridFormatError, match=msg) as e:
        decode_grid(bytes(raw))
    assert e.value.offset == offset


def test_mask_value_out_of_range():
    raw = bytearray(encode_grid(np.zeros((2, 2), np.uint8)))
    raw[14 + 3] = 2
    with pytest.raises(GridFormatError, match="out of range") as e:
        decode_grid(bytes(raw))
    assert e.value.offset == 17


def test_image_value_out_of_range():
    raw = bytearray(encode_grid(np.zeros((2, 2), np.float32)))
    raw[14 + 4:14 + 8] = struct.pack("<f", 1.5)
    with pytest.raises(GridFormatError, match="out of range"):
        decode_grid(bytes(raw))
    raw[14 + 4:14 + 8] = struct.pack("<f", float("nan"))
    with pytest.raises(GridFormatError):
        decode_grid(bytes(raw))


def test_write_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        write_grid(tmp_path / "x", np.full((2, 2), 2, np.uint8))
    with pytest.raises(ValueError):
        write_grid(tmp_path / "x", np.full((2, 2), -0.1))


def test_pgm(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0.0, 1.0]]))
    assert (tmp_path / "a.pgm").read_bytes() == b"P5\n2 1\n255\n\x00\xff"


def test_manifest_round_trip(tmp_path):
    imgs = np.random.default_rng(2).random((3, 8, 8)).astype(np.float32)
    masks = (imgs > 0.5).astype(np.uint8)
    Manifest.write(tmp_path / "d", "source", imgs, masks)
    m = Manifest.load(tmp_path / "d")
    assert [r.id for r in m] == ["source_0000", "source_0001", "source_0002"]
    assert m.resolution == (8, 8)
    np.testing.assert_array_equal(m.images(), imgs)
    np.testing.assert_array_equal(m.masks(), masks)


def test_manifest_validation(tmp_path):
    imgs = np.zeros((2, 8, 8), np.float32)
    m = Manifest.write(tmp_path / "d", "t", imgs, None, ids=["a", "a"])
    with pytest.raises(ValueError, match="duplicate"):
        Manifest.load(m.root)
    Manifest.write(tmp_path / "e", "t", imgs, None)
    write_grid(tmp_path / "e" / "t_0001.img.avdt", np.zeros((4, 4), np.float32))
    with pytest.raises(ValueError, match="resolution"):
        Manifest.load(tmp_path / "e")
    with pytest.raises(ValueError, match="without masks"):
        Manifest.write(tmp_path / "f", "t", imgs, None).masks()
