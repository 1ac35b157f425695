import numpy as np
import pytest

from ccdiff import ValidationError, make_phantom
from ccdiff.imgio import (load_image, read_mask, read_pgm, read_raw,
                          save_image, write_mask, write_pgm, write_raw)


def test_pgm_16bit_round_trip(tmp_path):
    img = make_phantom("ellipses", (32, 24), seed=1)
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == (32, 24)
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-12


def test_pgm_8bit_round_trip(tmp_path):
    img = make_phantom("blocks", (16, 16), seed=2)
    path = tmp_path / "img8.pgm"
    write_pgm(path, img, maxval=255)
    back = read_pgm(path)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pgm_header_with_comments(tmp_path):
    path = tmp_path / "c.pgm"
    payload = bytes(range(6))
    path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
    img = read_pgm(path)
    assert img.shape == (2, 3)
    assert img[0, 0] == 0.0 and img[1, 2] == pytest.approx(5 / 255)


def test_raw_round_trip_is_lossless(tmp_path):
    arr = np.random.default_rng(3).standard_normal((7, 9))
    path = tmp_path / "a.raw"
    write_raw(path, arr)
    assert np.array_equal(read_raw(path), arr)
    assert path.stat().st_size == 16 + 7 * 9 * 8


def test_load_image_dispatches_on_magic(tmp_path):
    img = make_phantom("blocks", (8, 8), seed=4)
    write_pgm(tmp_path / "x.pgm", img)
    write_raw(tmp_path / "x.raw", img)
    assert np.allclose(load_image(tmp_path / "x.pgm"), img, atol=1e-4)
    assert np.array_equal(load_image(tmp_path / "x.raw"), img)


def test_save_image_by_extension(tmp_path):
    img = make_phantom("blocks", (8, 8), seed=5)
    save_image(tmp_path / "y.pgm", img)
    save_image(tmp_path / "y.raw", img)
    assert (tmp_path / "y.pgm").read_bytes()[:2] == b"P5"
    assert (tmp_path / "y.raw").read_bytes()[:4] == b"CCF1"


def test_mask_round_trip(tmp_path):
    mask = np.random.default_rng(6).uniform(size=(16, 16)) < 0.4
    path = tmp_path / "m.pgm"
    write_mask(path, mask)
    assert np.array_equal(read_mask(path), mask)


def test_corrupt_files_are_rejected(tmp_path):
    bad = tmp_path / "bad.raw"
    bad.write_bytes(b"NOPE" + b"\0" * 12)
    with pytest.raises(ValidationError):
        read_raw(bad)
    with pytest.raises(ValidationError):
        load_image(bad)
    trunc = tmp_path / "t.pgm"
    trunc.write_bytes(b"P5\n4 4\n255\n\0\0")
    with pytest.raises(ValidationError):
        read_pgm(trunc)
    with pytest.raises(ValidationError):
        write_pgm(tmp_path / "z.pgm", np.zeros((4, 4)), maxval=1000)
    notp5 = tmp_path / "p2.pgm"
    notp5.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValidationError):
        read_pgm(notp5)
