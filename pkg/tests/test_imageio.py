"""File format round trips, malformed input reporting, atomic writes."""
import os

import numpy as np
import pytest

from rcseg.grid import Connectivity
from rcseg.imageio import (ImageFormatError, MalformedHeaderError,
                           TruncatedPayloadError, UnsupportedTypeError,
                           overlay_mask, read_image, read_labels, read_nrrd,
                           read_pgm, write_image, write_labels, write_nrrd,
                           write_overlay, write_pgm)


def _no_temp_leftovers(directory):
    return not [n for n in os.listdir(directory) if n.startswith(".tmp-rcseg-")]


# -- PGM ------------------------------------------------------------------

def test_read_p5_reference_bytes(tmp_path):
    path = tmp_path / "ref.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    got = read_pgm(path)
    assert got.dtype == np.float64
    assert np.array_equal(got, np.array([[0.0, 255.0], [128.0, 64.0]]))


def test_plain_and_binary_pgm_agree(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.integers(0, 256, size=(7, 5)).astype(np.float64)
    p2 = tmp_path / "a.pgm"
    p5 = tmp_path / "b.pgm"
    write_pgm(data, p2, plain=True)
    write_pgm(data, p5)
    assert p2.read_bytes().startswith(b"P2")
    assert p5.read_bytes().startswith(b"P5")
    assert np.array_equal(read_pgm(p2), read_pgm(p5))
    assert np.array_equal(read_pgm(p5), data)
    assert _no_temp_leftovers(tmp_path)


def test_pgm_16bit_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    data = rng.integers(0, 65536, size=(9, 4)).astype(np.float64)
    path = tmp_path / "wide.pgm"
    write_pgm(data, path)
    raw = path.read_bytes()
    assert b"65535" in raw.split(b"\n")[2]
    # payload is big-endian 16-bit per the format
    header_len = raw.index(b"65535\n") + 6
    first = int.from_bytes(raw[header_len:header_len + 2], "big")
    assert first == int(data[0, 0])
    assert np.array_equal(read_pgm(path), data)


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P2\n# made by hand\n3 # width then height\n2\n9\n"
                     b"1 2 3\n4 5 6\n")
    got = read_pgm(path)
    assert np.array_equal(got, np.array([[1, 2, 3], [4, 5, 6]], dtype=float))


def test_pgm_error_reporting(tmp_path):
    bad_magic = tmp_path / "m.pgm"
    bad_magic.write_bytes(b"Q5\n2 2\n255\n0000")
    with pytest.raises(MalformedHeaderError) as ei:
        read_pgm(bad_magic)
    assert ei.value.offset == 0

    non_numeric = tmp_path / "n.pgm"
    non_numeric.write_bytes(b"P5\nw 2\n255\n0000")
    with pytest.raises(MalformedHeaderError):
        read_pgm(non_numeric)

    truncated = tmp_path / "t.pgm"
    truncated.write_bytes(b"P5\n2 2\n255\n" + bytes([1, 2, 3]))
    with pytest.raises(TruncatedPayloadError) as ei:
        read_pgm(truncated)
    assert ei.value.offset == len(truncated.read_bytes())

    big_maxval = tmp_path / "b.pgm"
    big_maxval.write_bytes(b"P5\n2 2\n70000\n" + bytes(8))
    with pytest.raises(UnsupportedTypeError):
        read_pgm(big_maxval)

    zero_dim = tmp_path / "z.pgm"
    zero_dim.write_bytes(b"P5\n0 2\n255\n")
    with pytest.raises(MalformedHeaderError):
        read_pgm(zero_dim)

    bad_sample = tmp_path / "s.pgm"
    bad_sample.write_bytes(b"P2\n2 2\n255\n1 2 three 4\n")
    with pytest.raises(MalformedHeaderError):
        read_pgm(bad_sample)

    short_p2 = tmp_path / "sp.pgm"
    short_p2.write_bytes(b"P2\n2 2\n255\n1 2 3\n")
    with pytest.raises(TruncatedPayloadError):
        read_pgm(short_p2)

    header_eof = tmp_path / "he.pgm"
    header_eof.write_bytes(b"P5\n2")
    with pytest.raises(MalformedHeaderError):
        read_pgm(header_eof)


def test_write_pgm_input_validation(tmp_path):
    path = tmp_path / "x.pgm"
    with pytest.raises(ValueError):
        write_pgm(np.zeros((2, 2, 2)), path)
    with pytest.raises(ValueError):
        write_pgm(np.array([[0.5, 1.0]]), path)
    with pytest.raises(ValueError):
        write_pgm(np.array([[-1.0, 1.0]]), path)
    with pytest.raises(ValueError):
        write_pgm(np.array([[0.0, 70000.0]]), path)
    assert not path.exists()
    assert _no_temp_leftovers(tmp_path)


# -- NRRD -----------------------------------------------------------------

def test_nrrd_round_trips(tmp_path):
    rng = np.random.default_rng(3)
    vol = rng.integers(0, 1000, size=(4, 5, 6)).astype(np.float64)
    for dtype in ("float", "ushort"):
        path = tmp_path / f"{dtype}.nrrd"
        write_nrrd(vol, path, dtype=dtype)
        assert np.array_equal(read_nrrd(path), vol)
    small = rng.integers(0, 256, size=(3, 7)).astype(np.float64)
    path = tmp_path / "small.nrrd"
    write_nrrd(small, path, dtype="uchar")
    assert np.array_equal(read_nrrd(path), small)
    assert _no_temp_leftovers(tmp_path)


def test_nrrd_axis_order(tmp_path):
    vol = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    path = tmp_path / "axes.nrrd"
    write_nrrd(vol, path, dtype="uchar")
    header = path.read_bytes().split(b"\n\n")[0]
    assert b"sizes: 4 3 2" in header  # fastest-varying axis first
    assert np.array_equal(read_nrrd(path), vol)


def test_nrrd_detached_data_file(tmp_path):
    payload = np.arange(12, dtype=np.uint8)
    (tmp_path / "payload.raw").write_bytes(payload.tobytes())
    header = (b"NRRD0004\ntype: uchar\ndimension: 2\nsizes: 4 3\n"
              b"encoding: raw\ndata file: payload.raw\n\n")
    path = tmp_path / "detached.nhdr"
    path.write_bytes(header)
    got = read_nrrd(path)
    assert np.array_equal(got, payload.reshape(3, 4).astype(np.float64))


def test_nrrd_error_reporting(tmp_path):
    cases = [
        (b"NOPE0001\n\n", MalformedHeaderError),
        (b"NRRD0004\ntype: uchar\ndimension: 2\nencoding: raw\n\n",
         MalformedHeaderError),          # sizes missing
        (b"NRRD0004\ntype: uchar\ndimension: 2\nsizes: 2 2\n"
         b"encoding: gzip\n\n", UnsupportedTypeError),
        (b"NRRD0004\ntype: double\ndimension: 2\nsizes: 2 2\n"
         b"encoding: raw\n\n", UnsupportedTypeError),
        (b"NRRD0004\ntype: ushort\ndimension: 2\nsizes: 2 2\n"
         b"encoding: raw\nendian: big\n\n", UnsupportedTypeError),
        (b"NRRD0004\ntype: uchar\ndimension: 2\nsizes: 2 two\n"
         b"encoding: raw\n\n", MalformedHeaderError),
        (b"NRRD0004\ntype: uchar\ndimension: 4\nsizes: 2 2 2 2\n"
         b"encoding: raw\n\n" + bytes(16), MalformedHeaderError),
        (b"NRRD0004\ntype: uchar\nbroken line\ndimension: 2\nsizes: 2 2\n"
         b"encoding: raw\n\n" + bytes(4), MalformedHeaderError),
        (b"NRRD0004\ntype: uchar\ndimension: 2\nsizes: 2 2\nencoding: raw\n",
         MalformedHeaderError),          # header never terminated
    ]
    for i, (blob, err) in enumerate(cases):
        path = tmp_path / f"bad{i}.nrrd"
        path.write_bytes(blob)
        with pytest.raises(err):
            read_nrrd(path)

    short = tmp_path / "short.nrrd"
    short.write_bytes(b"NRRD0004\ntype: uchar\ndimension: 2\nsizes: 3 3\n"
                      b"encoding: raw\n\n" + bytes(5))
    with pytest.raises(TruncatedPayloadError) as ei:
        read_nrrd(short)
    assert ei.value.offset == len(short.read_bytes())


def test_write_nrrd_validation(tmp_path):
    path = tmp_path / "v.nrrd"
    with pytest.raises(ValueError):
        write_nrrd(np.zeros((2, 2)), path, dtype="double")
    with pytest.raises(ValueError):
        write_nrrd(np.zeros(4), path)
    with pytest.raises(ValueError):
        write_nrrd(np.full((2, 2), 70000.0), path, dtype="ushort")
    assert not path.exists()


# -- dispatch, labels, intensities -----------------------------------------

def test_read_image_dispatch(tmp_path):
    pgm = tmp_path / "a.dat"
    pgm.write_bytes(b"P5\n1 1\n255\n\x07")
    assert read_image(pgm)[0, 0] == 7.0
    nrrd = tmp_path / "b.dat"
    write_nrrd(np.full((2, 2), 3.0), nrrd, dtype="uchar")
    assert read_image(nrrd)[0, 0] == 3.0
    junk = tmp_path / "c.dat"
    junk.write_bytes(b"GIF89a whatever")
    with pytest.raises(MalformedHeaderError):
        read_image(junk)


def test_label_round_trips(tmp_path):
    rng = np.random.default_rng(4)
    flat = rng.integers(0, 12, size=(11, 13)).astype(np.int32)
    path = tmp_path / "labels.pgm"
    write_labels(flat, path)
    # 2-D labels always use the 16-bit payload
    assert b"65535" in path.read_bytes()[:30]
    assert np.array_equal(read_labels(path), flat)
    vol = rng.integers(0, 5, size=(4, 5, 6)).astype(np.int32)
    vpath = tmp_path / "labels.nrrd"
    write_labels(vol, vpath)
    assert np.array_equal(read_labels(vpath), vol)


def test_label_validation(tmp_path):
    with pytest.raises(ValueError):
        write_labels(np.array([[70000]]), tmp_path / "x.pgm")
    with pytest.raises(ValueError):
        write_labels(np.array([[-1]]), tmp_path / "x.pgm")
    with pytest.raises(ValueError):
        write_labels(np.zeros(4, dtype=np.int32), tmp_path / "x.pgm")
    frac = tmp_path / "frac.nrrd"
    write_nrrd(np.full((2, 2), 0.5), frac, dtype="float")
    with pytest.raises(ValueError):
        read_labels(frac)


def test_write_image_scale_and_float(tmp_path):
    ramp = np.array([[0.0, 1.0], [2.0, 4.0]])
    pgm = tmp_path / "scaled.pgm"
    write_image(ramp, pgm, scale=True)
    got = read_pgm(pgm)
    assert got[0, 0] == 0.0 and got[1, 1] == 65535.0
    assert got[0, 1] == np.rint(1.0 / 4.0 * 65535)
    # float container keeps counting data exact
    counts = np.array([[0.0, 123456.0], [7.0, 42.0]])
    nrrd = tmp_path / "counts.nrrd"
    write_image(counts, nrrd)
    assert np.array_equal(read_image(nrrd), counts)
    with pytest.raises(ValueError):
        write_image(np.array([[0.25, 1.0]]), tmp_path / "frac.pgm")


def test_failed_write_leaves_destination_alone(tmp_path):
    target = tmp_path / "keep.pgm"
    write_pgm(np.array([[5.0]]), target)
    before = target.read_bytes()
    blocker = tmp_path / "dir.pgm"
    blocker.mkdir()
    with pytest.raises(OSError):
        write_pgm(np.array([[1.0]]), blocker)
    assert target.read_bytes() == before
    assert _no_temp_leftovers(tmp_path)


# -- overlays ---------------------------------------------------------------

def _brute_contour_mask(labels, conn):
    """Foreground pixels with a differing neighbor under the contour rule."""
    mask = np.zeros(labels.shape, dtype=np.uint8)
    for coord in np.ndindex(labels.shape):
        if labels[coord] <= 0:
            continue
        for off in conn.bg_offsets:
            nb = tuple(c + int(o) for c, o in zip(coord, off))
            if all(0 <= nb[k] < labels.shape[k] for k in range(labels.ndim)):
                if labels[nb] != labels[coord]:
                    mask[coord] = 255
                    break
    return mask


def test_overlay_matches_contour_scan():
    rng = np.random.default_rng(5)
    for shape in ((12, 10), (5, 6, 4)):
        conn = Connectivity.default(len(shape))
        labels = rng.integers(0, 3, size=shape).astype(np.int32)
        assert np.array_equal(overlay_mask(labels),
                              _brute_contour_mask(labels, conn))


def test_write_overlay_containers(tmp_path):
    labels = np.zeros((8, 8), dtype=np.int32)
    labels[2:6, 2:6] = 1
    p = tmp_path / "o.pgm"
    write_overlay(labels, p)
    got = read_pgm(p)
    assert set(np.unique(got)) == {0.0, 255.0}
    vol = np.zeros((5, 5, 5), dtype=np.int32)
    vol[1:4, 1:4, 1:4] = 1
    v = tmp_path / "o.nrrd"
    write_overlay(vol, v)
    assert set(np.unique(read_nrrd(v))) == {0.0, 255.0}
