import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphcspn.grid import (
    CameraIntrinsics,
    DepthGrid,
    FeatureGrid,
    GridError,
    NonFiniteError,
    PfmHeaderError,
    PfmTruncatedError,
    read_pfm,
    valid_mask,
    write_pfm,
    write_pgm16,
)


def test_single_pixel_round_trip(tmp_path):
    path = tmp_path / "one.pfm"
    path.write_bytes(b"Pf\n1 1\n-1.0\n" + struct.pack("<f", 2.5))
    assert read_pfm(path).values[:, :, 0].tolist() == [[2.5]]


def test_random_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    g = rng.uniform(0, 10, (8, 6)).astype(np.float32).astype(np.float64)
    write_pfm(DepthGrid(g), tmp_path / "a.pfm")
    back = read_pfm(tmp_path / "a.pfm")
    assert back.channels == 1
    assert np.array_equal(back.plane(), g)


def test_zero_grid_layout(tmp_path):
    write_pfm(DepthGrid.zeros(2, 2), tmp_path / "z.pfm")
    data = (tmp_path / "z.pfm").read_bytes()
    header = b"Pf\n2 2\n-1.0\n"
    assert data[: len(header)] == header
    assert len(header) == 12
    assert data[len(header):] == bytes(16)


def test_rows_stored_bottom_up(tmp_path):
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_pfm(DepthGrid(g), tmp_path / "r.pfm")
    payload = (tmp_path / "r.pfm").read_bytes()[12:]
    assert struct.unpack("<4f", payload) == (3.0, 4.0, 1.0, 2.0)


def test_idempotent_rewrite(tmp_path):
    rng = np.random.default_rng(5)
    write_pfm(FeatureGrid(rng.normal(size=(4, 7))), tmp_path / "a.pfm")
    first = read_pfm(tmp_path / "a.pfm")
    write_pfm(first, tmp_path / "b.pfm")
    assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()


def test_big_endian_file_is_read(tmp_path):
    path = tmp_path / "be.pfm"
    path.write_bytes(b"Pf\n2 1\n1.0\n" + struct.pack(">2f", 1.5, -2.0))
    assert read_pfm(path).plane().tolist() == [[1.5, -2.0]]


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"Pg\n1 1\n-1.0\n" + bytes(4))
    with pytest.raises(PfmHeaderError):
        read_pfm(path)


def test_truncated(tmp_path):
    path = tmp_path / "short.pfm"
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(10))
    with pytest.raises(PfmTruncatedError):
        read_pfm(path)


def test_non_finite_payload(tmp_path):
    path = tmp_path / "nan.pfm"
    path.write_bytes(b"Pf\n1 1\n-1.0\n" + struct.pack("<f", float("nan")))
    with pytest.raises(NonFiniteError):
        read_pfm(path)


def test_error_kinds_are_distinct():
    assert len({PfmHeaderError, PfmTruncatedError, NonFiniteError}) == 3


def test_write_refuses_nan(tmp_path):
    with pytest.raises(NonFiniteError):
        write_pfm(np.array([[1.0, np.nan]]), tmp_path / "x.pfm")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_pfm(DepthGrid.zeros(1, 1), tmp_path / "missing" / "x.pfm")


def _pgm_pixels(path):
    data = path.read_bytes()
    header = data.split(b"\n", 3)
    assert header[0] == b"P5" and header[2] == b"65535"
    w, h = map(int, header[1].split())
    return np.frombuffer(header[3], dtype=">u2").reshape(h, w)


def test_pgm_levels(tmp_path):
    g = DepthGrid(np.array([[10.0, 0.0, 5.0, 25.0]]))
    write_pgm16(g, tmp_path / "v.pgm", max_depth=10.0)
    assert _pgm_pixels(tmp_path / "v.pgm").tolist() == [[65535, 0, 32768, 65535]]


def test_pgm_rejects_bad_max(tmp_path):
    with pytest.raises(GridError):
        write_pgm16(DepthGrid.zeros(1, 1), tmp_path / "v.pgm", max_depth=0)


def test_valid_mask_examples():
    assert valid_mask(DepthGrid(np.array([[0, 1.5], [2.0, 0]]))).tolist() == [
        [False, True],
        [True, False],
    ]
    assert not valid_mask(DepthGrid.zeros(3, 3)).any()
    assert valid_mask(DepthGrid(np.full((2, 2), 0.1))).all()


@given(arrays(np.float64, (5, 4), elements=st.sampled_from([0.0, 0.5, 1.0, 3.0])))
def test_valid_mask_count_matches_scan(a):
    count = sum(1 for v in a.ravel() if v > 0)
    assert valid_mask(DepthGrid(a)).sum() == count


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_bit_exact(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("pfm") / "p.pfm"
    write_pfm(FeatureGrid(a.astype(np.float64)), path)
    assert np.array_equal(read_pfm(path).plane().astype(np.float32).view(np.uint32),
                          a.view(np.uint32))


def test_depth_grid_invariants():
    with pytest.raises(GridError):
        DepthGrid(np.array([[-1.0]]))
    with pytest.raises(GridError):
        DepthGrid(np.array([[np.inf]]))
    with pytest.raises(GridError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
    g = DepthGrid(np.ones((2, 3)))
    assert (g.height, g.width) == (2, 3)
    with pytest.raises(ValueError):
        g.values[0, 0] = 5.0
