import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformatomo.field import FieldConfig, field_init
from deformatomo.geometry import DeformationParams, sample_deformations, tilt_angles
from deformatomo.io import (MrcHeaderError, MrcModeError, MrcTruncatedError, TableFormatError,
                            read_deformations, read_fsc_csv, read_manifest, read_mrc,
                            read_mrc_header, read_weights, write_deformations, write_fsc_csv,
                            write_history, write_manifest, write_mrc, write_weights)
from deformatomo.metrics import fsc


def test_mrc_round_trip(tmp_path):
    v = np.random.default_rng(0).standard_normal((16, 16, 16))
    write_mrc(tmp_path / "v.mrc", v)
    np.testing.assert_array_equal(read_mrc(tmp_path / "v.mrc"), v.astype(np.float32))


def test_mrc_stack_header(tmp_path):
    write_mrc(tmp_path / "s.mrc", np.zeros((60, 64, 64)))
    head = read_mrc_header(tmp_path / "s.mrc")
    assert (head["nx"], head["ny"], head["nz"], head["mode"]) == (64, 64, 60, 2)
    raw = (tmp_path / "s.mrc").read_bytes()
    assert len(raw) == 1024 + 60 * 64 * 64 * 4
    assert raw[208:212] == b"MAP " and raw[212:214] == b"\x44\x44"


def test_mrc_header_fields_follow_mrc2014(tmp_path):
    data = np.arange(24, dtype=float).reshape(2, 3, 4)
    write_mrc(tmp_path / "a.mrc", data, voxel_size=1.5)
    raw = (tmp_path / "a.mrc").read_bytes()
    ints = struct.unpack("<56i", raw[:224])
    floats = struct.unpack("<56f", raw[:224])
    assert ints[7:10] == (4, 3, 2)                     # mx, my, mz
    assert floats[10:13] == (6.0, 4.5, 3.0)            # cell lengths
    assert ints[16:19] == (1, 2, 3)                    # axis order
    assert floats[19:22] == (0.0, 23.0, 11.5)          # dmin, dmax, dmean
    assert ints[27] == 20140


def test_mrc_mode_one_is_rejected(tmp_path):
    path = tmp_path / "m.mrc"
    write_mrc(path, np.zeros((2, 2, 2)))
    raw = bytearray(path.read_bytes())
    raw[12:16] = struct.pack("<i", 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(MrcModeError):
        read_mrc(path)


def test_mrc_truncated_and_bad_header(tmp_path):
    path = tmp_path / "t.mrc"
    write_mrc(path, np.zeros((4, 4, 4)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(MrcTruncatedError):
        read_mrc(path)
    path.write_bytes(raw[:500])
    with pytest.raises(MrcHeaderError):
        read_mrc(path)
    path.write_bytes(raw[:208] + b"XXXX" + raw[212:])
    with pytest.raises(MrcHeaderError):
        read_mrc(path)


def test_mrc_refuses_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_mrc(tmp_path / "n.mrc", np.full((2, 2, 2), np.nan))


def test_mrc_writes_are_byte_identical(tmp_path):
    v = np.random.default_rng(1).random((5, 6, 7))
    write_mrc(tmp_path / "a.mrc", v)
    write_mrc(tmp_path / "b.mrc", v)
    assert (tmp_path / "a.mrc").read_bytes() == (tmp_path / "b.mrc").read_bytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 12))
def test_deformation_csv_round_trip_is_exact(tmp_path_factory, seed, m):
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    d = sample_deformations(m, (10, 0.1, 10), seed)
    angles = np.random.default_rng(seed).uniform(-70, 70, m)
    write_deformations(path, d, angles)
    back, back_angles = read_deformations(path)
    assert back == d
    np.testing.assert_array_equal(back_angles, angles)


def test_zero_deformations_write_zero_columns(tmp_path):
    write_deformations(tmp_path / "z.csv", DeformationParams.zeros(3), tilt_angles(3))
    lines = (tmp_path / "z.csv").read_text().splitlines()
    assert lines[0] == "m,theta_deg,shift_x_px,shift_y_px,shear,rot_deg"
    for line in lines[1:]:
        assert line.split(",")[2:] == ["0", "0", "0", "0"]


def test_deformation_csv_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("m,theta_deg,shift_x_px,shift_y_px,shear,rot_deg\n0,1,2,3,4,5\n1,1,2,3,4\n")
    with pytest.raises(TableFormatError, match="line 3"):
        read_deformations(path)
    path.write_text("m,theta_deg,shift_x_px,shift_y_px,shear,rot_deg\n0,1,2,x,4,5\n")
    with pytest.raises(TableFormatError, match="line 2"):
        read_deformations(path)


def test_fsc_csv(tmp_path):
    v = np.random.default_rng(2).standard_normal((64, 64, 64))
    curve = fsc(v, v)
    write_fsc_csv(tmp_path / "fsc.csv", curve)
    lines = (tmp_path / "fsc.csv").read_text().splitlines()
    assert len(lines) == 32
    freq, corr = read_fsc_csv(tmp_path / "fsc.csv")
    np.testing.assert_array_equal(freq, curve.frequency)
    np.testing.assert_array_equal(corr, curve.correlation)
    np.testing.assert_allclose(corr, 1.0, atol=1e-12)


def test_history_csv(tmp_path):
    hist = {k: np.array([3.0, 2.0]) for k in ("data", "op", "reg", "total")}
    write_history(tmp_path / "h.csv", hist)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,L_data,L_op,L_reg,total" and len(lines) == 3


def test_weights_round_trip(tmp_path):
    w = field_init(FieldConfig(width=16, frequencies=3, angle_frequencies=2), seed=3)
    write_weights(tmp_path / "w.bin", w)
    back = read_weights(tmp_path / "w.bin")
    assert back.config == w.config
    for a, b in zip(back.arrays(), w.arrays()):
        np.testing.assert_array_equal(a, b)


def test_manifest_round_trip(tmp_path):
    entries = {"seed": 7, "lr": 0.1, "volume": "", "name": "a b"}
    write_manifest(tmp_path / "m.txt", entries)
    back = read_manifest(tmp_path / "m.txt")
    assert back == {"seed": "7", "lr": "0.10000000000000001", "volume": "", "name": "a b"}
    assert float(back["lr"]) == 0.1
