"""File formats: MRC volumes/stacks, deformation and FSC tables, training
history, field checkpoints and run manifests."""

from __future__ import annotations

import csv
import json
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .field import FieldConfig, FieldWeights
from .geometry import DeformationParams
from .metrics import FscCurve

__all__ = [
    "MrcError",
    "MrcHeaderError",
    "MrcModeError",
    "MrcTruncatedError",
    "TableFormatError",
    "write_mrc",
    "read_mrc",
    "read_mrc_header",
    "write_deformations",
    "read_deformations",
    "write_fsc_csv",
    "read_fsc_csv",
    "write_history",
    "write_deformation_table",
    "write_weights",
    "read_weights",
    "write_manifest",
    "read_manifest",
]

HEADER_BYTES = 1024
DEFORMATION_COLUMNS = ("m", "theta_deg", "shift_x_px", "shift_y_px", "shear", "rot_deg")


class MrcError(ValueError):
    pass


class MrcHeaderError(MrcError):
    pass


class MrcModeError(MrcError):
    pass


class MrcTruncatedError(MrcError):
    pass


class TableFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# --- MRC -----------------------------------------------------------------

def write_mrc(path, data: np.ndarray, voxel_size: float = 1.0) -> None:
    """Write a 3-D array as little-endian MRC2014 mode 2 (float32).

    Array axes ``(z, y, x)`` map to ``(nz, ny, nx)``; a tilt stack is stored
    with ``nz`` equal to the number of tilts.
    """
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got {data.ndim}-D")
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite data")
    values = np.ascontiguousarray(data, dtype="<f4")
    nz, ny, nx = values.shape
    ints = np.zeros(256, dtype="<i4")
    floats = ints.view("<f4")
    ints[0:3] = (nx, ny, nz)
    ints[3] = 2
    ints[7:10] = (nx, ny, nz)
    floats[10:13] = (nx * voxel_size, ny * voxel_size, nz * voxel_size)
    floats[13:16] = 90.0
    ints[16:19] = (1, 2, 3)
    floats[19:22] = (values.min(), values.max(), values.mean(dtype=np.float64))
    ints[27] = 20140
    header = bytearray(ints.tobytes())
    header[208:212] = b"MAP "
    header[212:216] = bytes((0x44, 0x44, 0x00, 0x00))
    header[216:220] = struct.pack("<f", float(values.std(dtype=np.float64)))
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(values.tobytes())


def read_mrc_header(path) -> dict:
    raw = Path(path).read_bytes()[:HEADER_BYTES]
    return _parse_header(raw)


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_BYTES:
        raise MrcHeaderError(f"header is {len(raw)} bytes, expected {HEADER_BYTES}")
    if raw[208:212] != b"MAP ":
        raise MrcHeaderError("missing 'MAP ' stamp")
    endian = ">" if raw[212] == 0x11 else "<"
    nx, ny, nz, mode = struct.unpack(endian + "4i", raw[:16])
    if min(nx, ny, nz) <= 0:
        raise MrcHeaderError(f"invalid dimensions {(nx, ny, nz)}")
    (nsymbt,) = struct.unpack(endian + "i", raw[92:96])
    if nsymbt < 0:
        raise MrcHeaderError(f"invalid extended header size {nsymbt}")
    return {"nx": nx, "ny": ny, "nz": nz, "mode": mode, "nsymbt": nsymbt, "endian": endian}


def read_mrc(path) -> np.ndarray:
    """Read a mode-2 MRC file into a float64 ``(nz, ny, nx)`` array."""
    raw = Path(path).read_bytes()
    head = _parse_header(raw[:HEADER_BYTES])
    if head["mode"] != 2:
        raise MrcModeError(f"unsupported MRC mode {head['mode']} (only mode 2 is read)")
    start = HEADER_BYTES + head["nsymbt"]
    count = head["nx"] * head["ny"] * head["nz"]
    if len(raw) < start + 4 * count:
        raise MrcTruncatedError(f"data block has {max(0, len(raw) - start)} bytes, expected {4 * count}")
    values = np.frombuffer(raw, dtype=head["endian"] + "f4", count=count, offset=start)
    return values.reshape(head["nz"], head["ny"], head["nx"]).astype(np.float64)


# --- tables --------------------------------------------------------------

def write_deformations(path, params: DeformationParams, angles) -> None:
    angles = np.asarray(angles, dtype=np.float64)
    if len(params) != angles.size:
        raise ValueError(f"{len(params)} deformations for {angles.size} angles")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(DEFORMATION_COLUMNS) + "\n")
        for m in range(len(params)):
            row = [str(m), _fmt(angles[m]), _fmt(params.shift[m, 0]), _fmt(params.shift[m, 1]),
                   _fmt(params.shear[m]), _fmt(params.rotation[m])]
            fh.write(",".join(row) + "\n")


def read_deformations(path) -> tuple[DeformationParams, np.ndarray]:
    """Returns the parameters and the tilt angles stored alongside them."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != DEFORMATION_COLUMNS:
            raise TableFormatError(f"{path}: line 1: expected header {','.join(DEFORMATION_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DEFORMATION_COLUMNS):
                raise TableFormatError(f"{path}: line {line_no}: expected {len(DEFORMATION_COLUMNS)} "
                                       f"columns, found {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise TableFormatError(f"{path}: line {line_no}: non-numeric cell") from None
    table = np.array(rows, dtype=np.float64).reshape(-1, len(DEFORMATION_COLUMNS))
    params = DeformationParams(table[:, 2:4].copy(), table[:, 4].copy(), table[:, 5].copy())
    return params, table[:, 1].copy()


def write_fsc_csv(path, curve: FscCurve) -> None:
    """Headerless ``frequency,correlation`` rows, one per shell."""
    with open(path, "w", newline="") as fh:
        for f, c in zip(curve.frequency, curve.correlation):
            fh.write(f"{_fmt(f)},{_fmt(c)}\n")


def read_fsc_csv(path) -> tuple[np.ndarray, np.ndarray]:
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    return table[:, 0].copy(), table[:, 1].copy()


def write_history(path, history: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("iteration,L_data,L_op,L_reg,total\n")
        for i in range(len(history["total"])):
            vals = [history[k][i] for k in ("data", "op", "reg", "total")]
            fh.write(f"{i}," + ",".join(_fmt(v) for v in vals) + "\n")


def write_deformation_table(path, rows: Mapping[str, tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("row,shift_px,shear_pct,rotation_deg\n")
        for name, vals in rows.items():
            fh.write(name + "," + ",".join(_fmt(v) for v in vals) + "\n")


# --- field checkpoints -----------------------------------------------------

def write_weights(path, weights: FieldWeights) -> None:
    """Binary checkpoint plus a JSON sidecar (``<path>.json``) with the FieldConfig.

    Layout (little-endian): int64 layer count, then ``(fan_in, fan_out)``
    int64 pairs, then every weight matrix and bias vector as float64 in
    layer order.
    """
    arrays = weights.arrays()
    sizes = [w.shape for w in arrays[0::2]]
    with open(path, "wb") as fh:
        fh.write(np.array([len(sizes)], dtype="<i8").tobytes())
        fh.write(np.array(sizes, dtype="<i8").tobytes())
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    cfg = weights.config
    sidecar = {
        "frequencies": cfg.frequencies,
        "hidden_layers": cfg.hidden_layers,
        "width": cfg.width,
        "activation": cfg.activation,
        "angle_scale": cfg.angle_scale,
        "angle_frequencies": cfg.angle_frequencies,
        "output_gain": cfg.output_gain,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_weights(path) -> FieldWeights:
    cfg = FieldConfig(**json.loads(Path(str(path) + ".json").read_text()))
    raw = Path(path).read_bytes()
    (n_layers,) = np.frombuffer(raw, dtype="<i8", count=1)
    sizes = np.frombuffer(raw, dtype="<i8", count=2 * n_layers, offset=8).reshape(-1, 2)
    offset = 8 + 16 * int(n_layers)
    arrays = []
    for fan_in, fan_out in sizes:
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * w.size
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * b.size
        arrays += [w.reshape(fan_in, fan_out).copy(), b.copy()]
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return FieldWeights(cfg, arrays)


# --- manifests -------------------------------------------------------------

def write_manifest(path, entries: Mapping[str, object]) -> None:
    """Flat ``key = value`` text, one entry per line, in insertion order."""
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            value = _fmt(value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    entries = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise TableFormatError(f"{path}: line {line_no}: expected 'key = value'")
        entries[key.strip()] = value.strip()
    return entries
