"""Binary volume container and CSV import.

Layout, all little-endian::

    magic       8 bytes  b"EBSDVOL1"
    version     u16
    dtype code  u8       (see DTYPES)
    dims        3 x u32  N1, N2, N3
    channels    u32
    payload     N1*N2*N3*channels values, row-major
    sections    repeated until end of file:
                  u8 name length, ASCII name, u8 dtype code, u32 channels,
                  u64 payload byte length, payload

Sections share the main dims and are keyed by name; a section with an
unknown dtype code is skipped via its length prefix.  Standard names are
IDS (int64, 1 channel), BOUNDARIES (uint8, 1 channel) and EULER (float64,
3 channels, as imported).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import FormatError
from .orientation import euler_to_cubochoric

MAGIC = b"EBSDVOL1"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8"), 4: np.dtype("<i4"), 5: np.dtype("u1")}
_CODES = {v: k for k, v in DTYPES.items()}


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == bool:
        return 5
    dt = arr.dtype if arr.dtype.itemsize == 1 else arr.dtype.newbyteorder("<")
    try:
        return _CODES[dt]
    except KeyError as exc:
        raise FormatError(f"dtype {arr.dtype} cannot be stored in a volume file") from exc


@dataclass
class VolumeFile:
    data: np.ndarray
    sections: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def ids(self) -> Optional[np.ndarray]:
        return self.sections.get("IDS")

    @property
    def boundaries(self) -> Optional[np.ndarray]:
        b = self.sections.get("BOUNDARIES")
        return None if b is None else b.astype(bool)

    def write(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        data = self.data if self.data.ndim == 4 else self.data[..., None]
        parts = [MAGIC, struct.pack("<HB3II", VERSION, _code_for(data), *data.shape[:3], data.shape[3])]
        parts.append(np.ascontiguousarray(data, dtype=DTYPES[_code_for(data)]).tobytes())
        for name, arr in self.sections.items():
            arr = np.asarray(arr)
            if arr.shape[:3] != data.shape[:3]:
                raise FormatError(f"section {name} has shape {arr.shape}, volume dims are {data.shape[:3]}")
            channels = 1 if arr.ndim == 3 else arr.shape[3]
            code = _code_for(arr)
            raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
            encoded = name.encode("ascii")
            parts.append(struct.pack("<B", len(encoded)) + encoded + struct.pack("<BIQ", code, channels, len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "VolumeFile":
        if blob[:8] != MAGIC:
            raise FormatError("not an EBSDVOL1 file")
        try:
            version, code, n1, n2, n3, channels = struct.unpack_from("<HB3II", blob, 8)
        except struct.error as exc:
            raise FormatError("truncated header") from exc
        if version != VERSION:
            raise FormatError(f"unsupported volume file version {version}")
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code}")
        pos = 8 + struct.calcsize("<HB3II")
        dims = (n1, n2, n3)
        count = n1 * n2 * n3 * channels
        nbytes = count * DTYPES[code].itemsize
        if pos + nbytes > len(blob):
            raise FormatError("payload is shorter than the header announces")
        data = np.frombuffer(blob, DTYPES[code], count, pos).reshape(dims + (channels,)).copy()
        pos += nbytes
        sections = {}
        while pos < len(blob):
            try:
                (nlen,) = struct.unpack_from("<B", blob, pos)
                name = blob[pos + 1:pos + 1 + nlen].decode("ascii")
                pos += 1 + nlen
                scode, sch, slen = struct.unpack_from("<BIQ", blob, pos)
                pos += struct.calcsize("<BIQ")
            except (struct.error, UnicodeDecodeError) as exc:
                raise FormatError("malformed section header") from exc
            if pos + slen > len(blob):
                raise FormatError(f"section {name} is truncated")
            if scode in DTYPES:
                arr = np.frombuffer(blob, DTYPES[scode], slen // DTYPES[scode].itemsize, pos)
                shape = dims if sch == 1 else dims + (sch,)
                if arr.size != int(np.prod(shape)):
                    raise FormatError(f"section {name} length does not match the volume dims")
                sections[name] = arr.reshape(shape).copy()
            pos += slen
        return cls(data, sections)

    @classmethod
    def read(cls, path) -> "VolumeFile":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def volume_from_arrays(v: np.ndarray, ids: Optional[np.ndarray] = None, boundaries: Optional[np.ndarray] = None):
    sections = {}
    if ids is not None:
        sections["IDS"] = np.asarray(ids, dtype=np.int64)
    if boundaries is not None:
        sections["BOUNDARIES"] = np.asarray(boundaries, dtype=np.uint8)
    return VolumeFile(np.asarray(v, dtype=np.float64), sections)


def import_csv(path, degrees: bool = False) -> VolumeFile:
    """Read ``x,y,z,phi1,Phi,phi2`` rows into a cubochoric volume.

    Coordinates are integer voxel indices; a header row is optional.  The
    Euler angles are kept verbatim in a three-channel EULER section.
    """
    rows = np.loadtxt(path, delimiter=",", ndmin=2, comments="#", skiprows=_header_rows(path))
    if rows.shape[1] != 6:
        raise FormatError(f"expected 6 columns (x,y,z,phi1,Phi,phi2), got {rows.shape[1]}")
    coords = rows[:, :3]
    if not np.all(coords == np.round(coords)) or np.any(coords < 0):
        raise FormatError("voxel coordinates must be non-negative integers")
    coords = coords.astype(np.int64)
    dims = tuple(int(c) + 1 for c in coords.max(axis=0))
    if rows.shape[0] != int(np.prod(dims)):
        raise FormatError(f"{rows.shape[0]} rows do not fill a {dims} grid")
    euler = np.full(dims + (3,), np.nan)
    euler[coords[:, 0], coords[:, 1], coords[:, 2]] = rows[:, 3:]
    if np.isnan(euler).any():
        raise FormatError("duplicate voxel coordinates in CSV")
    angles = np.deg2rad(euler) if degrees else euler
    return VolumeFile(euler_to_cubochoric(angles), {"EULER": euler})


def _header_rows(path) -> int:
    with open(path) as f:
        first = f.readline()
    try:
        [float(t) for t in first.strip().split(",")]
        return 0
    except ValueError:
        return 1
