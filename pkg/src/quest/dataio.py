"""Binary dataset container: magic "QSTD", version, length-prefixed
name-tagged array records, trailing CRC32.

Fields are looked up by name, so reordering dataclass fields in memory
never changes how a v1 file is read. All arrays are little-endian with
explicit shape headers; floats are f64.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .geometry import Camera
from .simgen import PRISMATIC, REVOLUTE, Sequence

MAGIC = b"QSTD"
VERSION = 1

_DTYPES = {0: "<f8", 1: "u1", 2: "<i8"}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("uint8"): 1, np.dtype("int64"): 2}


class DatasetFormatError(Exception):
    pass


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise DatasetFormatError(f"unsupported dtype {arr.dtype} for field {name!r}")
    raw = name.encode("ascii")
    out = struct.pack("<H", len(raw)) + raw
    out += struct.pack("<BB", code, arr.ndim)
    out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    out += arr.astype(_DTYPES[code]).tobytes()
    return out


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DatasetFormatError("truncated dataset file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_fields(payload: bytes) -> dict[str, np.ndarray]:
    r = _Reader(payload)
    (n_fields,) = r.unpack("<I")
    fields = {}
    for _ in range(n_fields):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("ascii")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise DatasetFormatError(f"unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dtype = np.dtype(_DTYPES[code])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype)
        fields[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
    return fields


def _sequence_fields(seq: Sequence) -> list[tuple[str, np.ndarray]]:
    cam = seq.camera
    kinds = np.array([0 if k == REVOLUTE else 1 for k in seq.joint_kinds],
                     dtype=np.uint8)
    return [
        ("frames", seq.frames),
        ("depth", seq.depth),
        ("gt2d", seq.gt2d),
        ("gt3d", seq.gt3d),
        ("vis", seq.vis.astype(np.uint8)),
        ("flow3d", seq.flow3d),
        ("entities2d", seq.entities2d),
        ("joint_values", seq.joint_values),
        ("joint_kinds", kinds),
        ("meta", np.array([seq.level, seq.seed, seq.view, seq.occ_target,
                           seq.occ_start, seq.occ_end], dtype=np.int64)),
        ("cam_intrinsics", np.array([cam.fx, cam.fy, cam.cx, cam.cy,
                                     cam.width, cam.height])),
        ("cam_rot", cam.rot),
        ("cam_trans", cam.trans),
    ]


def _sequence_from_fields(f: dict[str, np.ndarray]) -> Sequence:
    required = {"frames", "depth", "gt2d", "gt3d", "vis", "flow3d", "entities2d",
                "joint_values", "joint_kinds", "meta", "cam_intrinsics",
                "cam_rot", "cam_trans"}
    missing = required - f.keys()
    if missing:
        raise DatasetFormatError(f"record is missing fields: {sorted(missing)}")
    intr = f["cam_intrinsics"]
    cam = Camera(fx=intr[0], fy=intr[1], cx=intr[2], cy=intr[3],
                 width=int(intr[4]), height=int(intr[5]),
                 rot=f["cam_rot"], trans=f["cam_trans"])
    level, seed, view, occ_target, occ_start, occ_end = (int(x) for x in f["meta"])
    return Sequence(
        frames=f["frames"], depth=f["depth"], cams=[cam],
        gt2d=f["gt2d"], gt3d=f["gt3d"], vis=f["vis"].astype(bool),
        flow3d=f["flow3d"], entities2d=f["entities2d"],
        joint_values=f["joint_values"],
        joint_kinds=[REVOLUTE if k == 0 else PRISMATIC for k in f["joint_kinds"]],
        level=level, seed=seed, view=view,
        occ_target=occ_target, occ_start=occ_start, occ_end=occ_end,
    )


def write_dataset(sequences: list[Sequence], path) -> None:
    """Write sequences to a QSTD v1 file (atomic overwrite not attempted)."""
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<Q", len(sequences))
    for seq in sequences:
        fields = _sequence_fields(seq)
        payload = struct.pack("<I", len(fields))
        payload += b"".join(_pack_array(name, arr) for name, arr in fields)
        body += struct.pack("<Q", len(payload))
        body += payload
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def read_dataset(path) -> list[Sequence]:
    """Read a QSTD v1 file, verifying magic, version, and CRC32."""
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise DatasetFormatError("truncated dataset file")
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:4]!r}: not a QSTD dataset")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DatasetFormatError("CRC32 mismatch: dataset file is corrupted")
    r = _Reader(blob[:-4])
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    (count,) = r.unpack("<Q")
    sequences = []
    for _ in range(count):
        (payload_len,) = r.unpack("<Q")
        sequences.append(_sequence_from_fields(_unpack_fields(r.take(payload_len))))
    return sequences
