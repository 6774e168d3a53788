"""Volume and mask containers plus the ``.dstvol`` on-disk format.

A ``.dstvol`` file is one UTF-8 JSON header line terminated by ``\\n``
followed immediately by the raw voxel payload. Voxel order is x-fastest,
then y, then z, so every axial slice is a contiguous block. Arrays in memory
are indexed ``[x, y, z]`` with shape ``(H, W, D)``; index axis 0 runs along
``row_dir``, axis 1 along ``col_dir`` and axis 2 along the slice normal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = "DSTVOL1"
UNIT_TOL = 1e-6

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a ``.dstvol`` file cannot be decoded."""


def _vec3(values) -> tuple[float, float, float]:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected a 3-vector, got {len(out)} components")
    return out  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    row_dir: tuple[float, float, float] = (1.0, 0.0, 0.0)
    col_dir: tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise ValueError(f"voxels must be 3-D, got shape {vox.shape}")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        for name in ("spacing", "origin", "row_dir", "col_dir"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)  # type: ignore[return-value]

    @property
    def slice_dir(self) -> np.ndarray:
        return np.cross(self.row_dir, self.col_dir)

    def affine(self) -> np.ndarray:
        """4x4 index-to-world matrix (mm)."""
        a = np.eye(4)
        a[:3, 0] = np.asarray(self.row_dir) * self.spacing[0]
        a[:3, 1] = np.asarray(self.col_dir) * self.spacing[1]
        a[:3, 2] = self.slice_dir * self.spacing[2]
        a[:3, 3] = self.origin
        return a

    def world_coords(self, index) -> np.ndarray:
        """Map integer voxel indices of shape (..., 3) to world mm."""
        idx = np.asarray(index, dtype=np.float64)
        a = self.affine()
        return idx @ a[:3, :3].T + a[:3, 3]

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels, self.spacing, self.origin, self.row_dir, self.col_dir)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.voxels.shape == other.voxels.shape
            and self.voxels.tobytes() == other.voxels.tobytes()
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.row_dir == other.row_dir
            and self.col_dir == other.col_dir
        )


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.bits.shape)  # type: ignore[return-value]

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))


N_SEGMENT_LABELS = 8
SEGMENT_NAMES = (
    "left_cervical", "left_petrous", "left_cavernous", "left_supraclinoid",
    "right_cervical", "right_petrous", "right_cavernous", "right_supraclinoid",
)


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label mask must be 3-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > N_SEGMENT_LABELS):
            raise ValueError("labels must lie in 0..8")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)  # type: ignore[return-value]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.labels.shape == other.labels.shape and bool(np.array_equal(self.labels, other.labels))


def validate(v: Volume) -> list[str]:
    """Return the list of violated Volume invariants (empty when valid)."""
    problems = []
    vox = np.asarray(v.voxels)
    if vox.ndim != 3 or any(n <= 0 for n in vox.shape):
        problems.append("dims must be three positive integers")
    if any(not np.isfinite(s) or s <= 0 for s in v.spacing):
        problems.append("non-positive spacing")
    r = np.asarray(v.row_dir)
    c = np.asarray(v.col_dir)
    if abs(np.linalg.norm(r) - 1.0) > UNIT_TOL:
        problems.append("row_dir not unit length")
    if abs(np.linalg.norm(c) - 1.0) > UNIT_TOL:
        problems.append("col_dir not unit length")
    if abs(float(r @ c)) > UNIT_TOL:
        problems.append("row_dir and col_dir not orthogonal")
    return problems


def _header(dims, spacing, origin, row_dir, col_dir, dtype: str) -> bytes:
    header = {
        "magic": MAGIC,
        "dims": [int(n) for n in dims],
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "row_dir": [float(x) for x in row_dir],
        "col_dir": [float(x) for x in col_dir],
        "dtype": dtype,
    }
    return (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")


def _write(path, header: bytes, array: np.ndarray, dtype: str) -> None:
    payload = np.asarray(array).astype(_DTYPES[dtype], copy=False).tobytes(order="F")
    Path(path).write_bytes(header + payload)


def save_volume(v: Volume, path) -> None:
    problems = validate(v)
    if problems:
        raise ValueError("invalid volume: " + "; ".join(problems))
    _write(path, _header(v.dims, v.spacing, v.origin, v.row_dir, v.col_dir, "f32le"), v.voxels, "f32le")


def save_mask(mask: BinaryMask | LabelMask, path, like: Volume | None = None) -> None:
    """Write a mask as ``u8`` ``.dstvol``; geometry is copied from ``like`` when given."""
    array = mask.bits if isinstance(mask, BinaryMask) else mask.labels
    ref = like if like is not None else Volume(np.zeros((1, 1, 1), np.float32))
    if like is not None and like.dims != tuple(array.shape):
        raise ValueError(f"mask dims {array.shape} do not match volume dims {like.dims}")
    _write(path, _header(array.shape, ref.spacing, ref.origin, ref.row_dir, ref.col_dir, "u8"), array, "u8")


def read_dstvol(path) -> tuple[dict, np.ndarray]:
    """Decode a ``.dstvol`` file into its header dict and an (H, W, D) array."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError("malformed header: missing newline terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise VolumeFormatError("malformed header: bad magic")
    for key in ("dims", "spacing", "origin", "row_dir", "col_dir", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"malformed header: missing key {key!r}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"malformed header: unsupported dtype {dtype!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(not isinstance(n, int) or n <= 0 for n in dims):
        raise VolumeFormatError("malformed header: dims must be three positive integers")
    payload = raw[nl + 1:]
    expected = int(np.prod(dims)) * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload size mismatch: header declares {expected} bytes, found {len(payload)}"
        )
    array = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims, order="F")
    return header, array


def load_volume(path) -> Volume:
    header, array = read_dstvol(path)
    if header["dtype"] != "f32le":
        raise VolumeFormatError(f"expected f32le volume, got {header['dtype']!r}")
    try:
        v = Volume(
            array.astype(np.float32),
            spacing=header["spacing"],
            origin=header["origin"],
            row_dir=header["row_dir"],
            col_dir=header["col_dir"],
        )
    except (TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from None
    problems = validate(v)
    if problems:
        raise VolumeFormatError("invalid volume metadata: " + "; ".join(problems))
    return v


def load_mask(path) -> BinaryMask:
    header, array = read_dstvol(path)
    if header["dtype"] != "u8":
        raise VolumeFormatError(f"expected u8 mask, got {header['dtype']!r}")
    return BinaryMask(array != 0)


def load_label_mask(path) -> LabelMask:
    header, array = read_dstvol(path)
    if header["dtype"] != "u8":
        raise VolumeFormatError(f"expected u8 mask, got {header['dtype']!r}")
    return LabelMask(array.copy())
