"""Uncompressed MetaImage (.mha) volume I/O and ground-truth label CSVs.

Only the subset of MetaImage needed here is supported: 3-D single-component
volumes with an inline (LOCAL) MET_SHORT or MET_UCHAR payload. Voxel values
are Hounsfield units; anything outside the 12-bit CT range is clamped at
parse time and counted rather than rejected.

Array convention: the on-disk payload is x-fastest, so the in-memory array is
indexed ``hu[z, y, x]`` while ``dims`` keeps the header order (x, y, z).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HU_MIN = -1024
HU_MAX = 3071

LABEL_CSV_HEADER = ("PatientID", "probCOVID", "probSevere")

_ELEMENT_DTYPES = {
    "MET_SHORT": np.dtype(np.int16),
    "MET_UCHAR": np.dtype(np.uint8),
}


class VolumeFormatError(ValueError):
    """Base class for .mha parse failures."""


class MissingHeaderKey(VolumeFormatError):
    """A required header key is absent, or its value is unusable."""


class UnsupportedElementType(VolumeFormatError):
    """Element type (or compression setting) outside the supported subset."""


class PayloadSizeMismatch(VolumeFormatError):
    """Voxel payload length does not equal DimSize times the element size."""


class NonLocalData(VolumeFormatError):
    """ElementDataFile names an external file; only LOCAL is supported."""


class LabelFormatError(ValueError):
    """Base class for label CSV failures."""


class MalformedRow(LabelFormatError):
    """Header or row does not match the expected three-column layout."""


class DuplicateSubject(LabelFormatError):
    """The same PatientID appears on more than one row."""


class SeverityWithoutPositivity(LabelFormatError):
    """A row claims severe disease without COVID positivity."""


@dataclass(eq=False)
class Volume:
    """A 3-D grid of Hounsfield samples plus voxel spacing.

    Equality compares dims, spacing and the voxel grid. ``subject_id`` rides
    along for bookkeeping (the wire format has no identifier field) and
    ``clamped_count`` records how many voxels were clipped into
    [HU_MIN, HU_MAX] while parsing; neither takes part in ``==``.
    """

    dims: tuple[int, int, int]            # (width, height, depth)
    spacing: tuple[float, float, float]   # mm per voxel, same axis order
    hu: np.ndarray                        # (depth, height, width) int16
    subject_id: str = ""
    clamped_count: int = 0

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.hu = np.asarray(self.hu, dtype=np.int16)

    def validate(self) -> None:
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if len(self.spacing) != 3 or any(
            not np.isfinite(s) or s <= 0 for s in self.spacing
        ):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        w, h, d = self.dims
        if self.hu.shape != (d, h, w):
            raise ValueError(
                f"hu shape {self.hu.shape} does not match dims {self.dims} "
                "(expected (depth, height, width))"
            )
        if self.hu.size and (self.hu.min() < HU_MIN or self.hu.max() > HU_MAX):
            raise ValueError(f"hu values outside [{HU_MIN}, {HU_MAX}]")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.hu, other.hu)
        )


@dataclass(frozen=True)
class LabeledCase:
    """Ground-truth bits for one subject; severe implies covid_positive."""

    subject_id: str
    severe: int
    covid_positive: int


def _scan_header(data: bytes) -> tuple[dict[str, str], int]:
    """Collect `key = value` lines until ElementDataFile; return payload offset.

    Keys are case-sensitive; whitespace around '=' is ignored. Lines without
    '=' are skipped so garbled input ends in a missing-key diagnosis instead
    of a crash.
    """
    header: dict[str, str] = {}
    pos, n = 0, len(data)
    while pos < n:
        nl = data.find(b"\n", pos)
        end = n if nl < 0 else nl
        raw = data[pos:end]
        pos = n if nl < 0 else nl + 1
        line = raw.decode("ascii", errors="replace").strip()
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
        if key.strip() == "ElementDataFile":
            return header, pos
    raise MissingHeaderKey("header ended without an ElementDataFile line")


def _header_ints(header: dict[str, str], key: str, count: int) -> tuple[int, ...]:
    if key not in header:
        raise MissingHeaderKey(key)
    tokens = header[key].split()
    try:
        values = tuple(int(t) for t in tokens)
    except ValueError:
        raise MissingHeaderKey(f"{key} has a non-integer value: {header[key]!r}") from None
    if len(values) != count or any(v < 1 for v in values):
        raise MissingHeaderKey(f"{key} must be {count} positive ints, got {header[key]!r}")
    return values


def _header_floats(header: dict[str, str], key: str, count: int) -> tuple[float, ...]:
    tokens = header[key].split()
    try:
        values = tuple(float(t) for t in tokens)
    except ValueError:
        raise MissingHeaderKey(f"{key} has a non-numeric value: {header[key]!r}") from None
    if len(values) != count or any(not np.isfinite(v) or v <= 0 for v in values):
        raise MissingHeaderKey(f"{key} must be {count} positive reals, got {header[key]!r}")
    return values


def parse_mha(data: bytes, subject_id: str = "") -> Volume:
    """Parse an inline .mha byte string into a Volume.

    Raises MissingHeaderKey, UnsupportedElementType, PayloadSizeMismatch or
    NonLocalData; arbitrary byte noise never escapes this error set.
    """
    header, offset = _scan_header(data)

    if header["ElementDataFile"] != "LOCAL":
        raise NonLocalData(f"ElementDataFile = {header['ElementDataFile']!r}")
    if header.get("CompressedData", "False") == "True":
        raise UnsupportedElementType("compressed payloads are not supported")
    if "NDims" in header:
        ndims = _header_ints(header, "NDims", 1)[0]
        if ndims != 3:
            raise UnsupportedElementType(f"NDims = {ndims}; only 3-D volumes are supported")

    if "ElementType" not in header:
        raise MissingHeaderKey("ElementType")
    etype = header["ElementType"]
    if etype not in _ELEMENT_DTYPES:
        raise UnsupportedElementType(etype)
    dtype = _ELEMENT_DTYPES[etype]

    w, h, d = _header_ints(header, "DimSize", 3)
    spacing = (
        _header_floats(header, "ElementSpacing", 3)
        if "ElementSpacing" in header
        else (1.0, 1.0, 1.0)
    )
    msb = (
        header.get("ElementByteOrderMSB", header.get("BinaryDataByteOrderMSB", "False"))
        == "True"
    )

    expected = w * h * d * dtype.itemsize
    actual = len(data) - offset
    if actual != expected:
        raise PayloadSizeMismatch(f"expected {expected} payload bytes, got {actual}")

    raw = np.frombuffer(data, dtype=dtype.newbyteorder(">" if msb else "<"), offset=offset)
    values = raw.astype(np.int64)
    clipped = np.clip(values, HU_MIN, HU_MAX)
    clamped = int(np.count_nonzero(clipped != values))
    hu = clipped.astype(np.int16).reshape(d, h, w)
    return Volume(
        dims=(w, h, d),
        spacing=spacing,
        hu=hu,
        subject_id=subject_id,
        clamped_count=clamped,
    )


def write_mha(volume: Volume) -> bytes:
    """Serialise a valid Volume to canonical .mha bytes.

    The header key order is fixed so identical volumes produce identical
    bytes; floats are written with repr so they survive the round trip
    bit-exactly. Payload is always little-endian MET_SHORT.
    """
    volume.validate()
    w, h, d = volume.dims
    sx, sy, sz = volume.spacing
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "ElementByteOrderMSB = False",
        f"ElementSpacing = {sx!r} {sy!r} {sz!r}",
        f"DimSize = {w} {h} {d}",
        "ElementType = MET_SHORT",
        "ElementDataFile = LOCAL",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = np.ascontiguousarray(volume.hu, dtype="<i2").tobytes()
    return header + payload


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    return parse_mha(path.read_bytes(), subject_id=path.stem)


def save_volume(path: str | Path, volume: Volume) -> None:
    Path(path).write_bytes(write_mha(volume))


def _label_bit(token: str, line_no: int) -> int:
    token = token.strip()
    if token not in ("0", "1"):
        raise MalformedRow(f"line {line_no}: label must be 0 or 1, got {token!r}")
    return int(token)


def read_labels(data: bytes) -> list[LabeledCase]:
    """Parse a `PatientID,probCOVID,probSevere` CSV of 0/1 ground truth."""
    text = data.decode("utf-8", errors="replace")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(cell.strip() for cell in rows[0]) != LABEL_CSV_HEADER:
        raise MalformedRow("expected header PatientID,probCOVID,probSevere")
    cases: list[LabeledCase] = []
    seen: set[str] = set()
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise MalformedRow(f"line {line_no}: expected 3 fields, got {len(row)}")
        subject_id = row[0].strip()
        if not subject_id:
            raise MalformedRow(f"line {line_no}: empty PatientID")
        covid = _label_bit(row[1], line_no)
        severe = _label_bit(row[2], line_no)
        if subject_id in seen:
            raise DuplicateSubject(subject_id)
        seen.add(subject_id)
        if severe and not covid:
            raise SeverityWithoutPositivity(subject_id)
        cases.append(LabeledCase(subject_id, severe=severe, covid_positive=covid))
    return cases


def write_labels(cases: list[LabeledCase]) -> bytes:
    """Serialise ground truth to CSV with LF line endings."""
    out = io.StringIO()
    out.write(",".join(LABEL_CSV_HEADER) + "\n")
    for c in cases:
        if c.severe and not c.covid_positive:
            raise SeverityWithoutPositivity(c.subject_id)
        out.write(f"{c.subject_id},{c.covid_positive},{c.severe}\n")
    return out.getvalue().encode("utf-8")


def read_labels_file(path: str | Path) -> list[LabeledCase]:
    return read_labels(Path(path).read_bytes())
