"""NIfTI-1 volume I/O and a small explicit-VR DICOM metadata reader."""

from __future__ import annotations

import gzip
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, TruncatedError, UnsupportedError, ValidationError
from .volgrid import Volume

# ---------------------------------------------------------------------------
# NIfTI-1

HEADER_SIZE = 348
VOX_OFFSET = 352

# datatype code -> numpy dtype (little-endian; byte order fixed up on read)
NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
_DTYPE_CODES = {np.dtype(v).newbyteorder("="): k for k, v in NIFTI_DTYPES.items()}


@dataclass
class NiftiHeader:
    dims: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    qoffset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    descrip: str = ""
    byteorder: str = "<"


def _is_gzip(payload: bytes) -> bool:
    return payload[:2] == b"\x1f\x8b"


def _gunzip(payload: bytes) -> bytes:
    try:
        return gzip.decompress(payload)
    except (EOFError, OSError, zlib.error) as exc:
        raise TruncatedError(f"corrupt or truncated gzip stream: {exc}") from exc


def parse_nifti_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedError(f"NIfTI header needs {HEADER_SIZE} bytes, got {len(raw)}")
    magic = bytes(raw[344:348])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"bad NIfTI magic {magic!r}")
    for bo in ("<", ">"):
        if struct.unpack(bo + "i", raw[0:4])[0] == HEADER_SIZE:
            break
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order")

    dims = struct.unpack(bo + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(bo + "2h", raw[70:74])
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(bo + "3f", raw[108:120])
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")
    qoffset = struct.unpack(bo + "3f", raw[268:280])

    ndim = dims[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"dim[0] must be in [1, 7], got {ndim}")
    used = dims[1 : ndim + 1]
    if any(d < 1 for d in used):
        raise FormatError(f"dimensions must be >= 1, got {used}")
    return NiftiHeader(
        dims=tuple(int(d) for d in used),
        datatype=int(datatype),
        bitpix=int(bitpix),
        pixdim=tuple(float(p) for p in pixdim),
        vox_offset=float(vox_offset),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        magic=magic,
        qoffset=tuple(float(q) for q in qoffset),
        descrip=descrip,
        byteorder=bo,
    )


def read_nifti(payload: bytes) -> tuple[Volume, NiftiHeader]:
    """Decode a single-file NIfTI-1 payload (optionally gzipped).

    Stored values are rescaled by ``scl_slope``/``scl_inter``; a slope of 0
    means "no scaling" per the format.
    """
    payload = bytes(payload)
    if _is_gzip(payload):
        payload = _gunzip(payload)
    hdr = parse_nifti_header(payload)
    if hdr.magic != b"n+1\x00":
        raise UnsupportedError("two-file (.hdr/.img) NIfTI is not supported; expected magic 'n+1'")
    if hdr.datatype not in NIFTI_DTYPES:
        raise UnsupportedError(f"unsupported NIfTI datatype code {hdr.datatype}")
    dims = hdr.dims + (1,) * (3 - len(hdr.dims))
    if len(dims) > 3 and any(d != 1 for d in dims[3:]):
        raise UnsupportedError(f"only 3D volumes are supported, got dims {hdr.dims}")
    shape = dims[:3]

    dtype = NIFTI_DTYPES[hdr.datatype].newbyteorder(hdr.byteorder)
    offset = int(hdr.vox_offset)
    if offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {hdr.vox_offset} lies inside the header")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(payload) < offset + nbytes:
        raise TruncatedError(
            f"NIfTI payload truncated: need {offset + nbytes} bytes, have {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = raw.reshape(shape, order="F")

    slope = hdr.scl_slope if hdr.scl_slope not in (0.0,) and np.isfinite(hdr.scl_slope) else 1.0
    inter = hdr.scl_inter if np.isfinite(hdr.scl_inter) else 0.0
    if hdr.datatype in (16, 64) and slope == 1.0 and inter == 0.0:
        values = data.astype(data.dtype.newbyteorder("="))
    else:
        values = data.astype(np.float64) * slope + inter
        if hdr.datatype != 64:
            values = values.astype(np.float32)

    spacing = tuple(abs(p) if p != 0 else 1.0 for p in hdr.pixdim[1:4])
    vol = Volume(np.ascontiguousarray(values), spacing, hdr.qoffset)
    return vol, hdr


def write_nifti(vol: Volume, dtype=np.float32, description: str = "") -> bytes:
    """Encode ``vol`` as a single-file NIfTI-1 payload.

    Defaults to float32 with identity scaling. ``dtype`` may be any of the
    supported storage types; integer types must hold the data exactly.
    """
    dt = np.dtype(dtype).newbyteorder("=")
    if dt not in _DTYPE_CODES:
        raise UnsupportedError(f"cannot write dtype {dtype}")
    code = _DTYPE_CODES[dt]
    store = np.dtype(NIFTI_DTYPES[code])
    data = vol.data
    if store.kind in "iu":
        info = np.iinfo(store)
        if not np.array_equal(np.round(data), data) or data.min() < info.min or data.max() > info.max:
            raise ValidationError(f"volume values are not representable as {store}")

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, store.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    desc = description.encode("latin-1")[:79]
    hdr[148 : 148 + len(desc)] = desc
    struct.pack_into("<2h", hdr, 252, 1, 1)  # qform_code, sform_code: scanner
    struct.pack_into("<3f", hdr, 268, *vol.origin)
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    body = np.asarray(data, dtype=store).tobytes(order="F")
    return bytes(hdr) + body


def load_nifti(path) -> Volume:
    return read_nifti(Path(path).read_bytes())[0]


def save_nifti(path, vol: Volume, dtype=np.float32, compress: Optional[bool] = None) -> Path:
    path = Path(path)
    payload = write_nifti(vol, dtype=dtype)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
    return path


# ---------------------------------------------------------------------------
# DICOM metadata

GE = "GE"
SIEMENS = "Siemens"


def normalize_manufacturer(raw: str) -> str:
    """Map a free-text manufacturer to ``GE``/``Siemens`` by prefix, else keep it."""
    text = raw.strip()
    upper = text.upper()
    if upper.startswith("SIEMENS"):
        return SIEMENS
    if upper.startswith("GE"):
        return GE
    return text


@dataclass
class SeriesMeta:
    study_id: str
    manufacturer: str
    series_description: str = ""
    slice_thickness: Optional[float] = None
    patient_age: Optional[float] = None
    patient_sex: str = "Unknown"
    label: Optional[str] = None

    def __post_init__(self):
        if not self.manufacturer or not str(self.manufacturer).strip():
            raise ValidationError(f"study {self.study_id!r}: manufacturer must not be empty")
        if self.slice_thickness is not None and not self.slice_thickness > 0:
            raise ValidationError(
                f"study {self.study_id!r}: slice thickness must be > 0, got {self.slice_thickness}"
            )
        if self.patient_sex not in ("M", "F", "Unknown"):
            raise ValidationError(f"study {self.study_id!r}: sex must be M, F or Unknown")
        if self.label not in (None, "positive", "negative"):
            raise ValidationError(f"study {self.study_id!r}: label must be positive/negative")


TAG_MANUFACTURER = (0x0008, 0x0070)
TAG_SERIES_DESCRIPTION = (0x0008, 0x103E)
TAG_SLICE_THICKNESS = (0x0018, 0x0050)
TAG_PATIENT_SEX = (0x0010, 0x0040)
TAG_PATIENT_AGE = (0x0010, 0x1010)
TAG_STUDY_UID = (0x0020, 0x000D)
_WANTED = {
    TAG_MANUFACTURER,
    TAG_SERIES_DESCRIPTION,
    TAG_SLICE_THICKNESS,
    TAG_PATIENT_SEX,
    TAG_PATIENT_AGE,
    TAG_STUDY_UID,
}

# VRs whose explicit length field is 4 bytes after two reserved bytes
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
_UNDEFINED = 0xFFFFFFFF
_SEQ_DELIM = b"\xfe\xff\xdd\xe0\x00\x00\x00\x00"


def iter_dicom_elements(payload: bytes):
    """Yield ``(tag, vr, value_bytes, end_offset)`` for each top-level element.

    Only explicit-VR little endian is understood. Undefined-length sequences
    are skipped up to their delimitation item.
    """
    if len(payload) < 132 or payload[128:132] != b"DICM":
        raise FormatError("missing 'DICM' marker at offset 128")
    pos = 132
    end = len(payload)
    while pos < end:
        if pos + 8 > end:
            raise TruncatedError(f"element header truncated at offset {pos}")
        group, elem = struct.unpack_from("<HH", payload, pos)
        vr = payload[pos + 4 : pos + 6]
        if not (vr.isalpha() and vr.isupper()):
            raise FormatError(f"invalid VR {vr!r} at offset {pos} (only explicit VR is supported)")
        if vr in _LONG_VRS:
            if pos + 12 > end:
                raise TruncatedError(f"element header truncated at offset {pos}")
            (length,) = struct.unpack_from("<I", payload, pos + 8)
            value_at = pos + 12
        else:
            (length,) = struct.unpack_from("<H", payload, pos + 6)
            value_at = pos + 8
        if length == _UNDEFINED:
            if vr not in (b"SQ", b"UN"):
                raise FormatError(f"undefined length on VR {vr.decode()} at offset {pos}")
            stop = payload.find(_SEQ_DELIM, value_at)
            if stop < 0:
                raise TruncatedError(f"unterminated sequence starting at offset {pos}")
            value = payload[value_at:stop]
            pos = stop + len(_SEQ_DELIM)
        else:
            if value_at + length > end:
                raise TruncatedError(
                    f"element ({group:04X},{elem:04X}) declares {length} bytes past end of payload"
                )
            value = payload[value_at : value_at + length]
            pos = value_at + length
        yield (group, elem), vr, value, pos


def _text(value: bytes) -> str:
    return value.decode("latin-1").strip("\x00 ").strip()


_AGE_RE = re.compile(r"^(\d{3})([DWMY])$")
_AGE_UNIT_YEARS = {"Y": 1.0, "M": 1.0 / 12.0, "W": 7.0 / 365.25, "D": 1.0 / 365.25}


def parse_age(text: str) -> Optional[float]:
    """DICOM AS string (``"063Y"``) to years; malformed values give ``None``."""
    m = _AGE_RE.match(text.strip())
    if not m:
        return None
    n, unit = int(m.group(1)), m.group(2)
    return float(n) if unit == "Y" else n * _AGE_UNIT_YEARS[unit]


def _parse_thickness(text: str) -> Optional[float]:
    try:
        value = float(text.split("\\")[0])
    except ValueError:
        return None
    return value if np.isfinite(value) and value > 0 else None


def read_dicom_meta(payload: bytes, study_id: Optional[str] = None) -> SeriesMeta:
    """Extract cohort metadata from a Part-10 explicit-VR little-endian file.

    Missing optional tags fall back to defaults; an absent Manufacturer
    becomes ``"UNKNOWN"`` so the record stays valid.
    """
    found: dict[tuple[int, int], str] = {}
    for tag, _vr, value, _end in iter_dicom_elements(bytes(payload)):
        if tag in _WANTED:
            found[tag] = _text(value)

    manufacturer = normalize_manufacturer(found.get(TAG_MANUFACTURER, "")) or "UNKNOWN"
    sex = found.get(TAG_PATIENT_SEX, "").upper()
    return SeriesMeta(
        study_id=study_id if study_id is not None else found.get(TAG_STUDY_UID, ""),
        manufacturer=manufacturer,
        series_description=found.get(TAG_SERIES_DESCRIPTION, ""),
        slice_thickness=_parse_thickness(found.get(TAG_SLICE_THICKNESS, "")),
        patient_age=parse_age(found.get(TAG_PATIENT_AGE, "")),
        patient_sex=sex if sex in ("M", "F") else "Unknown",
    )


def encode_dicom_element(group: int, elem: int, vr: str, value: bytes) -> bytes:
    """Explicit-VR little-endian element encoder, used to build fixtures."""
    if len(value) % 2:
        value = value + (b"\x00" if vr in ("UI", "OB") else b" ")
    vrb = vr.encode("ascii")
    if vrb in _LONG_VRS:
        return struct.pack("<HH2sHI", group, elem, vrb, 0, len(value)) + value
    return struct.pack("<HH2sH", group, elem, vrb, len(value)) + value


def build_dicom_payload(elements, preamble: bytes = b"\x00" * 128) -> bytes:
    """Assemble ``preamble + 'DICM' + elements`` from ``(group, elem, vr, bytes)`` tuples."""
    parts = [preamble, b"DICM"]
    parts.extend(encode_dicom_element(*e) for e in elements)
    return b"".join(parts)
