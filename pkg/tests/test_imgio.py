import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbias.errors import CtBiasError, FormatError, TruncatedError, UnsupportedError, ValidationError
from ctbias.imgio import (
    GE,
    SIEMENS,
    SeriesMeta,
    build_dicom_payload,
    iter_dicom_elements,
    load_nifti,
    normalize_manufacturer,
    parse_age,
    read_dicom_meta,
    read_nifti,
    save_nifti,
    write_nifti,
)
from ctbias.volgrid import Volume


def hand_header(dims, datatype, bitpix, slope, inter, magic=b"n+1\x00", vox_offset=352.0):
    """A NIfTI-1 header assembled field by field, independent of write_nifti."""
    h = bytearray(352)
    h[0:4] = struct.pack("<i", 348)
    h[40:56] = struct.pack("<8h", len(dims), *dims, *([1] * (7 - len(dims))))
    h[70:74] = struct.pack("<2h", datatype, bitpix)
    h[76:108] = struct.pack("<8f", 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    h[108:120] = struct.pack("<3f", vox_offset, slope, inter)
    h[344:348] = magic
    return bytes(h)


# --- NIfTI

def test_roundtrip_random_float32():
    data = np.random.default_rng(0).normal(size=(4, 4, 4)).astype(np.float32)
    vol, _ = read_nifti(write_nifti(Volume(data)))
    np.testing.assert_array_equal(vol.data, data)


def test_int16_with_intercept():
    payload = hand_header((1, 1, 1), 4, 16, 1.0, -1024.0) + struct.pack("<h", 1024)
    vol, hdr = read_nifti(payload)
    assert vol.data[0, 0, 0] == 0.0
    assert hdr.scl_inter == -1024.0


def test_zero_slope_means_unscaled():
    payload = hand_header((1, 1, 1), 4, 16, 0.0, 0.0) + struct.pack("<h", 77)
    assert read_nifti(payload)[0].data[0, 0, 0] == 77.0


def test_bad_magic():
    payload = hand_header((1, 1, 1), 16, 32, 1.0, 0.0, magic=b"XXXX") + b"\x00" * 4
    with pytest.raises(FormatError):
        read_nifti(payload)


def test_pair_magic_unsupported():
    payload = hand_header((1, 1, 1), 16, 32, 1.0, 0.0, magic=b"ni1\x00") + b"\x00" * 4
    with pytest.raises(UnsupportedError):
        read_nifti(payload)


def test_unsupported_datatype():
    payload = hand_header((1, 1, 1), 8, 32, 1.0, 0.0) + b"\x00" * 4  # int32
    with pytest.raises(UnsupportedError):
        read_nifti(payload)


def test_truncated_payload():
    payload = write_nifti(Volume(np.zeros((3, 3, 3))))
    with pytest.raises(TruncatedError):
        read_nifti(payload[:-1])
    with pytest.raises(TruncatedError):
        read_nifti(payload[:100])


def test_truncated_gzip():
    payload = gzip.compress(write_nifti(Volume(np.zeros((3, 3, 3)))))
    with pytest.raises(TruncatedError):
        read_nifti(payload[: len(payload) // 2])


def test_single_voxel_size():
    payload = write_nifti(Volume(np.zeros((1, 1, 1))))
    assert len(payload) == 352 + 4
    assert read_nifti(payload)[0].data[0, 0, 0] == 0.0


def test_spacing_roundtrip():
    vol, _ = read_nifti(write_nifti(Volume(np.zeros((2, 2, 2)), (0.5, 0.5, 5.0))))
    assert vol.spacing == (0.5, 0.5, 5.0)


def test_full_size_payload_length():
    assert len(write_nifti(Volume(np.zeros((256, 256, 35), np.float32)))) == 352 + 256 * 256 * 35 * 4


def test_written_header_fields():
    payload = write_nifti(Volume(np.zeros((2, 3, 4))))
    assert payload[344:348] == b"n+1\x00"
    assert struct.unpack("<3f", payload[108:120]) == (352.0, 1.0, 0.0)
    assert struct.unpack("<2h", payload[70:74]) == (16, 32)


def test_big_endian_header():
    data = np.arange(8, dtype=">f4").reshape(2, 2, 2, order="F")
    h = bytearray(352)
    h[0:4] = struct.pack(">i", 348)
    h[40:56] = struct.pack(">8h", 3, 2, 2, 2, 1, 1, 1, 1)
    h[70:74] = struct.pack(">2h", 16, 32)
    h[76:108] = struct.pack(">8f", 1, 2, 3, 4, 0, 0, 0, 0)
    h[108:120] = struct.pack(">3f", 352, 1, 0)
    h[344:348] = b"n+1\x00"
    vol, hdr = read_nifti(bytes(h) + data.tobytes(order="F"))
    assert hdr.byteorder == ">"
    assert vol.spacing == (2.0, 3.0, 4.0)
    np.testing.assert_array_equal(vol.data, data.astype(np.float32))


@pytest.mark.parametrize("dtype", [np.uint8, np.int16])
def test_integer_write_rejects_unrepresentable(dtype):
    with pytest.raises(ValidationError):
        write_nifti(Volume(np.full((1, 1, 1), 0.5)), dtype=dtype)


def test_file_roundtrip_gz(tmp_path):
    data = np.random.default_rng(1).normal(size=(3, 4, 5)).astype(np.float32)
    path = save_nifti(tmp_path / "v.nii.gz", Volume(data, (1.0, 2.0, 3.0)))
    assert path.read_bytes()[:2] == b"\x1f\x8b"
    np.testing.assert_array_equal(load_nifti(path).data, data)


DTYPES = [np.uint8, np.int16, np.float32, np.float64]


def random_volume(rng, dtype):
    shape = tuple(int(n) for n in rng.integers(1, 7, size=3))
    if dtype == np.uint8:
        data = rng.integers(0, 256, size=shape)
    elif dtype == np.int16:
        data = rng.integers(-32768, 32768, size=shape)
    else:
        data = rng.normal(0, 1000, size=shape)
    data = data.astype(np.float64 if dtype == np.float64 else np.float32)
    spacing = tuple(float(np.float32(s)) for s in rng.uniform(0.1, 10, size=3))
    return Volume(data, spacing)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(DTYPES), st.booleans())
def test_roundtrip_property(seed, dtype, compress):
    vol = random_volume(np.random.default_rng(seed), dtype)
    payload = write_nifti(vol, dtype=dtype)
    if compress:
        payload = gzip.compress(payload)
    back, _ = read_nifti(payload)
    assert back.shape == vol.shape and back.spacing == vol.spacing
    np.testing.assert_array_equal(back.data, vol.data)


# --- DICOM

def fixture(manufacturer="SIEMENS", extra=()):
    elements = [
        (0x0008, 0x0016, "UI", b"1.2.840.10008.5.1.4.1.1.2"),
        (0x0008, 0x0070, "LO", manufacturer.encode()),
        (0x0008, 0x103E, "LO", b"HEAD 5mm STND"),
        (0x0009, 0x0010, "OB", bytes(range(10))),  # unknown long-form element, skipped by length
        (0x0010, 0x0040, "CS", b"F"),
        (0x0010, 0x1010, "AS", b"063Y"),
        (0x0018, 0x0050, "DS", b"5.0"),
        (0x0020, 0x000D, "UI", b"1.2.3.4"),
        *extra,
    ]
    return build_dicom_payload(elements)


def test_dicom_siemens():
    meta = read_dicom_meta(fixture("SIEMENS"))
    assert meta.manufacturer == SIEMENS
    assert meta.series_description == "HEAD 5mm STND"
    assert meta.slice_thickness == 5.0
    assert meta.patient_age == 63.0
    assert meta.patient_sex == "F"
    assert meta.study_id == "1.2.3.4"


def test_dicom_ge():
    assert read_dicom_meta(fixture("GE MEDICAL SYSTEMS")).manufacturer == GE


def test_dicom_other_manufacturer_kept():
    assert read_dicom_meta(fixture("Toshiba")).manufacturer == "Toshiba"


def test_dicom_missing_marker():
    payload = bytearray(fixture())
    payload[128:132] = b"DICX"
    with pytest.raises(FormatError):
        read_dicom_meta(bytes(payload))


def test_dicom_optional_tags_absent():
    meta = read_dicom_meta(build_dicom_payload([(0x0008, 0x0070, "LO", b"GE")]), study_id="s1")
    assert meta.manufacturer == GE
    assert meta.slice_thickness is None and meta.patient_age is None and meta.patient_sex == "Unknown"


def test_dicom_undefined_length_sequence_skipped():
    seq = (b"\xfe\xff\x00\xe0\xff\xff\xff\xff" + b"junk" * 3 + b"\xfe\xff\xdd\xe0\x00\x00\x00\x00")
    payload = build_dicom_payload([(0x0008, 0x0070, "LO", b"GE")])
    payload += struct.pack("<HH2sHI", 0x0008, 0x1140, b"SQ", 0, 0xFFFFFFFF) + seq
    payload += build_dicom_payload([(0x0018, 0x0050, "DS", b"2.5")])[132:]
    meta = read_dicom_meta(payload, study_id="x")
    assert meta.slice_thickness == 2.5


@pytest.mark.parametrize("text,years", [("063Y", 63.0), ("006M", 0.5), ("63Y", None), ("", None), ("010Q", None)])
def test_parse_age(text, years):
    assert parse_age(text) == years


@pytest.mark.parametrize("raw,out", [("siemens Healthineers", SIEMENS), (" GE", GE), ("Philips", "Philips")])
def test_normalize_manufacturer(raw, out):
    assert normalize_manufacturer(raw) == out


def element_ends(payload):
    return {132} | {end for *_rest, end in iter_dicom_elements(payload)}


def test_dicom_truncation_fuzz():
    payload = fixture()
    ends = element_ends(payload)
    rng = np.random.default_rng(0)
    for cut in rng.integers(0, len(payload), size=1000):
        cut = int(cut)
        part = payload[:cut]
        if cut in ends:
            # cutting exactly between elements leaves a shorter, well-formed file
            assert isinstance(read_dicom_meta(part, study_id="s"), SeriesMeta)
            continue
        with pytest.raises(CtBiasError) as info:
            read_dicom_meta(part)
        assert isinstance(info.value, (FormatError, TruncatedError))


def test_series_meta_invariants():
    with pytest.raises(ValidationError):
        SeriesMeta("s", "")
    with pytest.raises(ValidationError):
        SeriesMeta("s", GE, slice_thickness=0.0)
