import struct

import numpy as np
import pytest

from slicedistill import volume_io as vio
from slicedistill.errors import (BadMagic, FormatError, NonFinite, SizeTooSmall,
                                 TruncatedData, UnsupportedDatatype)


def reference_nifti(dims=(4, 4, 2), datatype=16, payload=None, magic=b"n+1\x00",
                    pixdim=(1.0, 1.0, 1.0), slope=1.0, inter=0.0, vox_offset=352.0):
    """Hand-assembled header for parser tests, independent of write_nifti."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    bitpix = {2: 8, 4: 16, 16: 32}.get(datatype, 32)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    pad = b"\x00" * (int(vox_offset) - 348)
    if payload is None:
        n = int(np.prod(dims))
        payload = np.arange(n, dtype="<f4").tobytes()
    return bytes(hdr) + pad + payload


def test_parse_reference_layout():
    # 4x4x2 float32, values 0..31 in file order
    vol = vio.parse_nifti(reference_nifti())
    assert vol.shape == (4, 4, 2)
    assert vol.data[0, 0, 0] == 0.0
    assert vol.data[3, 3, 1] == 31.0
    # file order is i-fastest: data[h, w, d] = payload[h + 4w + 16d]
    assert vol.data[1, 2, 0] == 9.0


def test_bad_magic():
    with pytest.raises(BadMagic):
        vio.parse_nifti(reference_nifti(magic=b"ni1\x00"))


def test_unsupported_datatype():
    with pytest.raises(UnsupportedDatatype):
        vio.parse_nifti(reference_nifti(datatype=64))  # float64 code


def test_truncated_payload():
    blob = reference_nifti()
    with pytest.raises(TruncatedData):
        vio.parse_nifti(blob[:-10])


def test_nan_payload_rejected():
    payload = np.full(32, np.nan, dtype="<f4").tobytes()
    with pytest.raises(NonFinite):
        vio.parse_nifti(reference_nifti(payload=payload))


def test_wrong_dim_count_rejected():
    blob = bytearray(reference_nifti())
    struct.pack_into("<h", blob, 40, 4)
    with pytest.raises(FormatError):
        vio.parse_nifti(bytes(blob))


def test_scl_slope_applied():
    vol = vio.parse_nifti(reference_nifti(slope=2.0, inter=10.0))
    assert vol.data[0, 0, 0] == 10.0
    assert vol.data[3, 3, 1] == 2.0 * 31 + 10.0


def test_scl_slope_zero_is_identity():
    vol = vio.parse_nifti(reference_nifti(slope=0.0, inter=99.0))
    assert vol.data[3, 3, 1] == 31.0


def test_int16_and_uint8_payloads():
    p16 = np.arange(32, dtype="<i2").tobytes()
    v = vio.parse_nifti(reference_nifti(datatype=4, payload=p16))
    assert v.data.dtype == np.float32 and v.data[3, 3, 1] == 31.0
    p8 = np.arange(32, dtype=np.uint8).tobytes()
    v = vio.parse_nifti(reference_nifti(datatype=2, payload=p8))
    assert v.data[3, 3, 1] == 31.0


def test_write_smallest_volume_is_header_plus_four_bytes():
    vol = vio.Volume(np.array([[[7.0]]], dtype=np.float32))
    blob = vio.write_nifti(vol)
    assert len(blob) == 348 + 4
    assert vio.parse_nifti(blob).data[0, 0, 0] == 7.0


def test_round_trip_random_volume():
    rng = np.random.default_rng(0)
    vol = vio.Volume(rng.standard_normal((8, 8, 8)).astype(np.float32),
                     (1.0, 1.0, 2.0), "FLAIR", "subj-42")
    back = vio.parse_nifti(vio.write_nifti(vol))
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing
    assert back.modality == vol.modality
    assert back.subject_id == vol.subject_id


def test_write_parse_write_byte_identity():
    rng = np.random.default_rng(1)
    for shape in ((1, 1, 1), (5, 7, 3), (16, 16, 16)):
        vol = vio.Volume(rng.standard_normal(shape).astype(np.float32),
                         (0.5, 0.5, 1.25), "T2", "abc")
        b1 = vio.write_nifti(vol)
        b2 = vio.write_nifti(vio.parse_nifti(b1))
        assert b1 == b2


def test_spacing_survives_round_trip():
    vol = vio.Volume(np.zeros((4, 4, 4), dtype=np.float32), (1.0, 1.0, 2.0))
    assert vio.parse_nifti(vio.write_nifti(vol)).spacing == (1.0, 1.0, 2.0)


def test_nonpositive_pixdim_rejected():
    with pytest.raises(FormatError):
        vio.parse_nifti(reference_nifti(pixdim=(1.0, 0.0, 1.0)))


# phantoms


def test_phantom_deterministic():
    a = vio.generate_phantom(9, "lesion", (20, 20, 16))
    b = vio.generate_phantom(9, "lesion", (20, 20, 16))
    assert a.subject_id == b.subject_id and a.label == b.label
    assert np.array_equal(a.seg_mask, b.seg_mask)
    for m in vio.MODALITIES:
        assert np.array_equal(a.volumes[m].data, b.volumes[m].data)


def test_phantom_healthy_has_no_lesion_label():
    rec = vio.generate_phantom(3, "healthy", (20, 20, 16))
    assert not (rec.seg_mask == vio.LESION_LABEL).any()
    assert rec.label == 0


def test_phantom_lesion_bright_on_flair():
    rec = vio.generate_phantom(4, "lesion", (24, 24, 20))
    seg = rec.seg_mask
    assert (seg == vio.LESION_LABEL).sum() > 0
    flair = rec.volumes["FLAIR"].data
    assert flair[seg == vio.LESION_LABEL].mean() > flair[seg == vio.TISSUE].mean()
    t2 = rec.volumes["T2"].data
    assert t2[seg == vio.LESION_LABEL].mean() > t2[seg == vio.TISSUE].mean()


def test_phantom_modalities_share_dimensions():
    rec = vio.generate_phantom(5, "lesion", (18, 22, 16))
    shapes = {v.shape for v in rec.volumes.values()}
    assert shapes == {(18, 22, 16)}
    assert rec.seg_mask.shape == (18, 22, 16)


def test_phantom_size_guard():
    with pytest.raises(SizeTooSmall):
        vio.generate_phantom(0, "healthy", (15, 20, 20))


def test_cohort_class_balance():
    cohort = vio.generate_phantom_cohort(10, 0.5, (16, 16, 16), seed=2)
    labels = [r.label for r in cohort]
    assert sum(labels) == 5
    assert len({r.subject_id for r in cohort}) == 10


# manifests


def test_manifest_round_trip(tmp_path):
    manifest = vio.write_phantom_corpus(tmp_path, 4, 0.5, (16, 16, 16), seed=1)
    loaded = vio.load_manifest(tmp_path / "manifest.json")
    assert loaded.dataset_name == manifest.dataset_name
    assert loaded.subject_ids() == manifest.subject_ids()
    rec = vio.load_subject(loaded.entries[0], tmp_path)
    assert set(rec.volumes) == set(vio.MODALITIES)
    assert rec.seg_mask is not None and rec.seg_mask.dtype == np.int64


def test_manifest_duplicate_ids_rejected():
    e = vio.ManifestEntry(subject="a", t1="a.nii")
    with pytest.raises(FormatError):
        vio.DatasetManifest(dataset_name="d", entries=[e, e])


def test_loaded_subject_matches_generated(tmp_path):
    manifest = vio.write_phantom_corpus(tmp_path, 2, 1.0, (16, 16, 16), seed=7)
    cohort = vio.generate_phantom_cohort(2, 1.0, (16, 16, 16), seed=7)
    rec = vio.load_subject(manifest.entries[0], tmp_path)
    src = next(r for r in cohort if r.subject_id == rec.subject_id)
    for m in vio.MODALITIES:
        assert np.array_equal(rec.volumes[m].data, src.volumes[m].data)
    assert np.array_equal(rec.seg_mask, src.seg_mask)
    assert rec.label == src.label
