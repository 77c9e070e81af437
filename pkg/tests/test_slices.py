import numpy as np
import pytest

from slicedistill import slices as sl
from slicedistill import volume_io as vio
from slicedistill.errors import (IndexOutOfRange, NoModalities,
                                 NonPositiveArgument)


def test_indices_all_slices_when_equal():
    assert sl.sample_slice_indices(5, 5) == [0, 1, 2, 3, 4]


def test_indices_rounding_formula():
    assert sl.sample_slice_indices(3, 5) == [0, 2, 4]


def test_indices_150_slice_case():
    assert sl.sample_slice_indices(4, 150) == [0, 50, 99, 149]


def test_indices_single_slice_is_middle():
    assert sl.sample_slice_indices(1, 7) == [3]
    assert sl.sample_slice_indices(1, 8) == [4]


def test_indices_fall_back_to_all_when_fewer_slices():
    assert sl.sample_slice_indices(9, 4) == [0, 1, 2, 3]


def test_indices_guard():
    with pytest.raises(NonPositiveArgument):
        sl.sample_slice_indices(0, 5)
    with pytest.raises(NonPositiveArgument):
        sl.sample_slice_indices(3, 0)


def test_indices_property_sweep():
    rng = np.random.default_rng(0)
    for _ in range(300):
        depth = int(rng.integers(1, 200))
        num = int(rng.integers(1, 200))
        idx = sl.sample_slice_indices(num, depth)
        assert idx == sorted(set(idx))
        assert all(0 <= i < depth for i in idx)
        if 2 <= num <= depth:
            assert idx[0] == 0 and idx[-1] == depth - 1
            assert len(idx) == num


@pytest.fixture(scope="module")
def subject():
    return vio.generate_phantom(2, "lesion", (20, 22, 18))


def test_stack_fixed_channel_order(subject):
    s = sl.stack_modalities(subject, 7)
    assert s.pixels.shape == (20, 22, 3)
    for c, m in enumerate(vio.MODALITIES):
        assert np.array_equal(s.pixels[:, :, c], subject.volumes[m].data[:, :, 7])
    assert s.label == subject.label
    assert np.array_equal(s.seg_slice, subject.seg_mask[:, :, 7])


def test_stack_single_modality_duplicates(subject):
    only = vio.SubjectRecord("x", {"T2": subject.volumes["T2"]})
    s = sl.stack_modalities(only, 3)
    plane = subject.volumes["T2"].data[:, :, 3]
    for c in range(3):
        assert np.array_equal(s.pixels[:, :, c], plane)


@pytest.mark.parametrize("present,expected", [
    (("T1", "FLAIR"), ("T1", "T1", "FLAIR")),
    (("T2", "FLAIR"), ("T2", "T2", "FLAIR")),
    (("T1", "T2"), ("T1", "T2", "T1")),
])
def test_stack_two_modality_fill_rule(subject, present, expected):
    rec = vio.SubjectRecord("x", {m: subject.volumes[m] for m in present})
    assert sl.channel_modalities(rec) == expected


def test_stack_always_three_channels(subject):
    import itertools
    for r in (1, 2, 3):
        for combo in itertools.combinations(vio.MODALITIES, r):
            rec = vio.SubjectRecord("x", {m: subject.volumes[m] for m in combo})
            assert sl.stack_modalities(rec, 0).pixels.shape[-1] == 3


def test_stack_guards(subject):
    with pytest.raises(NoModalities):
        sl.stack_modalities(vio.SubjectRecord("x", {}), 0)
    with pytest.raises(IndexOutOfRange):
        sl.stack_modalities(subject, 18)


def test_zscore_constant_volume_is_zero():
    vol = vio.Volume(np.full((16, 16, 16), 5.0, dtype=np.float32))
    rec = vio.SubjectRecord("c", {"T1": vol})
    stats = sl.compute_volume_stats(rec)
    s = sl.intensity_normalize(sl.stack_modalities(rec, 3), sl.ZSCORE, stats)
    assert np.abs(s.pixels).max() == 0.0
    s = sl.intensity_normalize(sl.stack_modalities(rec, 3), sl.MINMAX, stats)
    assert np.abs(s.pixels).max() == 0.0


def test_minmax_maps_range_to_unit():
    # values 0..10 varying in-plane so a single slice spans the range
    col = np.concatenate([np.arange(11, dtype=np.float32), np.zeros(5, np.float32)])
    data = np.tile(col[:, None, None], (1, 16, 16))
    rec = vio.SubjectRecord("m", {"T1": vio.Volume(data)})
    stats = sl.compute_volume_stats(rec)
    s = sl.intensity_normalize(sl.stack_modalities(rec, 5), sl.MINMAX, stats)
    assert s.pixels.min() == 0.0 and s.pixels.max() == 1.0
    assert np.allclose(np.unique(s.pixels) * 10, np.arange(11), atol=1e-6)


def test_zscore_full_volume_mean_near_zero(subject):
    stats = sl.compute_volume_stats(subject)
    total = np.zeros(3, dtype=np.float64)
    depth = subject.shape[2]
    for d in range(depth):
        s = sl.intensity_normalize(sl.stack_modalities(subject, d), sl.ZSCORE, stats)
        total += s.pixels.astype(np.float64).mean(axis=(0, 1))
    assert np.abs(total / depth).max() < 1e-6


def test_resize_identity_bitwise():
    pixels = np.random.default_rng(0).standard_normal((32, 32, 3)).astype(np.float32)
    s = sl.SliceSample(pixels, "x", 0)
    out = sl.resize_bilinear(s, 32)
    assert np.array_equal(out.pixels, pixels)


def test_checkerboard_bilinear_hand_values():
    # 2x2 {0,1;1,0} -> 4x4 under align-corners=false; hand-evaluated
    cb = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
    s = sl.SliceSample(cb[:, :, None].repeat(3, axis=2), "cb", 0)
    up = sl.resize_bilinear(s, 4).pixels[:, :, 0]
    expected = np.array([
        [0.0, 0.25, 0.75, 1.0],
        [0.25, 0.375, 0.625, 0.75],
        [0.75, 0.625, 0.375, 0.25],
        [1.0, 0.75, 0.25, 0.0],
    ], dtype=np.float32)
    assert np.allclose(up, expected, atol=1e-7)
    assert abs(up[1:3, 1:3].mean() - 0.5) < 1e-7


def test_mask_resize_preserves_label_set():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h, w = rng.integers(2, 12, 2)
        mask = rng.integers(0, 5, (h, w))
        s = sl.SliceSample(np.zeros((h, w, 3), dtype=np.float32), "m", 0,
                           seg_slice=mask)
        out = sl.resize_bilinear(s, int(rng.integers(2, 24)))
        assert set(np.unique(out.seg_slice)) <= set(np.unique(mask))


def test_mask_2x2_to_4x4_keeps_values():
    s = sl.SliceSample(np.zeros((2, 2, 3), dtype=np.float32), "m", 0,
                       seg_slice=np.array([[1, 2], [3, 4]]))
    out = sl.resize_bilinear(s, 4)
    assert set(np.unique(out.seg_slice)) == {1, 2, 3, 4}


def test_extract_slices_pipeline(subject):
    cfg = sl.SliceConfig(num_slices=5, target_side=32)
    out = sl.extract_slices(subject, cfg)
    assert len(out) == 5
    assert all(s.pixels.shape == (32, 32, 3) for s in out)
    assert [s.slice_index for s in out] == sl.sample_slice_indices(5, 18)
    assert all(np.isfinite(s.pixels).all() for s in out)
    assert all(s.seg_slice.shape == (32, 32) for s in out)


def test_slice_config_validation():
    with pytest.raises(NonPositiveArgument):
        sl.SliceConfig(num_slices=0)
    with pytest.raises(NonPositiveArgument):
        sl.SliceConfig(target_side=8)
    with pytest.raises(ValueError):
        sl.SliceConfig(normalization="nope")
