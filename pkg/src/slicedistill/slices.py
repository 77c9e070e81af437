"""3D subjects -> stacked 2D slices: sampling, channel stacking,
normalization, resizing.

Channel order is fixed (T1, T2, FLAIR). A single available modality is
duplicated into all three channels; with two, the earliest present
modality fills the missing slot. Normalization statistics are always
computed over the source volume, never a single slice, so inter-slice
intensity relationships survive.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._interp import resize_bilinear_array, resize_nearest_array
from .errors import IndexOutOfRange, NoModalities, NonPositiveArgument
from .volume_io import MODALITIES, SubjectRecord

ZSCORE = "per_volume_zscore"
MINMAX = "per_volume_minmax"


@dataclass(frozen=True)
class SliceConfig:
    num_slices: int = 150
    target_side: int = 224
    normalization: str = ZSCORE

    def __post_init__(self):
        if self.num_slices < 1:
            raise NonPositiveArgument(f"num_slices {self.num_slices}")
        if self.target_side < 16:
            raise NonPositiveArgument(f"target_side {self.target_side}")
        if self.normalization not in (ZSCORE, MINMAX):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class SliceSample:
    pixels: np.ndarray                      # (H', W', 3) float32
    subject_id: str
    slice_index: int
    label: int | None = None
    seg_slice: np.ndarray | None = None     # (H', W') int


def sample_slice_indices(num_slices: int, depth: int) -> list[int]:
    """Evenly spaced axial indices, endpoint-inclusive.

    num_slices > depth falls back to all slices; num_slices == 1 takes
    the middle slice; otherwise index_k = round(k * (depth-1) /
    (num_slices-1)), which is strictly increasing and hits 0 and
    depth-1.
    """
    if num_slices < 1 or depth < 1:
        raise NonPositiveArgument(f"num_slices={num_slices}, depth={depth}")
    if num_slices > depth:
        return list(range(depth))
    if num_slices == 1:
        return [depth // 2]
    step = (depth - 1) / (num_slices - 1)
    return [int(np.floor(k * step + 0.5)) for k in range(num_slices)]


def channel_modalities(subject: SubjectRecord) -> tuple[str, str, str]:
    """Which source modality occupies each of the three channels."""
    present = [m for m in MODALITIES if m in subject.volumes]
    if not present:
        raise NoModalities(f"subject {subject.subject_id} has no volumes")
    if len(present) == 3:
        return MODALITIES
    if len(present) == 1:
        return (present[0],) * 3
    fill = present[0]
    return tuple(m if m in subject.volumes else fill for m in MODALITIES)


def stack_modalities(subject: SubjectRecord, slice_index: int) -> SliceSample:
    """Stack one axial slice of each channel's modality into (H, W, 3)."""
    chans = channel_modalities(subject)
    depth = subject.shape[2]
    if not 0 <= slice_index < depth:
        raise IndexOutOfRange(f"slice {slice_index} outside [0, {depth})")
    planes = [subject.volumes[m].data[:, :, slice_index] for m in chans]
    pixels = np.stack(planes, axis=-1).astype(np.float32)
    seg = subject.seg_mask[:, :, slice_index].copy() if subject.seg_mask is not None else None
    return SliceSample(pixels=pixels, subject_id=subject.subject_id,
                       slice_index=slice_index, label=subject.label, seg_slice=seg)


@dataclass(frozen=True)
class VolumeStats:
    """Per-channel statistics of the source volumes (not the slice)."""
    mean: np.ndarray
    std: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray


def compute_volume_stats(subject: SubjectRecord) -> VolumeStats:
    chans = channel_modalities(subject)
    data = [subject.volumes[m].data for m in chans]
    return VolumeStats(
        mean=np.array([d.mean() for d in data], dtype=np.float32),
        std=np.array([d.std() for d in data], dtype=np.float32),
        vmin=np.array([d.min() for d in data], dtype=np.float32),
        vmax=np.array([d.max() for d in data], dtype=np.float32),
    )


def intensity_normalize(sample: SliceSample, mode: str, stats: VolumeStats) -> SliceSample:
    """Per-channel z-score (sigma clamped to 1e-6) or min-max to [0, 1].

    Constant volumes map to all zeros under either mode.
    """
    x = sample.pixels
    if mode == ZSCORE:
        sigma = np.maximum(stats.std, np.float32(1e-6))
        out = (x - stats.mean) / sigma
    elif mode == MINMAX:
        span = stats.vmax - stats.vmin
        safe = np.where(span > 0, span, np.float32(1.0))
        out = np.where(span > 0, (x - stats.vmin) / safe, np.float32(0.0))
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return replace(sample, pixels=out.astype(np.float32))


def resize_bilinear(sample: SliceSample, target_side: int) -> SliceSample:
    """Bilinear channelwise resize (align-corners=false); the seg slice,
    if any, is resized nearest-neighbor so no new labels appear."""
    if target_side < 1:
        raise NonPositiveArgument(f"target_side {target_side}")
    h, w = sample.pixels.shape[:2]
    if (h, w) == (target_side, target_side):
        return sample
    pixels = resize_bilinear_array(sample.pixels, target_side, target_side)
    seg = None
    if sample.seg_slice is not None:
        seg = resize_nearest_array(sample.seg_slice, target_side, target_side)
    return replace(sample, pixels=pixels, seg_slice=seg)


def extract_slices(subject: SubjectRecord, cfg: SliceConfig) -> list[SliceSample]:
    """Full per-subject pipeline: sample indices, stack, normalize, resize."""
    stats = compute_volume_stats(subject)
    indices = sample_slice_indices(cfg.num_slices, subject.shape[2])
    out = []
    for idx in indices:
        s = stack_modalities(subject, idx)
        s = intensity_normalize(s, cfg.normalization, stats)
        out.append(resize_bilinear(s, cfg.target_side))
    return out
