"""Volumes, a NIfTI-1 file subset, dataset manifests, and synthetic phantoms.

Only uncompressed single-file .nii blobs are supported: little-endian,
348-byte header, magic "n+1\\0", datatype uint8/int16/float32, exactly
three spatial dims. The writer always emits the canonical float32 form,
so write -> parse -> write is byte-exact. The affine fields are read but
never used for resampling; inputs are assumed pre-registered and the
third axis is taken as axial.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagic, FormatError, NonFinite, ShapeMismatch,
                     SizeTooSmall, TruncatedData, UnsupportedDatatype)

MODALITIES = ("T1", "T2", "FLAIR")

HEALTHY, LESION = "healthy", "lesion"

# seg_mask labels
BG, TISSUE, VENTRICLE, LESION_LABEL = 0, 1, 2, 3


@dataclass
class Volume:
    """One registered scan: (H, W, D) float32 voxels, depth axis axial."""
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "T1"
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"volume must be 3-D, got {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise FormatError(f"non-positive spacing {self.spacing}")
        if self.modality not in MODALITIES:
            raise FormatError(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.data)):
            raise NonFinite("volume contains NaN/Inf")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SubjectRecord:
    """All volumes of one subject; modalities share dimensions."""
    subject_id: str
    volumes: dict[str, Volume]
    label: int | None = None
    seg_mask: np.ndarray | None = None

    def __post_init__(self):
        shapes = {v.shape for v in self.volumes.values()}
        if len(shapes) > 1:
            raise ShapeMismatch(f"subject {self.subject_id}: modality shapes differ {shapes}")
        if self.seg_mask is not None:
            self.seg_mask = np.asarray(self.seg_mask, dtype=np.int64)
            if shapes and self.seg_mask.shape != next(iter(shapes)):
                raise ShapeMismatch("seg_mask shape differs from volumes")
            if self.seg_mask.min() < 0:
                raise FormatError("negative seg label")

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).shape


# ---------------------------------------------------------------------------
# NIfTI-1 subset

_HDR_SIZE = 348
_MAGIC = b"n+1\x00"
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
# canonical files put the payload straight after the header (no
# extension block); the parser honors whatever vox_offset a file carries
_VOX_OFFSET = 348


def parse_nifti(blob: bytes, subject_id: str | None = None,
                modality: str | None = None) -> Volume:
    """Parse an uncompressed NIfTI-1 blob into a Volume.

    scl_slope/scl_inter are applied when slope is nonzero. modality and
    subject_id default to whatever the descrip field recorded (our
    writer stores them there) and can be overridden by the caller.
    """
    if len(blob) < _HDR_SIZE:
        raise TruncatedData(f"header needs {_HDR_SIZE} bytes, got {len(blob)}")
    if blob[344:348] != _MAGIC:
        raise BadMagic(f"magic {blob[344:348]!r}, expected {_MAGIC!r}")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != _HDR_SIZE:
        raise FormatError("sizeof_hdr != 348; big-endian files are unsupported")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise FormatError(f"dim[0]={dim[0]}, only 3 spatial dims supported")
    h, w, d = dim[1], dim[2], dim[3]
    if min(h, w, d) < 1:
        raise FormatError(f"bad dims {h}x{w}x{d}")
    (datatype, bitpix) = struct.unpack_from("<hh", blob, 70)
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype}")
    dt = _DTYPES[datatype]
    pixdim = struct.unpack_from("<8f", blob, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"non-positive pixdim {spacing}")
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    off = int(vox_offset) if vox_offset >= _HDR_SIZE else _HDR_SIZE
    slope, inter = struct.unpack_from("<2f", blob, 112)

    elem = np.dtype(dt).itemsize
    need = h * w * d * elem
    payload = blob[off:off + need]
    if len(payload) < need:
        raise TruncatedData(f"payload {len(payload)} bytes, need {need}")
    raw = np.frombuffer(payload, dtype=np.dtype(dt).newbyteorder("<"))
    # NIfTI stores i fastest; (H, W, D) Fortran order matches that layout
    arr = raw.reshape((h, w, d), order="F").astype(np.float32)
    if slope != 0.0:
        arr = arr * np.float32(slope) + np.float32(inter)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("NaN/Inf in voxel payload")

    descrip = blob[148:228].split(b"\x00", 1)[0].decode("ascii", "replace")
    meta = dict(kv.split("=", 1) for kv in descrip.split(";") if "=" in kv)
    return Volume(
        data=np.ascontiguousarray(arr),
        spacing=spacing,
        modality=modality or meta.get("modality", "T1"),
        subject_id=subject_id if subject_id is not None else meta.get("subject", ""),
    )


def write_nifti(vol: Volume) -> bytes:
    """Serialize a Volume as the canonical float32 subset file."""
    h, w, d = vol.shape
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, h, w, d, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)        # float32, 32 bpp
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)     # identity scaling
    hdr[123] = 2                                    # spatial units: mm
    descrip = f"modality={vol.modality};subject={vol.subject_id}".encode("ascii")[:79]
    hdr[148:148 + len(descrip)] = descrip
    hdr[344:348] = _MAGIC
    payload = vol.data.astype("<f4").tobytes(order="F")
    return bytes(hdr) + payload


def read_nifti_file(path, subject_id: str | None = None,
                    modality: str | None = None) -> Volume:
    return parse_nifti(Path(path).read_bytes(), subject_id=subject_id, modality=modality)


def write_nifti_file(path, vol: Volume) -> None:
    Path(path).write_bytes(write_nifti(vol))


# ---------------------------------------------------------------------------
# synthetic phantoms

_CLASS_IDS = {HEALTHY: 0, LESION: 1}

# per-modality mean intensities for [background, tissue, ventricle, lesion];
# mimics the complementary contrast of the three sequences
_PROFILES = {
    "T1": (0.05, 0.75, 0.25, 0.85),
    "T2": (0.05, 0.35, 0.90, 0.80),
    "FLAIR": (0.05, 0.50, 0.15, 0.95),
}
_NOISE_SIGMA = 0.02


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_phantom(seed: int, phantom_class: str,
                     size: tuple[int, int, int] = (32, 32, 24)) -> SubjectRecord:
    """Deterministic synthetic subject with T1/T2/FLAIR and a seg mask.

    Ellipsoidal brain with a ventricle; the lesion class adds 1-3 blobs
    that are bright on FLAIR and T2 and only faintly brighter on T1.
    seg labels: 0 background, 1 tissue, 2 ventricle, 3 lesion.
    """
    if phantom_class not in _CLASS_IDS:
        raise ValueError(f"class must be one of {sorted(_CLASS_IDS)}")
    if min(size) < 16:
        raise SizeTooSmall(f"size {size}, all dims must be >= 16")
    rng = np.random.default_rng(np.random.SeedSequence([17, int(seed), _CLASS_IDS[phantom_class]]))
    shape = tuple(int(s) for s in size)
    half = np.array(shape) / 2.0

    center = half + rng.uniform(-0.04, 0.04, 3) * half
    brain = _ellipsoid(shape, center, rng.uniform(0.62, 0.72, 3) * half)
    vent = _ellipsoid(shape, center + rng.uniform(-0.08, 0.08, 3) * half,
                      rng.uniform(0.18, 0.26, 3) * half)
    seg = np.zeros(shape, dtype=np.int64)
    seg[brain] = TISSUE
    seg[brain & vent] = VENTRICLE

    if phantom_class == LESION:
        tissue_idx = np.argwhere(seg == TISSUE)
        for _ in range(int(rng.integers(1, 4))):
            c = tissue_idx[rng.integers(len(tissue_idx))]
            r = rng.uniform(0.09, 0.14) * min(shape) * rng.uniform(0.8, 1.2, 3)
            blob = _ellipsoid(shape, c, np.maximum(r, 1.6))
            seg[blob & (seg == TISSUE)] = LESION_LABEL

    subject_id = f"phantom-{phantom_class}-{int(seed):06d}"
    volumes = {}
    for mod in MODALITIES:
        base = np.array(_PROFILES[mod], dtype=np.float32)[seg]
        noisy = base + rng.normal(0.0, _NOISE_SIGMA, shape).astype(np.float32)
        volumes[mod] = Volume(noisy.astype(np.float32), (1.0, 1.0, 1.0), mod, subject_id)
    return SubjectRecord(subject_id=subject_id, volumes=volumes,
                         label=_CLASS_IDS[phantom_class], seg_mask=seg)


def generate_phantom_cohort(n_subjects: int, lesion_fraction: float,
                            size: tuple[int, int, int], seed: int) -> list[SubjectRecord]:
    """n subjects with a deterministic class shuffle at the given fraction."""
    rng = np.random.default_rng(np.random.SeedSequence([23, int(seed)]))
    n_lesion = int(np.floor(lesion_fraction * n_subjects + 0.5))
    classes = np.array([LESION] * n_lesion + [HEALTHY] * (n_subjects - n_lesion))
    rng.shuffle(classes)
    return [generate_phantom(seed * 100000 + i, classes[i], size) for i in range(n_subjects)]


# ---------------------------------------------------------------------------
# dataset manifest

@dataclass
class ManifestEntry:
    subject: str
    t1: str | None = None
    t2: str | None = None
    flair: str | None = None
    label: int | None = None
    seg: str | None = None

    def path_for(self, modality: str) -> str | None:
        return {"T1": self.t1, "T2": self.t2, "FLAIR": self.flair}[modality]


@dataclass
class DatasetManifest:
    dataset_name: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.subject for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FormatError(f"duplicate subject ids in manifest {self.dataset_name!r}")

    def subject_ids(self) -> list[str]:
        return [e.subject for e in self.entries]

    def labels(self) -> dict[str, int | None]:
        return {e.subject: e.label for e in self.entries}


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {"dataset": manifest.dataset_name,
           "entries": [{"subject": e.subject, "t1": e.t1, "t2": e.t2,
                        "flair": e.flair, "label": e.label, "seg": e.seg}
                       for e in manifest.entries]}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_manifest(path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text())
    entries = [ManifestEntry(subject=e["subject"], t1=e.get("t1"), t2=e.get("t2"),
                             flair=e.get("flair"), label=e.get("label"), seg=e.get("seg"))
               for e in doc["entries"]]
    return DatasetManifest(dataset_name=doc["dataset"], entries=entries)


def load_subject(entry: ManifestEntry, base_dir) -> SubjectRecord:
    """Read every modality listed for one manifest entry."""
    base = Path(base_dir)
    volumes = {}
    for mod in MODALITIES:
        rel = entry.path_for(mod)
        if rel is not None:
            volumes[mod] = read_nifti_file(base / rel, subject_id=entry.subject, modality=mod)
    seg = None
    if entry.seg is not None:
        seg = np.rint(read_nifti_file(base / entry.seg).data).astype(np.int64)
    return SubjectRecord(subject_id=entry.subject, volumes=volumes,
                         label=entry.label, seg_mask=seg)


def write_phantom_corpus(out_dir, n_subjects: int, lesion_fraction: float,
                         size: tuple[int, int, int], seed: int) -> DatasetManifest:
    """Generate a phantom cohort on disk plus its manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in generate_phantom_cohort(n_subjects, lesion_fraction, size, seed):
        paths = {}
        for mod, vol in rec.volumes.items():
            rel = f"{rec.subject_id}_{mod}.nii"
            write_nifti_file(out / rel, vol)
            paths[mod] = rel
        seg_rel = f"{rec.subject_id}_seg.nii"
        write_nifti_file(out / seg_rel, Volume(rec.seg_mask.astype(np.float32),
                                               (1.0, 1.0, 1.0), "T1", rec.subject_id))
        entries.append(ManifestEntry(subject=rec.subject_id, t1=paths["T1"],
                                     t2=paths["T2"], flair=paths["FLAIR"],
                                     label=rec.label, seg=seg_rel))
    manifest = DatasetManifest(dataset_name=f"phantom-{n_subjects}-{seed}", entries=entries)
    save_manifest(out / "manifest.json", manifest)
    return manifest
