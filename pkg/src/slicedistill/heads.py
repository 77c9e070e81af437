"""Fine-tuning adapters over a pretrained (or random) backbone:
volume-level classification and slice-wise segmentation.

Volume predictions mean-pool the per-slice cls embeddings before the
linear head, so duplicated slices cannot change the output. Both
fine-tuners take the backbone initialization as data: an SSL-vs-random
comparison differs in nothing but those initial values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import vit as vit_mod
from ._interp import axis_weights, resize_nearest_array
from .augment import DownstreamAugConfig, derive_seed, downstream_augment
from .autodiff import Tensor
from .distill import adamw_step
from .errors import (DegenerateLabels, LeakageDetected, NoSlices, ShapeMismatch)
from .metrics import auroc, dice
from .slices import SliceConfig, SliceSample, extract_slices
from .vit import ViTConfig, ViTParams
from .volume_io import SubjectRecord, Volume


@dataclass
class ClassifierHead:
    weight: np.ndarray                      # (embed_dim, n_classes)
    bias: np.ndarray                        # (n_classes,)
    pooling: str = "mean_cls"

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]


@dataclass
class SegDecoder:
    weight: np.ndarray                      # (embed_dim, n_seg_classes)
    bias: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]


def init_classifier(vit_cfg: ViTConfig, n_classes: int, rng: np.random.Generator) -> ClassifierHead:
    if n_classes < 2:
        raise DegenerateLabels(f"n_classes {n_classes} < 2")
    return ClassifierHead(weight=rng.normal(0, 0.01, (vit_cfg.embed_dim, n_classes)).astype(np.float32),
                          bias=np.zeros(n_classes, dtype=np.float32))


def init_seg_decoder(vit_cfg: ViTConfig, n_seg_classes: int, rng: np.random.Generator) -> SegDecoder:
    return SegDecoder(weight=rng.normal(0, 0.01, (vit_cfg.embed_dim, n_seg_classes)).astype(np.float32),
                      bias=np.zeros(n_seg_classes, dtype=np.float32))


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    batch_subjects: int = 8             # classification batches are whole volumes
    batch_slices: int = 16              # segmentation batches are slices
    steps: int = 300
    eval_every: int = 25
    patience: int = 4
    frozen_backbone: bool = False
    augment: bool = True


# ---------------------------------------------------------------------------
# classification

def _cls_embeddings(pixel_batch: np.ndarray, params: dict[str, Tensor],
                    cfg: ViTConfig) -> Tensor:
    cls, _ = vit_mod.forward_views(pixel_batch, params, cfg)
    return cls


def classify_volume(subject: SubjectRecord, params: ViTParams, vit_cfg: ViTConfig,
                    head: ClassifierHead, slice_cfg: SliceConfig) -> np.ndarray:
    """Softmax class probabilities for one subject: sampled slices ->
    cls embeddings -> mean pool -> linear."""
    samples = extract_slices(subject, slice_cfg)
    if not samples:
        raise NoSlices(f"subject {subject.subject_id} produced no slices")
    batch = np.stack([s.pixels for s in samples])
    wrapped = vit_mod.wrap_params(params, requires_grad=False)
    emb = _cls_embeddings(batch, wrapped, vit_cfg).data      # (S, D)
    pooled = emb.mean(axis=0)
    logits = pooled @ head.weight + head.bias
    z = logits - logits.max()
    e = np.exp(z)
    return (e / e.sum()).astype(np.float32)


@dataclass
class FinetuneResult:
    params: ViTParams
    head_weight: np.ndarray
    head_bias: np.ndarray
    best_step: int
    val_trace: list[tuple[int, float]]
    stopped_early: bool

    def classifier(self) -> ClassifierHead:
        return ClassifierHead(weight=self.head_weight, bias=self.head_bias)

    def seg_decoder(self) -> SegDecoder:
        return SegDecoder(weight=self.head_weight, bias=self.head_bias)


def _check_disjoint(train_ids, val_ids, test_ids) -> None:
    train, val, test = set(train_ids), set(val_ids), set(test_ids or ())
    for a, b, what in ((train, val, "train/val"), (train, test, "train/test"),
                       (val, test, "val/test")):
        overlap = a & b
        if overlap:
            raise LeakageDetected(f"{what} overlap: {sorted(overlap)[:5]}")


def finetune_classifier(train_subjects: list[SubjectRecord],
                        val_subjects: list[SubjectRecord],
                        init_params: ViTParams, vit_cfg: ViTConfig,
                        slice_cfg: SliceConfig, cfg: FinetuneConfig, seed: int,
                        test_ids: set[str] | frozenset[str] = frozenset(),
                        ) -> FinetuneResult:
    """Cross-entropy fine-tuning with early stopping on validation AUROC.

    Training mirrors inference exactly: each batch element is a whole
    subject whose sampled slice embeddings are mean-pooled before the
    linear head (per-slice labels would be noisy, since focal disease
    leaves most slices of a positive volume unremarkable). Returns the
    best-validation snapshot.
    """
    _check_disjoint([s.subject_id for s in train_subjects],
                    [s.subject_id for s in val_subjects], test_ids)
    labels = sorted({s.label for s in train_subjects})
    if len(labels) < 2:
        raise DegenerateLabels(f"train set has labels {labels}")
    n_classes = max(labels) + 1

    rng = np.random.default_rng(np.random.SeedSequence([41, seed]))
    head = init_classifier(vit_cfg, n_classes, rng)
    model: dict[str, np.ndarray] = {f"backbone.{k}": v.copy() for k, v in init_params.items()}
    model["cls_head.w"] = head.weight
    model["cls_head.b"] = head.bias

    pool = [(rec.subject_id, int(rec.label), extract_slices(rec, slice_cfg))
            for rec in train_subjects]
    aug_cfg = DownstreamAugConfig()

    def evaluate(m: dict[str, np.ndarray]) -> float:
        backbone = {k[len("backbone."):]: v for k, v in m.items() if k.startswith("backbone.")}
        hd = ClassifierHead(weight=m["cls_head.w"], bias=m["cls_head.b"])
        scores, ys = [], []
        for rec in val_subjects:
            probs = classify_volume(rec, backbone, vit_cfg, hd, slice_cfg)
            scores.append(float(probs[1] if n_classes == 2 else probs.argmax()))
            ys.append(int(rec.label))
        return auroc(scores, ys)

    def loss_fn(batch, params, vcfg, step):
        return _classifier_volume_loss(batch, params, vcfg, step, seed,
                                       aug_cfg if cfg.augment else None)

    return _finetune_loop(model, pool, cfg.batch_subjects, cfg, vit_cfg, seed,
                          evaluate, head_keys=("cls_head.w", "cls_head.b"),
                          loss_fn=loss_fn)


def _classifier_volume_loss(batch, params: dict[str, Tensor], vit_cfg: ViTConfig,
                            step: int, seed: int, aug_cfg) -> Tensor:
    """CE over mean-pooled per-subject slice embeddings.

    batch: (subject_id, label, slices) triples; every subject must
    contribute the same slice count for the pooled reshape.
    """
    views, targets = [], []
    counts = {len(slices) for _, _, slices in batch}
    if len(counts) != 1:
        raise ShapeMismatch(f"subjects with differing slice counts in one batch: {counts}")
    n_slices = counts.pop()
    for pos, (sid, label, samples) in enumerate(batch):
        targets.append(label)
        for s in samples:
            if aug_cfg is not None:
                s_rng = np.random.default_rng(
                    derive_seed(seed, step, sid, s.slice_index, pos))
                s = downstream_augment(s, aug_cfg, s_rng)
            views.append(s.pixels)
    pixels = np.stack(views)                                    # (B*S, side, side, 3)
    backbone = {k[len("backbone."):]: v for k, v in params.items() if k.startswith("backbone.")}
    cls = _cls_embeddings(pixels, backbone, vit_cfg)
    pooled = cls.reshape(len(batch), n_slices, vit_cfg.embed_dim).mean(axis=1)
    logits = ad.add(ad.matmul(pooled, params["cls_head.w"]), params["cls_head.b"])
    return ad.cross_entropy_with_logits(logits, np.array(targets, dtype=np.int64))


def _finetune_loop(model: dict[str, np.ndarray], pool: list, batch_size: int,
                   cfg: FinetuneConfig, vit_cfg: ViTConfig, seed: int,
                   evaluate, head_keys: tuple[str, ...], loss_fn) -> FinetuneResult:
    if not pool:
        raise NoSlices("empty training pool")
    opt_m = {k: np.zeros_like(v) for k, v in model.items()}
    opt_v = {k: np.zeros_like(v) for k, v in model.items()}

    best_metric = -np.inf
    best_snapshot = {k: v.copy() for k, v in model.items()}
    best_step = 0
    evals_since_best = 0
    val_trace: list[tuple[int, float]] = []
    stopped = False

    for step in range(cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence([43, seed, step]))
        idx = rng.integers(0, len(pool), size=batch_size)
        batch = [pool[i] for i in idx]

        if cfg.frozen_backbone:
            trainable = {k: model[k] for k in head_keys}
        else:
            # the SSL projection head is replaced by the task head and
            # never appears in the downstream graph
            trainable = {k: v for k, v in model.items()
                         if not k.startswith("backbone.head.")}
        wrapped = {k: Tensor(v, requires_grad=(k in trainable)) for k, v in model.items()}
        loss = loss_fn(batch, wrapped, vit_cfg, step)
        ad.backward(loss)
        grads = {k: wrapped[k].grad for k in trainable}
        adamw_step(trainable, grads, {k: opt_m[k] for k in trainable},
                   {k: opt_v[k] for k in trainable}, cfg.lr, cfg, step + 1)

        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            metric = evaluate(model)
            val_trace.append((step + 1, metric))
            if metric > best_metric:
                best_metric = metric
                best_snapshot = {k: v.copy() for k, v in model.items()}
                best_step = step + 1
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= cfg.patience:
                    stopped = True
                    break

    backbone = {k[len("backbone."):]: v for k, v in best_snapshot.items()
                if k.startswith("backbone.")}
    return FinetuneResult(params=backbone,
                          head_weight=best_snapshot[head_keys[0]],
                          head_bias=best_snapshot[head_keys[1]],
                          best_step=best_step, val_trace=val_trace,
                          stopped_early=stopped)


# ---------------------------------------------------------------------------
# segmentation

def _seg_probs_graph(pixels: np.ndarray, params: dict[str, Tensor],
                     vit_cfg: ViTConfig, w_key: str, b_key: str) -> Tensor:
    """(B, S, S, 3) -> per-pixel class probabilities (B, S, S, C)."""
    side = pixels.shape[1]
    backbone = {k[len("backbone."):]: v for k, v in params.items() if k.startswith("backbone.")}
    _, patches = vit_mod.forward_views(pixels, backbone, vit_cfg)   # (B, N, D)
    logits = ad.add(ad.matmul(patches, params[w_key]), params[b_key])
    b = pixels.shape[0]
    g = side // vit_cfg.patch_size
    c = params[w_key].shape[1]
    grid = logits.reshape(b, g, g, c)
    up_cols = Tensor(axis_weights(g, side).T.copy())                # (g, side)
    x = grid.transpose((0, 3, 1, 2))                                # (B, C, gy, gx)
    x = ad.matmul(x, up_cols)                                       # (B, C, gy, side)
    x = x.transpose((0, 1, 3, 2))                                   # (B, C, side, gy)
    x = ad.matmul(x, up_cols)                                       # (B, C, side, side) over rows
    x = x.transpose((0, 3, 2, 1))                                   # (B, side(y), side(x), C)
    return ad.softmax(x)


def segment_slice(sample: SliceSample, params: ViTParams, vit_cfg: ViTConfig,
                  decoder: SegDecoder) -> np.ndarray:
    """Per-pixel class probabilities (H', W', n_seg_classes)."""
    side = sample.pixels.shape[0]
    if side % vit_cfg.patch_size != 0:
        raise ShapeMismatch(f"side {side} not divisible by patch {vit_cfg.patch_size}")
    wrapped = {f"backbone.{k}": Tensor(v) for k, v in params.items()}
    wrapped["seg_head.w"] = Tensor(decoder.weight)
    wrapped["seg_head.b"] = Tensor(decoder.bias)
    probs = _seg_probs_graph(sample.pixels[None], wrapped, vit_cfg,
                             "seg_head.w", "seg_head.b")
    return probs.data[0]


def seg_loss(pred_probs: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """0.5 * CE + 0.5 * (1 - soft Dice averaged over classes).

    pred_probs: (..., C) probabilities; target: integer mask of the
    leading shape.
    """
    t = np.asarray(target, dtype=np.int64)
    if pred_probs.shape[:-1] != t.shape:
        raise ShapeMismatch(f"seg_loss: {pred_probs.shape} vs target {t.shape}")
    c = pred_probs.shape[-1]
    onehot = np.zeros(t.shape + (c,), dtype=np.float32)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    oh = Tensor(onehot)

    p_true = ad.mul(pred_probs, oh).sum(axis=-1)
    ce = ad.mul_scalar(ad.log(p_true).mean(), -1.0)

    axes = tuple(range(t.ndim))
    inter = ad.mul(pred_probs, oh).sum(axis=axes)                  # (C,)
    p_sum = pred_probs.sum(axis=axes)
    t_sum = onehot.reshape(-1, c).sum(axis=0)
    num = ad.add_scalar(ad.mul_scalar(inter, 2.0), eps)
    den = ad.add_scalar(ad.add(p_sum, Tensor(t_sum)), eps)
    dice_mean = ad.div(num, den).mean()
    return ad.add(ad.mul_scalar(ce, 0.5),
                  ad.mul_scalar(ad.add_scalar(ad.mul_scalar(dice_mean, -1.0), 1.0), 0.5))


def finetune_segmenter(train_subjects: list[SubjectRecord],
                       val_subjects: list[SubjectRecord],
                       init_params: ViTParams, vit_cfg: ViTConfig,
                       slice_cfg: SliceConfig, cfg: FinetuneConfig, seed: int,
                       n_seg_classes: int,
                       test_ids: set[str] | frozenset[str] = frozenset(),
                       ) -> FinetuneResult:
    """Dice+CE fine-tuning of a per-patch linear decoder (plus backbone
    unless frozen); early stopping on mean foreground Dice over the
    validation slices."""
    _check_disjoint([s.subject_id for s in train_subjects],
                    [s.subject_id for s in val_subjects], test_ids)
    rng = np.random.default_rng(np.random.SeedSequence([47, seed]))
    decoder = init_seg_decoder(vit_cfg, n_seg_classes, rng)
    model: dict[str, np.ndarray] = {f"backbone.{k}": v.copy() for k, v in init_params.items()}
    model["seg_head.w"] = decoder.weight
    model["seg_head.b"] = decoder.bias

    pool = [s for rec in train_subjects for s in extract_slices(rec, slice_cfg)
            if s.seg_slice is not None]
    val_slices = [s for rec in val_subjects for s in extract_slices(rec, slice_cfg)
                  if s.seg_slice is not None]
    aug_cfg = DownstreamAugConfig(noise_sigma=0.01)

    def evaluate(m: dict[str, np.ndarray]) -> float:
        backbone = {k[len("backbone."):]: v for k, v in m.items() if k.startswith("backbone.")}
        dec = SegDecoder(weight=m["seg_head.w"], bias=m["seg_head.b"])
        scores = []
        for s in val_slices:
            pred = segment_slice(s, backbone, vit_cfg, dec).argmax(axis=-1)
            per_class = [dice(pred, s.seg_slice, c) for c in range(1, n_seg_classes)
                         if (s.seg_slice == c).any() or (pred == c).any()]
            if per_class:
                scores.append(float(np.mean(per_class)))
        return float(np.mean(scores)) if scores else 0.0

    def loss_fn(batch, params, vcfg, step):
        samples = []
        for pos, s in enumerate(batch):
            if cfg.augment:
                s_rng = np.random.default_rng(
                    derive_seed(seed, step, s.subject_id, s.slice_index, pos))
                s = downstream_augment(s, aug_cfg, s_rng)
            samples.append(s)
        pixels = np.stack([s.pixels for s in samples])
        target = np.stack([s.seg_slice for s in samples])
        probs = _seg_probs_graph(pixels, params, vcfg, "seg_head.w", "seg_head.b")
        return seg_loss(probs, target)

    return _finetune_loop(model, pool, cfg.batch_slices, cfg, vit_cfg, seed,
                          evaluate, head_keys=("seg_head.w", "seg_head.b"),
                          loss_fn=loss_fn)


def predict_volume_segmentation(subject: SubjectRecord, params: ViTParams,
                                vit_cfg: ViTConfig, decoder: SegDecoder,
                                slice_cfg: SliceConfig) -> Volume:
    """Segment every axial slice and re-assemble a label volume at the
    subject's native resolution (suitable for write_nifti)."""
    h, w, d = subject.shape
    full_cfg = SliceConfig(num_slices=d, target_side=slice_cfg.target_side,
                           normalization=slice_cfg.normalization)
    out = np.zeros((h, w, d), dtype=np.float32)
    for s in extract_slices(subject, full_cfg):
        probs = segment_slice(s, params, vit_cfg, decoder)
        labels = probs.argmax(axis=-1).astype(np.int64)
        out[:, :, s.slice_index] = resize_nearest_array(labels, h, w).astype(np.float32)
    ref = next(iter(subject.volumes.values()))
    return Volume(out, ref.spacing, ref.modality, subject.subject_id)


def dump_predictions(path, predictions: dict[str, np.ndarray]) -> None:
    """subject_id -> class probabilities, as JSON."""
    doc = {k: [float(x) for x in np.asarray(v).ravel()] for k, v in predictions.items()}
    Path(path).write_text(json.dumps(doc, indent=2))
