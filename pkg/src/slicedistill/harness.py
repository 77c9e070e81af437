"""Experiment orchestration: fold-wise fine-tuning with held-out-test
evaluation, nested few-shot subsampling, and cross-dataset transfer.

Every runner re-verifies the leakage invariants (ssl/test and
train/test disjointness) before touching model state; a violated
manifest aborts the run rather than producing a number.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import EmptyClassAtFraction, LeakageDetected
from .heads import (ClassifierHead, FinetuneConfig, FinetuneResult,
                    classify_volume, finetune_classifier, finetune_segmenter,
                    segment_slice)
from .metrics import MetricReport, auroc, dice, fold_ttest, hd95
from .slices import SliceConfig, extract_slices
from .splits import SplitManifest, assert_no_leakage, audit_split_manifest
from .vit import ViTConfig, ViTParams
from .volume_io import SubjectRecord


def params_digest(params: ViTParams) -> str:
    """Order-independent content hash; lets callers prove evaluation
    never mutated a model."""
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# few-shot subsampling

def stratified_fraction_subsets(subjects: list[tuple[str, int | None]],
                                fractions, seed: int) -> dict[float, list[str]]:
    """Nested stratified subsets: each class is shuffled once and every
    fraction takes a prefix, so smaller fractions are strict subsets of
    larger ones. Per-class counts use round-half-up of fraction * n_c.
    """
    fractions = sorted(float(f) for f in fractions)
    rng = np.random.default_rng(np.random.SeedSequence([59, int(seed)]))
    by_class: dict[int, list[str]] = {}
    for sid, label in subjects:
        by_class.setdefault(-1 if label is None else int(label), []).append(sid)
    order: dict[int, list[str]] = {}
    for c in sorted(by_class):
        ids = sorted(by_class[c])
        rng.shuffle(ids)
        order[c] = ids
    out: dict[float, list[str]] = {}
    for f in fractions:
        chosen: list[str] = []
        for c in sorted(order):
            k = int(np.floor(f * len(order[c]) + 0.5))
            if k == 0:
                raise EmptyClassAtFraction(f"class {c} empty at fraction {f}")
            chosen += order[c][:k]
        out[f] = sorted(chosen)
    return out


def few_shot_curve(train_subjects: list[tuple[str, int | None]], fractions,
                   pipeline, seed: int) -> dict[float, float]:
    """Run `pipeline(subject_ids)` once per fraction over nested
    stratified subsets; fraction 1.0 receives the full (sorted) fold."""
    subsets = stratified_fraction_subsets(train_subjects, fractions, seed)
    prev: set[str] = set()
    for f in sorted(subsets):
        cur = set(subsets[f])
        if not prev <= cur:
            raise EmptyClassAtFraction(f"subset chain broken at fraction {f}")
        prev = cur
    return {f: pipeline(subsets[f]) for f in sorted(subsets)}


# ---------------------------------------------------------------------------
# classification experiments

def evaluate_classification(params: ViTParams, vit_cfg: ViTConfig,
                            head: ClassifierHead, slice_cfg: SliceConfig,
                            subjects: list[SubjectRecord]) -> tuple[list[float], list[int]]:
    """Positive-class scores and labels over a subject list (pure)."""
    scores, ys = [], []
    for rec in subjects:
        probs = classify_volume(rec, params, vit_cfg, head, slice_cfg)
        scores.append(float(probs[1]))
        ys.append(int(rec.label))
    return scores, ys


@dataclass
class FoldOutcome:
    fold: int
    result: FinetuneResult
    test_scores: list[float]
    test_labels: list[int]
    test_auroc: float


def run_classification_fold(subjects: dict[str, SubjectRecord],
                            manifest: SplitManifest, fold: int,
                            init_params: ViTParams, vit_cfg: ViTConfig,
                            slice_cfg: SliceConfig, ft_cfg: FinetuneConfig,
                            seed: int,
                            train_ids: list[str] | None = None) -> FoldOutcome:
    """Fine-tune on one fold's training split, report test AUROC.

    `train_ids` restricts the fold's training subjects (few-shot); the
    validation split and held-out test set stay fixed.
    """
    violations = audit_split_manifest(manifest)
    if violations:
        raise LeakageDetected("; ".join(violations))
    test = set(manifest.test_ids)
    tr_ids = sorted(train_ids) if train_ids is not None else manifest.train_ids_for_fold(fold)
    val_ids = manifest.val_ids_for_fold(fold)
    assert_no_leakage(tr_ids, test, "train/test")
    assert_no_leakage(val_ids, test, "val/test")

    result = finetune_classifier([subjects[s] for s in tr_ids],
                                 [subjects[s] for s in val_ids],
                                 init_params, vit_cfg, slice_cfg, ft_cfg,
                                 seed=seed, test_ids=test)
    test_subjects = [subjects[s] for s in sorted(test)]
    scores, ys = evaluate_classification(result.params, vit_cfg, result.classifier(),
                                         slice_cfg, test_subjects)
    return FoldOutcome(fold=fold, result=result, test_scores=scores,
                       test_labels=ys, test_auroc=auroc(scores, ys))


def classification_experiment(subjects: dict[str, SubjectRecord],
                              manifest: SplitManifest, init_params: ViTParams,
                              vit_cfg: ViTConfig, slice_cfg: SliceConfig,
                              ft_cfg: FinetuneConfig, seed: int,
                              folds: list[int] | None = None,
                              ) -> tuple[MetricReport, list[FoldOutcome]]:
    """One model per fold, all evaluated on the same held-out test set;
    fold spread therefore reflects training stochasticity."""
    folds = folds if folds is not None else list(range(len(manifest.folds)))
    outcomes = [run_classification_fold(subjects, manifest, k, init_params,
                                        vit_cfg, slice_cfg, ft_cfg,
                                        seed=seed * 1000 + k)
                for k in folds]
    report = MetricReport.from_folds("auroc", [o.test_auroc for o in outcomes])
    return report, outcomes


def compare_arms(report_a: MetricReport, report_b: MetricReport) -> float:
    return fold_ttest(report_a.per_fold, report_b.per_fold)


def cross_dataset_eval(fold_models: list[tuple[ViTParams, ClassifierHead]],
                       vit_cfg: ViTConfig, slice_cfg: SliceConfig,
                       subjects_b: list[SubjectRecord],
                       train_ids_a) -> MetricReport:
    """Pure inference of A-trained fold models on dataset B."""
    assert_no_leakage(train_ids_a, [s.subject_id for s in subjects_b],
                      "A-train/B-eval")
    values = []
    for params, head in fold_models:
        digest = params_digest(params)
        scores, ys = evaluate_classification(params, vit_cfg, head, slice_cfg, subjects_b)
        if params_digest(params) != digest:
            raise LeakageDetected("model parameters changed during evaluation")
        values.append(auroc(scores, ys))
    return MetricReport.from_folds("auroc", values)


# ---------------------------------------------------------------------------
# segmentation experiments

def evaluate_segmentation(params: ViTParams, vit_cfg: ViTConfig, decoder,
                          slice_cfg: SliceConfig, subjects: list[SubjectRecord],
                          classes: list[int]) -> dict[str, float]:
    """Mean Dice and HD95 over the given classes across all evaluated
    slices of the subjects (per-slice evaluation)."""
    dices, hds = [], []
    for rec in subjects:
        for s in extract_slices(rec, slice_cfg):
            if s.seg_slice is None:
                continue
            pred = segment_slice(s, params, vit_cfg, decoder).argmax(axis=-1)
            for c in classes:
                has_any = (s.seg_slice == c).any() or (pred == c).any()
                if not has_any:
                    continue
                dices.append(dice(pred, s.seg_slice, c))
                if (s.seg_slice == c).any() and (pred == c).any():
                    hds.append(hd95(pred == c, s.seg_slice == c))
    return {"dice": float(np.mean(dices)) if dices else 0.0,
            "hd95": float(np.mean(hds)) if hds else float("inf")}


def run_segmentation_fold(subjects: dict[str, SubjectRecord],
                          manifest: SplitManifest, fold: int,
                          init_params: ViTParams, vit_cfg: ViTConfig,
                          slice_cfg: SliceConfig, ft_cfg: FinetuneConfig,
                          seed: int, n_seg_classes: int,
                          eval_classes: list[int]) -> tuple[FinetuneResult, dict[str, float]]:
    violations = audit_split_manifest(manifest)
    if violations:
        raise LeakageDetected("; ".join(violations))
    test = set(manifest.test_ids)
    tr_ids = manifest.train_ids_for_fold(fold)
    val_ids = manifest.val_ids_for_fold(fold)
    assert_no_leakage(tr_ids, test, "train/test")
    result = finetune_segmenter([subjects[s] for s in tr_ids],
                                [subjects[s] for s in val_ids],
                                init_params, vit_cfg, slice_cfg, ft_cfg,
                                seed=seed, n_seg_classes=n_seg_classes,
                                test_ids=test)
    metrics = evaluate_segmentation(result.params, vit_cfg, result.seg_decoder(),
                                    slice_cfg, [subjects[s] for s in sorted(test)],
                                    eval_classes)
    return result, metrics
