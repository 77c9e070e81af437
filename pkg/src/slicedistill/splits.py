"""Leakage-safe subject splits: held-out test set, stratified folds,
and the runtime audit.

Test size uses round-half-up on the test fraction, which is the only
rounding that reproduces every published per-dataset test count this
protocol was checked against. Fold assignment deals each class's
shuffled subjects through a single rotating pointer, so fold sizes
differ by at most one while per-class counts stay balanced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LeakageDetected, TooFewSubjects

DEFAULT_TEST_FRACTION = 0.15
DEFAULT_FOLDS = 5


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class SplitManifest:
    dataset_name: str
    seed: int
    test_ids: list[str]
    folds: list[list[str]]
    ssl_ids: list[str]
    test_fraction: float = DEFAULT_TEST_FRACTION

    @property
    def n_subjects(self) -> int:
        return len(self.test_ids) + sum(len(f) for f in self.folds)

    def train_ids_for_fold(self, fold: int) -> list[str]:
        return sorted(sid for i, f in enumerate(self.folds) if i != fold for sid in f)

    def val_ids_for_fold(self, fold: int) -> list[str]:
        return sorted(self.folds[fold])


def make_splits(subjects: list[tuple[str, int | None]], seed: int,
                test_fraction: float = DEFAULT_TEST_FRACTION,
                n_folds: int = DEFAULT_FOLDS,
                dataset_name: str = "") -> SplitManifest:
    """Deterministic stratified split into held-out test + n folds.

    subjects: (subject_id, label) pairs; labels of None form their own
    stratum. Test membership is allocated per class by largest
    remainder so the total is exactly round_half_up(fraction * N).
    """
    n = len(subjects)
    if n < 10:
        raise TooFewSubjects(f"{n} subjects, need at least 10")
    by_class: dict[int, list[str]] = {}
    for sid, label in subjects:
        by_class.setdefault(-1 if label is None else int(label), []).append(sid)
    for label, sids in by_class.items():
        if len(sids) < 2:
            raise TooFewSubjects(f"class {label} has {len(sids)} subjects, need >= 2")
        if len(set(sids)) != len(sids):
            raise ValueError(f"duplicate subject ids in class {label}")

    rng = np.random.default_rng(np.random.SeedSequence([53, int(seed)]))
    classes = sorted(by_class)
    shuffled: dict[int, list[str]] = {}
    for c in classes:
        ids = sorted(by_class[c])
        rng.shuffle(ids)
        shuffled[c] = ids

    n_test = round_half_up(test_fraction * n)
    exact = {c: n_test * len(shuffled[c]) / n for c in classes}
    quota = {c: int(np.floor(exact[c])) for c in classes}
    for c in sorted(classes, key=lambda c: (exact[c] - quota[c], -len(shuffled[c])),
                    reverse=True):
        if sum(quota.values()) == n_test:
            break
        quota[c] += 1

    test_ids: list[str] = []
    pool: dict[int, list[str]] = {}
    for c in classes:
        test_ids += shuffled[c][:quota[c]]
        pool[c] = shuffled[c][quota[c]:]

    folds: list[list[str]] = [[] for _ in range(n_folds)]
    ptr = 0
    for c in classes:
        for sid in pool[c]:
            folds[ptr % n_folds].append(sid)
            ptr += 1

    manifest = SplitManifest(dataset_name=dataset_name, seed=int(seed),
                             test_ids=sorted(test_ids),
                             folds=[sorted(f) for f in folds],
                             ssl_ids=sorted(sid for f in folds for sid in f),
                             test_fraction=test_fraction)
    labels = {sid: lab for sid, lab in subjects}
    violations = audit_split_manifest(manifest, labels)
    if violations:
        raise LeakageDetected("; ".join(violations))
    return manifest


def audit_split_manifest(manifest: SplitManifest,
                         labels: dict[str, int | None] | None = None) -> list[str]:
    """Re-verify every invariant; returns human-readable violations."""
    out: list[str] = []
    test = set(manifest.test_ids)
    fold_sets = [set(f) for f in manifest.folds]
    for i, f in enumerate(fold_sets):
        if f & test:
            out.append(f"fold {i} overlaps the held-out test set")
        for j in range(i + 1, len(fold_sets)):
            if f & fold_sets[j]:
                out.append(f"folds {i} and {j} overlap")
    ssl = set(manifest.ssl_ids)
    if ssl & test:
        out.append("ssl ids overlap the held-out test set")
    n = manifest.n_subjects
    want = round_half_up(manifest.test_fraction * n)
    if len(test) != want:
        out.append(f"test size {len(test)} != round_half_up({manifest.test_fraction}*{n}) = {want}")
    sizes = [len(f) for f in manifest.folds]
    if sizes and max(sizes) - min(sizes) > 1:
        out.append(f"fold sizes {sizes} differ by more than 1")
    if labels is not None:
        pool_n = sum(sizes)
        pool_ids = [sid for f in manifest.folds for sid in f]
        classes = sorted({-1 if labels.get(s) is None else int(labels[s]) for s in pool_ids})
        for c in classes:
            n_c = sum(1 for s in pool_ids
                      if (-1 if labels.get(s) is None else int(labels[s])) == c)
            for i, f in enumerate(manifest.folds):
                count = sum(1 for s in f
                            if (-1 if labels.get(s) is None else int(labels[s])) == c)
                expected = len(f) * n_c / pool_n if pool_n else 0.0
                if abs(count - expected) > 1 + 1e-9:
                    out.append(f"fold {i} class {c}: {count} vs expected {expected:.2f}")
    return out


def assert_no_leakage(train_ids, eval_ids, context: str = "train/eval") -> None:
    overlap = set(train_ids) & set(eval_ids)
    if overlap:
        raise LeakageDetected(f"{context} overlap: {sorted(overlap)[:5]}")


def save_split_manifest(path, manifest: SplitManifest) -> None:
    doc = {"dataset": manifest.dataset_name, "seed": manifest.seed,
           "test_fraction": manifest.test_fraction, "test": manifest.test_ids,
           "folds": manifest.folds, "ssl": manifest.ssl_ids}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_split_manifest(path) -> SplitManifest:
    doc = json.loads(Path(path).read_text())
    return SplitManifest(dataset_name=doc["dataset"], seed=doc["seed"],
                         test_ids=list(doc["test"]),
                         folds=[list(f) for f in doc["folds"]],
                         ssl_ids=list(doc["ssl"]),
                         test_fraction=doc.get("test_fraction", DEFAULT_TEST_FRACTION))
