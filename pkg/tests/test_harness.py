import numpy as np
import pytest

from slicedistill import harness, heads
from slicedistill import slices as sl
from slicedistill import splits as sp
from slicedistill import vit
from slicedistill import volume_io as vio
from slicedistill.errors import EmptyClassAtFraction, LeakageDetected


@pytest.fixture(scope="module")
def world():
    cfg = vit.ViTConfig.desk_scale()
    params = vit.init_vit_params(cfg, np.random.default_rng(31))
    subjects = {r.subject_id: r
                for r in (vio.generate_phantom(i, "lesion" if i % 2 else "healthy",
                                               (24, 24, 20)) for i in range(24))}
    manifest = sp.make_splits([(sid, rec.label) for sid, rec in subjects.items()],
                              seed=2, dataset_name="toy")
    slice_cfg = sl.SliceConfig(num_slices=4, target_side=96)
    return cfg, params, subjects, manifest, slice_cfg


def test_fraction_subsets_are_nested_and_stratified():
    subjects = [(f"s{i:03d}", i % 2) for i in range(40)]
    subsets = harness.stratified_fraction_subsets(subjects, [0.1, 0.2, 0.5, 1.0], seed=3)
    assert set(subsets[0.1]) < set(subsets[0.2]) < set(subsets[0.5]) < set(subsets[1.0])
    assert len(subsets[1.0]) == 40
    labels = dict(subjects)
    for f, ids in subsets.items():
        ones = sum(labels[s] for s in ids)
        assert abs(ones - f * 20) <= 1
        assert abs((len(ids) - ones) - f * 20) <= 1


def test_fraction_subsets_deterministic():
    subjects = [(f"s{i:03d}", i % 2) for i in range(30)]
    a = harness.stratified_fraction_subsets(subjects, [0.2, 1.0], seed=5)
    b = harness.stratified_fraction_subsets(subjects, [0.2, 1.0], seed=5)
    assert a == b


def test_fraction_empty_class_raises():
    subjects = [(f"s{i:03d}", i % 2) for i in range(10)]
    with pytest.raises(EmptyClassAtFraction):
        harness.stratified_fraction_subsets(subjects, [0.01], seed=1)


def test_few_shot_full_fraction_gets_sorted_fold():
    subjects = [(f"s{i:03d}", i % 2) for i in range(20)]
    seen = {}

    def pipeline(ids):
        seen[len(ids)] = list(ids)
        return float(len(ids))

    curve = harness.few_shot_curve(subjects, [0.5, 1.0], pipeline, seed=1)
    assert curve == {0.5: 10.0, 1.0: 20.0}
    assert seen[20] == sorted(s for s, _ in subjects)
    assert seen[10] == sorted(seen[10])


def test_classification_fold_runs_and_audits(world):
    cfg, params, subjects, manifest, slice_cfg = world
    ft = heads.FinetuneConfig(steps=4, eval_every=2, batch_slices=4, augment=False)
    outcome = harness.run_classification_fold(subjects, manifest, 0, params, cfg,
                                              slice_cfg, ft, seed=1)
    assert 0.0 <= outcome.test_auroc <= 1.0
    assert len(outcome.test_scores) == len(manifest.test_ids)
    assert sorted({0, 1}) == sorted(set(outcome.test_labels))


def test_classification_fold_rejects_corrupt_manifest(world):
    cfg, params, subjects, manifest, slice_cfg = world
    bad = sp.SplitManifest(manifest.dataset_name, manifest.seed, manifest.test_ids,
                           manifest.folds, manifest.ssl_ids + [manifest.test_ids[0]])
    ft = heads.FinetuneConfig(steps=2, eval_every=1)
    with pytest.raises(LeakageDetected):
        harness.run_classification_fold(subjects, bad, 0, params, cfg,
                                        slice_cfg, ft, seed=1)


def test_experiment_aggregates_folds(world):
    cfg, params, subjects, manifest, slice_cfg = world
    ft = heads.FinetuneConfig(steps=2, eval_every=2, batch_slices=4, augment=False)
    report, outcomes = harness.classification_experiment(subjects, manifest, params,
                                                         cfg, slice_cfg, ft, seed=3,
                                                         folds=[0, 1])
    assert len(report.per_fold) == 2
    assert report.metric == "auroc"
    assert [o.fold for o in outcomes] == [0, 1]


def test_few_shot_fraction_one_matches_direct_run(world):
    cfg, params, subjects, manifest, slice_cfg = world
    ft = heads.FinetuneConfig(steps=3, eval_every=3, batch_slices=4, augment=False)
    fold_train = [(sid, subjects[sid].label) for sid in manifest.train_ids_for_fold(0)]

    def pipeline(ids):
        return harness.run_classification_fold(subjects, manifest, 0, params, cfg,
                                               slice_cfg, ft, seed=9,
                                               train_ids=ids).test_auroc

    curve = harness.few_shot_curve(fold_train, [1.0], pipeline, seed=9)
    direct = harness.run_classification_fold(subjects, manifest, 0, params, cfg,
                                             slice_cfg, ft, seed=9).test_auroc
    assert curve[1.0] == direct


def test_cross_dataset_eval_pure_and_leak_checked(world):
    cfg, params, subjects, manifest, slice_cfg = world
    head = heads.init_classifier(cfg, 2, np.random.default_rng(1))
    external = [vio.generate_phantom(1000 + i, "lesion" if i % 2 else "healthy",
                                     (24, 24, 20)) for i in range(8)]
    digest = harness.params_digest(params)
    report = harness.cross_dataset_eval([(params, head)], cfg, slice_cfg, external,
                                        train_ids_a=set(manifest.ssl_ids))
    assert harness.params_digest(params) == digest
    assert len(report.per_fold) == 1
    with pytest.raises(LeakageDetected):
        harness.cross_dataset_eval([(params, head)], cfg, slice_cfg, external,
                                   train_ids_a={external[0].subject_id})


def test_cross_dataset_reduces_to_standard_eval_on_own_test(world):
    cfg, params, subjects, manifest, slice_cfg = world
    head = heads.init_classifier(cfg, 2, np.random.default_rng(1))
    test_subjects = [subjects[s] for s in sorted(manifest.test_ids)]
    scores, ys = harness.evaluate_classification(params, cfg, head, slice_cfg,
                                                 test_subjects)
    from slicedistill.metrics import auroc
    standard = auroc(scores, ys)
    report = harness.cross_dataset_eval([(params, head)], cfg, slice_cfg,
                                        test_subjects,
                                        train_ids_a=set(manifest.ssl_ids))
    assert report.per_fold[0] == standard


def test_params_digest_sensitivity(world):
    cfg, params, *_ = world
    d1 = harness.params_digest(params)
    mutated = vit.copy_params(params)
    mutated["norm.g"][0] += 1e-3
    assert harness.params_digest(mutated) != d1
    assert harness.params_digest(vit.copy_params(params)) == d1


def test_segmentation_fold_runs(world):
    cfg, params, subjects, manifest, slice_cfg = world
    ft = heads.FinetuneConfig(steps=3, eval_every=3, batch_slices=4, augment=False)
    result, m = harness.run_segmentation_fold(subjects, manifest, 0, params, cfg,
                                              slice_cfg, ft, seed=2,
                                              n_seg_classes=4, eval_classes=[2, 3])
    assert 0.0 <= m["dice"] <= 1.0
    assert m["hd95"] >= 0.0
