"""Command-line interface.

Subcommands: phantom, splits, pretrain, finetune-cls, finetune-seg,
evaluate, few-shot, cross-eval, gradcheck. Any invariant or leakage
failure exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import distill as dl
from . import harness, heads, metrics
from . import vit as vit_mod
from . import volume_io as vio
from .config import build_section, load_config
from .errors import SliceDistillError
from .slices import SliceConfig, extract_slices
from .splits import (audit_split_manifest, load_split_manifest, make_splits,
                     save_split_manifest)
from .vit import ViTConfig


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")


def _configs(args):
    raw = load_config(args.config, args.overrides)
    return {
        "slices": build_section("slices", raw, SliceConfig(num_slices=8, target_side=96)),
        "crop": build_section("crop", raw),
        "vit": build_section("vit", raw, ViTConfig.desk_scale()),
        "distill": build_section("distill", raw),
        "finetune": build_section("finetune", raw),
    }


def _load_subjects(data_dir, manifest_path, ids=None) -> dict[str, vio.SubjectRecord]:
    manifest = vio.load_manifest(manifest_path)
    keep = set(ids) if ids is not None else None
    return {e.subject: vio.load_subject(e, data_dir)
            for e in manifest.entries if keep is None or e.subject in keep}


def cmd_phantom(args) -> int:
    manifest = vio.write_phantom_corpus(args.out, args.subjects, args.lesion_fraction,
                                        tuple(args.size), args.seed)
    print(f"wrote {len(manifest.entries)} phantom subjects to {args.out}")
    return 0


def cmd_splits(args) -> int:
    manifest = vio.load_manifest(args.manifest)
    subjects = [(e.subject, e.label) for e in manifest.entries]
    split = make_splits(subjects, seed=args.seed, test_fraction=args.test_fraction,
                        n_folds=args.folds, dataset_name=manifest.dataset_name)
    save_split_manifest(args.out, split)
    print(f"test={len(split.test_ids)} folds={[len(f) for f in split.folds]} -> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfgs = _configs(args)
    split = load_split_manifest(args.splits)
    violations = audit_split_manifest(split)
    if violations:
        raise SliceDistillError("; ".join(violations))
    subjects = _load_subjects(args.data_dir, args.manifest, split.ssl_ids)
    corpus = [s for rec in subjects.values()
              for s in extract_slices(rec, cfgs["slices"])]
    state = None
    if args.resume:
        state, _ = dl.load_state(args.resume)
        print(f"resuming from step {state.step}")
    out = Path(args.out)

    def progress(row):
        if row.step % args.log_every == 0:
            print(f"step {row.step:6d}  lr {row.lr:.3e}  loss {row.loss:.4f}")

    state, trace = dl.pretrain(corpus, cfgs["distill"], cfgs["vit"], seed=args.seed,
                               crop_cfg=cfgs["crop"],
                               forbidden_subjects=frozenset(split.test_ids),
                               state=state, out_dir=out, progress=progress)
    print(f"finished at step {state.step}; checkpoint and trace in {out}")
    return 0


def _init_backbone(args, vit_cfg: ViTConfig):
    if args.init == "random":
        return vit_mod.init_vit_params(
            vit_cfg, np.random.default_rng(np.random.SeedSequence([31, args.seed])))
    if args.init.endswith(".vdck") and Path(args.init).exists():
        try:
            state, ckpt_cfg = dl.load_state(args.init)
            params = state.teacher or state.student
        except KeyError:
            params, ckpt_cfg, _ = vit_mod.load_checkpoint(args.init)
        if ckpt_cfg != vit_cfg:
            raise SliceDistillError(f"checkpoint config {ckpt_cfg} != run config {vit_cfg}")
        return params
    raise SliceDistillError(f"--init must be 'random' or a .vdck checkpoint, got {args.init!r}")


def cmd_finetune_cls(args) -> int:
    cfgs = _configs(args)
    split = load_split_manifest(args.splits)
    subjects = _load_subjects(args.data_dir, args.manifest)
    init = _init_backbone(args, cfgs["vit"])
    outcome = harness.run_classification_fold(subjects, split, args.fold, init,
                                              cfgs["vit"], cfgs["slices"],
                                              cfgs["finetune"], seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vit_mod.save_checkpoint(out / "model.vdck", outcome.result.params, cfgs["vit"],
                            extra={"cls_head.w": outcome.result.head_weight,
                                   "cls_head.b": outcome.result.head_bias})
    heads.dump_predictions(out / "test_predictions.json",
                           {sid: np.array([1 - s, s]) for sid, s in
                            zip(sorted(split.test_ids), outcome.test_scores)})
    (out / "report.json").write_text(json.dumps(
        {"fold": args.fold, "test_auroc": outcome.test_auroc,
         "best_step": outcome.result.best_step,
         "val_trace": outcome.result.val_trace}, indent=2))
    print(f"fold {args.fold} test AUROC {outcome.test_auroc:.4f} -> {out}")
    return 0


def cmd_finetune_seg(args) -> int:
    cfgs = _configs(args)
    split = load_split_manifest(args.splits)
    subjects = _load_subjects(args.data_dir, args.manifest)
    init = _init_backbone(args, cfgs["vit"])
    eval_classes = [int(c) for c in args.eval_classes.split(",")]
    result, m = harness.run_segmentation_fold(subjects, split, args.fold, init,
                                              cfgs["vit"], cfgs["slices"],
                                              cfgs["finetune"], seed=args.seed,
                                              n_seg_classes=args.seg_classes,
                                              eval_classes=eval_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vit_mod.save_checkpoint(out / "model.vdck", result.params, cfgs["vit"],
                            extra={"seg_head.w": result.head_weight,
                                   "seg_head.b": result.head_bias})
    (out / "report.json").write_text(json.dumps(
        {"fold": args.fold, **m, "best_step": result.best_step}, indent=2))
    for sid in sorted(split.test_ids)[:args.dump_volumes]:
        vol = heads.predict_volume_segmentation(subjects[sid], result.params,
                                                cfgs["vit"], result.seg_decoder(),
                                                cfgs["slices"])
        vio.write_nifti_file(out / f"{sid}_pred.nii", vol)
    print(f"fold {args.fold} dice {m['dice']:.4f} hd95 {m['hd95']:.3f} -> {out}")
    return 0


def _load_cls_model(path):
    params, cfg, extra = vit_mod.load_checkpoint(path)
    head = heads.ClassifierHead(weight=extra["cls_head.w"], bias=extra["cls_head.b"])
    return params, cfg, head


def cmd_evaluate(args) -> int:
    cfgs = _configs(args)
    split = load_split_manifest(args.splits)
    violations = audit_split_manifest(split)
    if violations:
        raise SliceDistillError("; ".join(violations))
    subjects = _load_subjects(args.data_dir, args.manifest, split.test_ids)
    test_subjects = [subjects[s] for s in sorted(split.test_ids)]
    values = []
    for path in args.models.split(","):
        params, _, head = _load_cls_model(path)
        scores, ys = harness.evaluate_classification(params, cfgs["vit"], head,
                                                     cfgs["slices"], test_subjects)
        values.append(metrics.auroc(scores, ys))
    report = metrics.MetricReport.from_folds("auroc", values)
    report.save_json(args.out)
    report.save_fold_csv(str(args.out) + ".folds.csv")
    print(f"auroc mean {report.mean:.4f} std {report.std:.4f} -> {args.out}")
    return 0


def cmd_few_shot(args) -> int:
    cfgs = _configs(args)
    split = load_split_manifest(args.splits)
    subjects = _load_subjects(args.data_dir, args.manifest)
    init = _init_backbone(args, cfgs["vit"])
    fractions = [float(f) for f in args.fractions.split(",")]
    fold_train = [(sid, subjects[sid].label)
                  for sid in split.train_ids_for_fold(args.fold)]

    def pipeline(ids):
        outcome = harness.run_classification_fold(subjects, split, args.fold, init,
                                                  cfgs["vit"], cfgs["slices"],
                                                  cfgs["finetune"], seed=args.seed,
                                                  train_ids=ids)
        return outcome.test_auroc

    curve = harness.few_shot_curve(fold_train, fractions, pipeline, seed=args.seed)
    Path(args.out).write_text(json.dumps({str(k): v for k, v in curve.items()}, indent=2))
    print("  ".join(f"{f:.0%}:{v:.4f}" for f, v in sorted(curve.items())))
    return 0


def cmd_cross_eval(args) -> int:
    cfgs = _configs(args)
    split_a = load_split_manifest(args.splits_a)
    subjects_b = list(_load_subjects(args.data_dir_b, args.manifest_b).values())
    models = [_load_cls_model(p)[::2] for p in args.models.split(",")]
    train_ids_a = set(split_a.ssl_ids) | {s for f in split_a.folds for s in f}
    report = harness.cross_dataset_eval([(p, h) for p, h in models], cfgs["vit"],
                                        cfgs["slices"], subjects_b, train_ids_a)
    report.save_json(args.out)
    report.save_fold_csv(str(args.out) + ".folds.csv")
    print(f"cross-dataset auroc mean {report.mean:.4f} -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite
    ok = run_suite(n_cases=args.cases, seed=args.seed, verbose=True)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicedistill",
                                description="slice-wise self-distillation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="generate a synthetic phantom corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=64)
    sp.add_argument("--lesion-fraction", type=float, default=0.5)
    sp.add_argument("--size", type=int, nargs=3, default=[32, 32, 24])
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_phantom)

    sp = sub.add_parser("splits", help="emit a split manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float, default=0.15)
    sp.add_argument("--folds", type=int, default=5)
    sp.set_defaults(fn=cmd_splits)

    sp = sub.add_parser("pretrain", help="self-distillation pretraining")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--splits", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resume")
    sp.add_argument("--log-every", type=int, default=10)
    _add_config_args(sp)
    sp.set_defaults(fn=cmd_pretrain)

    for name, fn in (("finetune-cls", cmd_finetune_cls), ("finetune-seg", cmd_finetune_seg)):
        sp = sub.add_parser(name, help=f"{name} on one fold")
        sp.add_argument("--data-dir", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--splits", required=True)
        sp.add_argument("--fold", type=int, default=0)
        sp.add_argument("--init", default="random",
                        help="'random' or a .vdck checkpoint")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        if name == "finetune-seg":
            sp.add_argument("--seg-classes", type=int, default=4)
            sp.add_argument("--eval-classes", default="2,3")
            sp.add_argument("--dump-volumes", type=int, default=0)
        _add_config_args(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("evaluate", help="score saved models on the held-out test set")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--splits", required=True)
    sp.add_argument("--models", required=True, help="comma-separated .vdck paths")
    sp.add_argument("--out", required=True)
    _add_config_args(sp)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("few-shot", help="label-efficiency curve on one fold")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--splits", required=True)
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--fractions", default="0.1,0.2,0.5,1.0")
    sp.add_argument("--init", default="random")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    _add_config_args(sp)
    sp.set_defaults(fn=cmd_few_shot)

    sp = sub.add_parser("cross-eval", help="evaluate A-trained models on dataset B")
    sp.add_argument("--models", required=True)
    sp.add_argument("--splits-a", required=True)
    sp.add_argument("--data-dir-b", required=True)
    sp.add_argument("--manifest-b", required=True)
    sp.add_argument("--out", required=True)
    _add_config_args(sp)
    sp.set_defaults(fn=cmd_cross_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sp.add_argument("--cases", type=int, default=120)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SliceDistillError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
