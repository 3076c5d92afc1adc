"""Command line entry point: ``rano-response <command> --config study.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .runner import Study, load_config, write_config_snapshot


def _study(args) -> Study:
    cfg = load_config(args.config)
    if getattr(args, "output_dir", None):
        cfg.output_dir = str(Path(args.output_dir).resolve())
    return Study(cfg, progress=None if args.quiet else print)


def _parse_choices(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SystemExit(f"--set expects Axis=option, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v) if v.lower() in ("true", "false") else v
    return out


def cmd_ingest(args):
    study = _study(args)
    write_config_snapshot(study.cfg, study.out, "ingest")
    summary = study.ingest()
    print(f"{summary['sessions']} sessions, {summary['retained_timepoints']} timepoints retained")
    for key, info in summary["modality_sets"].items():
        counts = ", ".join(str(c) for c in info["counts"])
        print(f"  {key:<22} {info['samples']:4d} samples  (PD, SD, PR, CR) = ({counts})")


def cmd_preprocess(args):
    study = _study(args)
    write_config_snapshot(study.cfg, study.out, "preprocess")
    study.preprocess()


def cmd_split(args):
    study = _study(args)
    write_config_snapshot(study.cfg, study.out, "split")
    for key, plan in study.split().items():
        print(f"{key}: {len(plan.assignments)} samples in {plan.n_folds} folds")
        for w in plan.warnings:
            print(f"  warning: {w}")


def cmd_train(args):
    study = _study(args)
    results = study.train(_parse_choices(args.set), args.fold)
    for r in results:
        print(f"fold {r['fold']}: balanced accuracy {r['balanced_accuracy']:.4f}  f1 {r['f1']:.4f}  ({r['checkpoint']})")


def cmd_evaluate(args):
    study = _study(args)
    write_config_snapshot(study.cfg, study.out, "evaluate")
    for ckpt in args.checkpoint:
        print(json.dumps(study.evaluate(ckpt, literal=args.literal_eq), indent=1))


def cmd_ablate(args):
    study = _study(args)
    summary = study.ablate()
    from .report import build_report

    build_report(study.out)
    print("winner chain: " + " -> ".join(f"{c['axis']}={c['winner']}" for c in summary["winner_chain"]))


def cmd_explain(args):
    study = _study(args)
    out = Path(args.out) if args.out else study.out / "explain" / Path(args.checkpoint).stem
    rows = study.explain(args.checkpoint, out, args.sample)
    print(f"wrote attributions for {len(rows)} samples to {out}")


def cmd_report(args):
    from .report import build_report

    if args.study_dir:
        study_dir = Path(args.study_dir)
    else:
        cfg = load_config(args.config)
        study_dir = Path(cfg.output_dir)
        write_config_snapshot(cfg, study_dir, "report")
    info = build_report(study_dir, args.out)
    print(f"report: {info['records']} records, {info['stats']} tests, {len(info['figures'])} figures -> {info['out_dir']}")


def cmd_synth(args):
    from .synthetic import make_synthetic_cohort

    root = Path(args.dest).resolve()
    truth = make_synthetic_cohort(root / "cohort", n_patients=args.patients, shape=(args.size,) * 3, seed=args.seed)
    cfg = {
        "study": {"name": "synthetic", "seed": args.seed, "output_dir": "runs/synthetic"},
        "data": {"root": "cohort", "metadata": str(truth.metadata.relative_to(root)),
                 "clinical": str(truth.clinical.relative_to(root)), "template": str(truth.template.relative_to(root))},
        "folds": {"n_folds": 2},
        "train": {"max_epochs": 3, "patience": 2},
        "axes": {
            "Subtraction": [False, True],
            "Modalities": ["CT1+T1W+T2W+FLAIR", "CT1"],
            "Architecture": ["Densenet121", "AlexNet3D"],
            "Pretraining": ["None", "RotationSelfSupervised"],
            "ClinicalData": [False, True],
        },
        "model_kwargs": {"AlexNet3D": {"hidden": 256}},
        "pretraining": {"epochs": 1},
        "explain": {"n_samples": 2},
    }
    path = root / "study.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    print(f"synthetic cohort in {root / 'cohort'}; config {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rano-response", description="RANO response classification pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", "-c", required=True, help="study YAML file")
            sp.add_argument("--output-dir", help="override study.output_dir")
        sp.add_argument("--quiet", "-q", action="store_true")
        sp.set_defaults(func=fn)
        return sp

    add("ingest", cmd_ingest, "index the dataset and write cohort manifests")
    add("preprocess", cmd_preprocess, "run the preprocessing chain into the cache")
    add("split", cmd_split, "create or show the fold plans")
    sp = add("train", cmd_train, "train one pipeline on the configured folds")
    sp.add_argument("--fold", type=int, action="append", help="fold index (repeatable; default all)")
    sp.add_argument("--set", action="append", metavar="AXIS=OPTION", help="override an axis choice")
    sp = add("evaluate", cmd_evaluate, "score checkpoints on their held-out fold")
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--literal-eq", action="store_true", help="weight per-class terms by 1/n_i instead of n_i/n")
    add("ablate", cmd_ablate, "run the greedy ablation study (resumable)")
    sp = add("explain", cmd_explain, "Grad-CAM and saliency for a checkpoint's test samples")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sample", action="append", help="sample id (repeatable; default first n)")
    sp.add_argument("--out")
    sp = sub.add_parser("report", help="render tables and figures from a study directory")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", "-c")
    group.add_argument("--study-dir")
    sp.add_argument("--out")
    sp.add_argument("--quiet", "-q", action="store_true")
    sp.set_defaults(func=cmd_report)
    sp = sub.add_parser("synth", help="write a small synthetic cohort and a matching study config")
    sp.add_argument("dest")
    sp.add_argument("--patients", type=int, default=12)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--quiet", "-q", action="store_true")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
