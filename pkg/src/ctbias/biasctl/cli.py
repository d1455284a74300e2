"""``biasctl`` command line.

Exit status is 0 on success, 1 on a toolkit error (printed as
``error[category]: message``) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..cohort import build_catalog, make_split, quota_from_fractions, read_catalog_csv, read_quota_csv, table1_quota
from ..cohort import write_catalog_csv, write_split_csv
from ..errors import CtBiasError, ValidationError
from ..imgio import load_nifti, save_nifti
from ..synthlab import build_tier_dataset, designate_labels, phantom_cohort, strip_skull, tier_spec
from ..synthlab import write_tier_dataset
from .config import load_config, parse_override
from .data import GROUP_A, GROUP_B, derive_seed, phantom_template, prepare

def _add_common(p: argparse.ArgumentParser, seeded: bool):
    p.add_argument("--config", help="experiment config file (TOML)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable")
    p.add_argument("--seed", type=int, required=seeded, help="master seed" + (" (required)" if seeded else ""))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biasctl", description="Manufacturer-bias experiments on head CT phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic head phantoms").add_subparsers(dest="action", required=True)
    p = phantom.add_parser("gen", help="generate phantoms and a catalog")
    _add_common(p, True)
    p.add_argument("--count", type=int, required=True, help="phantoms per signature")
    p.add_argument("--out", required=True, help="output directory")

    dataset = sub.add_parser("dataset", help="sphere datasets").add_subparsers(dest="action", required=True)
    p = dataset.add_parser("build", help="inject spheres for a difficulty tier and write a manifest")
    _add_common(p, True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--tier", choices=("easy", "medium", "hard"), default="easy")
    p.add_argument("--out", required=True)

    split = sub.add_parser("split", help="train/val/test splits").add_subparsers(dest="action", required=True)
    p = split.add_parser("make", help="stratified split of a catalog")
    _add_common(p, True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--preset", choices=("fractions", "table1"), default="fractions")
    p.add_argument("--quota", help="quota CSV (split, manufacturer, label, count)")
    p.add_argument("--out", default="split.csv")

    p = sub.add_parser("train", help="train one run of an experiment and save its checkpoint")
    _add_common(p, True)
    p.add_argument("--run", type=int, default=0, help="run index (selects the run seed)")
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("evaluate", help="score a checkpoint on the experiment's test split")
    _add_common(p, False)
    p.add_argument("--checkpoint", required=True)

    exp = sub.add_parser("experiment", help="full experiments").add_subparsers(dest="action", required=True)
    p = exp.add_parser("run", help="train an ensemble and write its report bundle")
    _add_common(p, True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", action="append", choices=("csv", "json", "markdown"),
                   help="report formats (default: all); json is always written")

    p = sub.add_parser("report", help="render one or more report bundles")
    _add_common(p, False)
    p.add_argument("bundles", nargs="+", help="report.json files")
    p.add_argument("--format", choices=("csv", "json", "markdown"), default="markdown")
    p.add_argument("--out", required=True)
    return parser


def _config(args, default_experiment=None):
    overrides = dict(parse_override(s) for s in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is None and "experiment" not in overrides:
        if default_experiment is None:
            raise ValidationError("--config (or --set experiment=...) is required")
        overrides["experiment"] = default_experiment
    return load_config(args.config, overrides)


def cmd_phantom_gen(args):
    if args.count < 1:
        raise ValidationError(f"--count must be >= 1, got {args.count}")
    cfg = _config(args, "name_manufacturer")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for vol, meta in phantom_cohort(args.count, derive_seed(args.seed, "phantoms"), phantom_template(cfg)):
        name = f"{meta.study_id}.nii"
        save_nifti(out / name, vol)
        entries.append((meta, name))
    path = write_catalog_csv(build_catalog(entries), out / "catalog.csv")
    print(f"wrote {len(entries)} phantoms and {path}")


def cmd_dataset_build(args):
    catalog = read_catalog_csv(args.catalog, check_paths=True)
    if any(e.meta.label is None for e in catalog):
        catalog = designate_labels(catalog, derive_seed(args.seed, "labels"))
    volumes = {e.study_id: load_nifti(e.path) for e in catalog}
    masks = {sid: strip_skull(v) for sid, v in volumes.items()}
    ds = build_tier_dataset(catalog, volumes, masks, tier_spec(args.tier), derive_seed(args.seed, "spheres"))
    path = write_tier_dataset(ds, args.out)
    print(f"wrote {len(ds.items)} studies ({len(ds.small_ids)} small spheres) and {path}")


def cmd_split_make(args):
    catalog = read_catalog_csv(args.catalog)
    if args.quota:
        quota = read_quota_csv(args.quota)
    elif args.preset == "table1":
        quota = table1_quota(GROUP_A, GROUP_B)
    else:
        quota = quota_from_fractions(catalog)
    split = make_split(catalog, quota, derive_seed(args.seed, "split"))
    path = write_split_csv(split, args.out)
    counts = {s: len(split.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {path}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))


def cmd_train(args):
    from ..tinynn import save_checkpoint
    from .experiment import train_config, train_run

    cfg = _config(args)
    data = prepare(cfg)
    o = train_run(cfg, data, args.run, keep_network=True)
    if o.network is None:
        raise ValidationError(f"run {args.run} diverged at epoch {o.stopped_epoch}")
    path = save_checkpoint(o.network, args.out, train_config(cfg, o.seed))
    summary = {"run": o.index, "seed": o.seed, "converged": o.converged, "best_epoch": o.best_epoch,
               "val_loss": round(o.val_loss, 4)}
    (Path(args.out) / "run.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"saved {path} ({'converged' if o.converged else 'not converged'} at epoch {o.stopped_epoch})")


def cmd_evaluate(args):
    from ..tinynn import load_checkpoint, predict
    from .experiment import RunOutcome, _classification_cells, _inputs, _segmentation_cells, task_name

    cfg = _config(args)
    data = prepare(cfg)
    model = load_checkpoint(args.checkpoint)
    o = RunOutcome(0, 0, True, test_probs=predict(model, _inputs(data, data.test_idx)))
    if cfg.experiment == "skull_segmentation":
        cells = _segmentation_cells(cfg, data, [o], task_name(cfg))
    else:
        cells, _ = _classification_cells(cfg, data, [o], task_name(cfg))
    for c in cells:
        vals = ", ".join(f"{k} {v[0]:.4f}" for k, v in c.metrics.items())
        print(f"{c.group}: {vals}")


def cmd_experiment_run(args):
    from .experiment import run_experiment
    from .report import emit_report

    cfg = _config(args)
    out = Path(args.out)
    bundle = run_experiment(cfg, checkpoint_dir=out / "checkpoints")
    formats = set(args.format or ("csv", "json", "markdown")) | {"json"}
    written = []
    for fmt in ("csv", "json", "markdown"):
        if fmt in formats:
            written += emit_report(bundle, fmt, out)
    print(f"wrote {len(written)} files to {out}")


def cmd_report(args):
    from .report import emit_report, load_bundle, merge_bundles

    bundle = merge_bundles(load_bundle(p) for p in args.bundles)
    for path in emit_report(bundle, args.format, args.out):
        print(path)


COMMANDS = {
    ("phantom", "gen"): cmd_phantom_gen,
    ("dataset", "build"): cmd_dataset_build,
    ("split", "make"): cmd_split_make,
    ("train", None): cmd_train,
    ("evaluate", None): cmd_evaluate,
    ("experiment", "run"): cmd_experiment_run,
    ("report", None): cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        handler(args)
    except CtBiasError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit():
    sys.exit(main())
