"""``mtdseg`` command line: synth, split, train, eval, report, fetch, config."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, desk_config, load_config, manifest_name, teachers_from_kinds
from .errors import ConfigurationError, MtdsegError, ReportError

logger = logging.getLogger("mtdseg")

ARTIFACTS = "artifacts.json"


def record_artifacts(out: Path, command: str, paths) -> Path:
    """Merge produced files (with SHA-256) into ``out/artifacts.json``."""
    out.mkdir(parents=True, exist_ok=True)
    index = out / ARTIFACTS
    data = json.loads(index.read_text()) if index.is_file() else {}
    for p in map(Path, paths):
        if p.is_file():
            try:
                key = str(p.resolve().relative_to(out.resolve()))
            except ValueError:
                key = str(p)
            data[key] = {"command": command,
                         "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
    index.write_text(json.dumps(dict(sorted(data.items())), indent=2) + "\n")
    return index


def _fill_class_names(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.dataset.class_names:
        return cfg
    names = Path(cfg.dataset.root) / "classes.txt"
    if not names.is_file():
        raise ConfigurationError("dataset.class_names is empty and no classes.txt in dataset root")
    return cfg.override(dataset__class_names=names.read_text().split())


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "io__output_dir": getattr(args, "out", None),
        "ssl__tau": getattr(args, "tau", None),
        "ssl__lambda_l": getattr(args, "lambda_l", None),
        "ssl__lambda_u": getattr(args, "lambda_u", None),
        "ssl__lambda_d": getattr(args, "lambda_d", None),
        "model__fusion__omega_s": getattr(args, "omega_s", None),
        "model__fusion__omega_d": getattr(args, "omega_d", None),
        "model__mode": getattr(args, "mode", None),
        "optim__max_steps": getattr(args, "steps", None),
        "split__manifest": getattr(args, "manifest", None),
    }
    ratios = getattr(args, "ratio", None)
    if ratios and len(ratios) == 1:
        overrides["split__label_ratio"] = ratios[0]
    teachers = getattr(args, "teachers", None)
    if teachers is not None:
        kinds = [] if teachers in ("", "none") else teachers.split(",")
        entries = teachers_from_kinds(kinds, cfg.teachers, cfg.model.student.patch_size)
        overrides["teachers"] = [t.model_dump() for t in entries]
    return _fill_class_names(cfg.override(**overrides))


# commands

def cmd_synth(args) -> int:
    from .datapipe.synthetic import generate_synthetic

    root = generate_synthetic(args.root, num_images=args.num_images, image_size=args.image_size,
                              seed=args.seed)
    print(f"synthetic dataset written to {root}")
    return 0


def cmd_config(args) -> int:
    cfg = desk_config(args.root, args.out or "runs/desk") if args.desk else ExperimentConfig()
    text = cfg.dumps()
    if args.write:
        Path(args.write).parent.mkdir(parents=True, exist_ok=True)
        Path(args.write).write_text(text)
        print(f"wrote {args.write}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_split(args) -> int:
    from .datapipe.manifest import build_manifest, partition_labeled

    cfg = _config(args)
    ratios = args.ratio or [cfg.split.label_ratio]
    out = Path(cfg.io.output_dir)
    base = build_manifest(cfg.dataset.root, cfg.dataset.tile_size, cfg.split.ratios,
                          cfg.split.seed, dataset_name=cfg.dataset.name,
                          class_names=cfg.dataset.class_names,
                          ignore_value=cfg.dataset.ignore_value)
    written = []
    for ratio in ratios:
        if not 0 < ratio <= 1:
            raise ConfigurationError(f"--ratio must be in (0, 1], got {ratio}")
        m = partition_labeled(base, ratio, cfg.split.seed)
        if len(ratios) == 1:
            path = cfg.override(split__label_ratio=ratio).manifest_path()
        else:
            path = out / "splits" / manifest_name(cfg.dataset.name, ratio)
        c = m.counts()
        counts = ", ".join(f"{k} {v}" for k, v in c.items())
        if path.is_file() and path.read_text() == m.dumps():
            print(f"{path}: up to date ({counts})")
        else:
            m.write(path)
            print(f"{path}: {counts}")
        written.append(path)
    record_artifacts(out, "split", written)
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args)
    out = Path(cfg.io.output_dir)
    if not cfg.manifest_path().is_file():
        raise ConfigurationError(f"manifest {cfg.manifest_path()} not found; run `mtdseg split`")
    cfg_path = cfg.save(out / "config.yaml")
    summary = train(cfg, resume_from=bool(args.resume))
    if summary["val_summary"]:
        print(f"step {summary['steps']}: val mIoU / mF1 / Kappa {summary['val_summary']}")
    record_artifacts(out, "train", [cfg_path, out / "summary.json", out / "train_log.jsonl",
                                    out / "last.pt", out / "best.pt"])
    return 0


def cmd_eval(args) -> int:
    from .datapipe.manifest import DatasetManifest
    from .student import load_checkpoint, model_from_checkpoint
    from .training import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    if args.manifest:
        manifest_path = Path(args.manifest)
    elif args.config:
        manifest_path = _config(args).manifest_path()
    else:
        raise ConfigurationError("eval needs --manifest or --config")
    manifest = DatasetManifest.read(manifest_path)
    model = model_from_checkpoint(ckpt, args.model_source)
    n = model.cfg.num_classes
    if manifest.class_names and len(manifest.class_names) != n:
        raise ConfigurationError(f"checkpoint predicts {n} classes, manifest has "
                                 f"{len(manifest.class_names)}")
    mode = args.mode or ckpt.get("mode", "fused")
    ckpt_path = Path(args.checkpoint)
    tag = args.name or f"{ckpt_path.stem}-{args.model_source}-{args.split}"
    # table rows are told apart by run directory unless a name is given
    name = args.name or f"{ckpt_path.resolve().parent.name}/{tag}"
    report = evaluate(model, manifest, args.split, mode, args.batch_size, name=name)
    out = Path(args.out or ckpt_path.parent)
    paths = report.save(out / f"metrics_{tag}")
    print(f"{name}: {report.summary()}")
    record_artifacts(out, "eval", paths)
    return 0


def cmd_report(args) -> int:
    from .metrics import MetricsReport, render_table

    reports = []
    for p in args.files:
        try:
            reports.append(MetricsReport.from_dict(json.loads(Path(p).read_text())))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise ReportError(f"cannot read metrics file {p}: {e}") from None
    text, warnings = render_table(reports, args.format)
    for w in warnings:
        logger.warning(w)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_fetch(args) -> int:
    from .teachers import fetch_weights

    dest = fetch_weights(args.kind, args.dest, args.repo_id)
    print(f"{args.kind} weights in {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtdseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory (overrides io.output_dir)"):
        sp.add_argument("--config", help="experiment YAML")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--root", default="data/synthetic", help="dataset directory to create")
    s.add_argument("--num-images", type=int, default=209, help="number of image/label pairs")
    s.add_argument("--image-size", type=int, default=256, help="side length in pixels")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("config", help="print or write a config template")
    s.add_argument("--desk", action="store_true", help="small CPU config with mock teachers")
    s.add_argument("--root", default="data/synthetic")
    s.add_argument("--out", help="io.output_dir of the template")
    s.add_argument("--write", help="write to this path instead of stdout")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("split", help="tile, split and partition a dataset")
    common(s)
    s.add_argument("--ratio", type=float, action="append",
                   help="labeled fraction; repeat for several manifests")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="semi-supervised training")
    common(s)
    s.add_argument("--ratio", type=float, action="append", help="labeled fraction of the manifest")
    s.add_argument("--manifest", help="split manifest (default: <out>/splits/<dataset>_labeled<ratio>.jsonl)")
    s.add_argument("--tau", type=float, help="pseudo-label confidence threshold")
    s.add_argument("--lambda-l", type=float, help="supervised loss weight")
    s.add_argument("--lambda-u", type=float, help="pseudo-label loss weight")
    s.add_argument("--lambda-d", type=float, help="distillation loss weight (0 disables it)")
    s.add_argument("--omega-s", type=float, help="fusion weight of student features")
    s.add_argument("--omega-d", type=float, help="fusion weight of projected features (0 disables fusion)")
    s.add_argument("--teachers", help="comma list of dinov2,clip,sam,mock or 'none'")
    s.add_argument("--mode", choices=("fused", "plain"))
    s.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    s.add_argument("--resume", action="store_true", help="continue from <out>/last.pt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a split")
    common(s, "directory for the metrics files (default: next to the checkpoint)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--ratio", type=float, action="append")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--mode", choices=("fused", "plain"))
    s.add_argument("--model-source", default="ema", choices=("student", "ema"))
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--name")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="render metrics files as a table")
    s.add_argument("files", nargs="+")
    s.add_argument("--format", default="markdown", choices=("markdown", "csv"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("fetch", help="download published teacher weights")
    s.add_argument("kind", choices=("dinov2", "clip", "sam"))
    s.add_argument("--dest")
    s.add_argument("--repo-id")
    s.set_defaults(func=cmd_fetch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MtdsegError as e:
        print(f"mtdseg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
