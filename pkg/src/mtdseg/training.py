"""Experiment orchestration: build a run from a config, train, validate, checkpoint, resume."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import torch

from .config import ExperimentConfig
from .datapipe.loading import (STREAM_LABELED, STREAM_UNLABELED, BatchSchedule, EvalTiles,
                               LabeledTiles, UnlabeledTiles, batch_loader)
from .datapipe.manifest import DatasetManifest
from .engine import LossReport, TrainState, make_ema, make_optimizer, train_step
from .errors import ConfigurationError, DataError, MtdsegError
from .metrics import ConfusionMatrix, MetricsReport, accumulate, summarize
from .student import SegmentationModel, infer_tiles, load_checkpoint, save_checkpoint
from .teachers import TeacherHandle, load_teacher

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"
LAST_CKPT, BEST_CKPT = "last.pt", "best.pt"


@dataclass
class Run:
    cfg: ExperimentConfig
    manifest: DatasetManifest
    state: TrainState
    teachers: dict[str, TeacherHandle]
    labeled: LabeledTiles
    unlabeled: UnlabeledTiles | None
    labeled_schedule: BatchSchedule
    unlabeled_schedule: BatchSchedule | None
    total_steps: int
    best_miou: float = -math.inf
    history: list[dict] = field(default_factory=list)

    @property
    def out_dir(self) -> Path:
        return Path(self.cfg.io.output_dir)


def build_run(cfg: ExperimentConfig, manifest: DatasetManifest | None = None) -> Run:
    if manifest is None:
        manifest = DatasetManifest.read(cfg.manifest_path())
    if list(manifest.class_names) and list(manifest.class_names) != list(cfg.dataset.class_names):
        raise ConfigurationError("manifest class names differ from the config's")
    torch.manual_seed(cfg.seed)
    teachers = {s.key: load_teacher(s) for s in cfg.teacher_specs()}
    student = SegmentationModel(cfg.student_config(),
                                {k: h.spec.embed_dim for k, h in teachers.items()},
                                cfg.fusion_weights())
    o = cfg.optim
    optimizer = make_optimizer(student, o.encoder_lr, o.decoder_lr, o.betas, o.weight_decay)
    state = TrainState(student, make_ema(student), optimizer, 0, cfg.seed)

    spec = cfg.augmentation()
    lab_records = manifest.select("train", labeled=True)
    unl_records = manifest.select("train", labeled=False)
    if not lab_records:
        raise DataError("manifest has no labeled train tiles")
    root = cfg.dataset.root
    labeled = LabeledTiles(manifest, lab_records, spec, cfg.seed, root)
    lab_sched = BatchSchedule(len(lab_records), o.batch_size, cfg.seed, STREAM_LABELED)
    unlabeled = unl_sched = None
    if unl_records:
        unlabeled = UnlabeledTiles(manifest, unl_records, spec, cfg.seed, root)
        unl_sched = BatchSchedule(len(unl_records), o.batch_size, cfg.seed, STREAM_UNLABELED,
                                  drop_last=True)
    total = o.max_steps or o.epochs * lab_sched.steps_per_epoch
    return Run(cfg, manifest, state, teachers, labeled, unlabeled, lab_sched, unl_sched, total)


def _set_lr(run: Run, step: int) -> None:
    o = run.cfg.optim
    if o.lr_schedule == "constant":
        return
    factor = (1 - step / run.total_steps) ** o.poly_power
    for g in run.state.optimizer.param_groups:
        g["lr"] = g["initial_lr"] * factor


def _checkpoint(run: Run, name: str) -> Path:
    st = run.state.state_dict()
    return save_checkpoint(run.out_dir / name, run.state.student,
                           ema_params=st["ema_params"], optimizer=st["optimizer"],
                           step=st["step"], seed=st["seed"], torch_rng=st["torch_rng"],
                           best_miou=run.best_miou, mode=run.cfg.model.mode,
                           config=run.cfg.model_dump(mode="json"))


def resume(run: Run, path: str | Path | None = None) -> Run:
    ckpt = load_checkpoint(path or run.out_dir / LAST_CKPT)
    run.state.load_state_dict(ckpt)
    run.best_miou = ckpt.get("best_miou", -math.inf)
    return run


@torch.no_grad()
def evaluate(model: SegmentationModel, manifest: DatasetManifest, split: str = "val",
             mode: str = "fused", batch_size: int = 16, root=None, name: str = "",
             num_workers: int = 0) -> MetricsReport:
    records = manifest.select(split)
    if not records:
        raise DataError(f"no {split!r} tiles in manifest")
    model.eval()
    dtype = next(model.parameters()).dtype
    ds = EvalTiles(manifest, records, root)
    loader = torch.utils.data.DataLoader(ds, batch_size=batch_size, num_workers=num_workers)
    cm = ConfusionMatrix.empty(model.cfg.num_classes)
    seen = 0
    for batch in loader:
        pred = infer_tiles(model, batch["image"].to(dtype), mode).argmax(1)
        for p, lbl in zip(pred.numpy(), batch["label"].numpy()):
            cm = accumulate(cm, p, lbl, manifest.ignore_value, tile=records[seen].tile_id)
            seen += 1
    return summarize(cm, list(manifest.class_names) or None, name=name)


def _batches(dataset, schedule, start, stop, workers) -> Iterator:
    if dataset is None:
        while True:
            yield None
    yield from batch_loader(dataset, schedule, start, stop, workers)


def train(cfg: ExperimentConfig, manifest: DatasetManifest | None = None, *,
          resume_from: str | Path | bool | None = None, stop_at: int | None = None,
          on_report: Callable[[LossReport], None] | None = None) -> dict:
    """Train until ``total_steps`` (or ``stop_at``), streaming one log record per step.

    Returns a summary with final validation metrics and checkpoint paths.
    """
    run = build_run(cfg, manifest)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if resume_from:
        resume(run, None if resume_from is True else resume_from)
    start = run.state.step
    stop = min(run.total_steps, stop_at) if stop_at is not None else run.total_steps

    log_path = out / LOG_NAME
    kept = []
    if start and log_path.exists():
        kept = [ln for ln in log_path.read_text().splitlines() if json.loads(ln)["step"] < start]
    log_path.write_text("".join(ln + "\n" for ln in kept))

    io = cfg.io
    ssl = cfg.ssl_config()
    lab_it = _batches(run.labeled, run.labeled_schedule, start, stop, io.num_workers)
    unl_it = _batches(run.unlabeled, run.unlabeled_schedule, start, stop, io.num_workers)
    last_metrics = None
    t0 = time.time()
    with log_path.open("a") as log:
        for step in range(start, stop):
            _set_lr(run, step)
            lab, unl = next(lab_it), next(unl_it)
            try:
                _, report = train_step(run.state, lab, unl, run.teachers, ssl)
            except MtdsegError:
                _checkpoint(run, "failed.pt")
                raise
            log.write(json.dumps(report.to_record()) + "\n")
            log.flush()
            if on_report:
                on_report(report)
            done = run.state.step
            if done % io.validate_every == 0 or done == run.total_steps:
                last_metrics = evaluate(run.state.ema, run.manifest, "val", ssl.mode,
                                        io.eval_batch_size, cfg.dataset.root,
                                        name=f"step{done}")
                run.history.append({"step": done, "miou": last_metrics.miou})
                logger.info("step %d val mIoU %.2f", done, last_metrics.miou * 100)
                if last_metrics.miou > run.best_miou:
                    run.best_miou = last_metrics.miou
                    _checkpoint(run, BEST_CKPT)
            if done % io.checkpoint_every == 0 or done == stop:
                _checkpoint(run, LAST_CKPT)
    summary = {
        "steps": run.state.step,
        "seconds": round(time.time() - t0, 1),
        "best_miou": run.best_miou,
        "last_checkpoint": str(out / LAST_CKPT),
        "best_checkpoint": str(out / BEST_CKPT) if (out / BEST_CKPT).exists() else None,
        "log": str(log_path),
        "val": None if last_metrics is None else last_metrics.to_dict(),
        "val_summary": None if last_metrics is None else last_metrics.summary(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
