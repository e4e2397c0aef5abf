"""Semi-supervised objective and the single training step.

Objective: lambda_l * CE(labeled) + lambda_u * thresholded CE(strong vs. EMA pseudo-labels)
+ lambda_d * mean over teachers of token-wise squared error between translated student
tokens and frozen teacher tokens.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

from .datapipe.augment import box_mask, cutmix_tensors
from .datapipe.loading import decode_boxes
from .errors import ConfigurationError, ContractViolation, NumericFaultError
from .student import SegmentationModel
from .teachers import TeacherHandle, TokenFeatureMap, align_token_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_l: float = 1 / 3
    lambda_u: float = 1 / 3
    lambda_d: float = 1 / 3

    def __post_init__(self):
        vals = (self.lambda_l, self.lambda_u, self.lambda_d)
        if any(v < 0 for v in vals) or sum(vals) <= 0:
            raise ConfigurationError(f"loss weights must be non-negative with positive sum: {vals}")


@dataclass(frozen=True)
class EmaConfig:
    momentum: float = 0.999

    def __post_init__(self):
        if not 0 <= self.momentum <= 1:
            raise ConfigurationError(f"EMA momentum must lie in [0, 1], got {self.momentum}")


@dataclass(frozen=True)
class SSLConfig:
    weights: LossWeights = LossWeights()
    ema: EmaConfig = EmaConfig()
    tau: float = 0.95
    distill_labeled: bool = False
    mode: str = "fused"
    ignore_value: int = 255

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ConfigurationError(f"tau must lie in (0, 1], got {self.tau}")


@dataclass
class PseudoLabelBundle:
    hard_labels: torch.Tensor  # (B, H, W) long
    confidence_mask: torch.Tensor  # (B, H, W) bool

    @property
    def coverage(self) -> float:
        return float(self.confidence_mask.float().mean())


@dataclass
class LossReport:
    l_sup: float
    l_unsup: float
    l_distill_total: float | None
    l_distill_per_teacher: dict[str, float]
    total: float
    pseudo_coverage: float
    weights: LossWeights = field(default_factory=LossWeights)
    fused: bool = False
    step: int = 0
    lr: float | None = None

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "l_sup": self.l_sup,
            "l_unsup": self.l_unsup,
            "l_distill_total": self.l_distill_total,
            "l_distill_per_teacher": dict(self.l_distill_per_teacher),
            "total": self.total,
            "pseudo_coverage": self.pseudo_coverage,
            "fused": self.fused,
            "lr": self.lr,
        }


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_value: int = 255):
    """Mean pixel cross-entropy over non-ignored pixels. ``logits`` is (B, C, H, W)."""
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ContractViolation(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if not (labels != ignore_value).any():
        logger.warning("supervised batch has no annotated pixels; loss set to 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_value)


@torch.no_grad()
def pseudo_label(weak_logits: torch.Tensor, tau: float = 0.95) -> PseudoLabelBundle:
    if not 0 < tau <= 1:
        raise ContractViolation(f"tau must lie in (0, 1], got {tau}")
    conf, hard = weak_logits.detach().softmax(dim=1).max(dim=1)
    return PseudoLabelBundle(hard, conf >= tau)


def unsupervised_loss(strong_logits: torch.Tensor, bundle: PseudoLabelBundle):
    """Cross-entropy on confident pixels, summed and divided by the total pixel count."""
    if strong_logits.shape[0] != bundle.hard_labels.shape[0] or \
            strong_logits.shape[2:] != bundle.hard_labels.shape[1:]:
        raise ContractViolation("strong logits and pseudo-labels differ in shape")
    ce = F.cross_entropy(strong_logits, bundle.hard_labels, reduction="none")
    return (ce * bundle.confidence_mask.to(ce.dtype)).sum() / ce.numel()


def distillation_loss(translated: Mapping[str, TokenFeatureMap],
                      teacher_feats: Mapping[str, TokenFeatureMap]):
    """Per teacher: mean over (sample, token) of squared L2 distance. Total: mean over teachers."""
    if set(translated) != set(teacher_feats):
        raise ContractViolation(
            f"teacher sets differ: {sorted(translated)} vs {sorted(teacher_feats)}")
    if not translated:
        raise ContractViolation("distillation needs at least one teacher")
    per = {}
    for k in translated:
        s, t = translated[k].data, teacher_feats[k].data.detach()
        if s.shape != t.shape:
            raise ContractViolation(f"teacher {k!r}: {tuple(s.shape)} vs {tuple(t.shape)}")
        per[k] = (s - t).pow(2).sum(-1).mean()
    total = torch.stack(list(per.values())).mean()
    return total, per


def weighted_total(l_sup, l_unsup, l_distill, w: LossWeights):
    """lambda_l * l_sup + lambda_u * l_unsup + lambda_d * l_distill (absent distill counts 0)."""
    out = w.lambda_l * l_sup + w.lambda_u * l_unsup
    if l_distill is not None:
        out = out + w.lambda_d * l_distill
    return out


def total_loss(l_sup: float, l_unsup: float, l_distill: float | None, w: LossWeights, *,
               per_teacher: Mapping[str, float] | None = None, coverage: float = 0.0,
               fused: bool = False, step: int = 0, lr: float | None = None) -> LossReport:
    terms = {"l_sup": l_sup, "l_unsup": l_unsup, "l_distill": l_distill}
    bad = {k: v for k, v in terms.items() if v is not None and not math.isfinite(v)}
    if bad:
        raise NumericFaultError(f"non-finite loss at step {step}: {terms}")
    return LossReport(l_sup=float(l_sup), l_unsup=float(l_unsup),
                      l_distill_total=None if l_distill is None else float(l_distill),
                      l_distill_per_teacher=dict(per_teacher or {}),
                      total=float(weighted_total(l_sup, l_unsup, l_distill, w)),
                      pseudo_coverage=float(coverage), weights=w, fused=fused, step=step, lr=lr)


@torch.no_grad()
def ema_update(teacher_params: Iterable[torch.Tensor], student_params: Iterable[torch.Tensor],
               momentum: float) -> None:
    """In place: teacher = momentum * teacher + (1 - momentum) * student."""
    teacher_params, student_params = list(teacher_params), list(student_params)
    if len(teacher_params) != len(student_params):
        raise ContractViolation("EMA teacher and student have different parameter counts")
    for t, s in zip(teacher_params, student_params):
        if t.shape != s.shape:
            raise ContractViolation(f"EMA shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)


@dataclass
class TrainState:
    student: SegmentationModel
    ema: SegmentationModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    seed: int = 0

    def state_dict(self) -> dict:
        return {"params": self.student.state_dict(), "ema_params": self.ema.state_dict(),
                "optimizer": self.optimizer.state_dict(), "step": self.step, "seed": self.seed,
                "torch_rng": torch.get_rng_state()}

    def load_state_dict(self, d: Mapping) -> None:
        self.student.load_state_dict(d["params"])
        self.ema.load_state_dict(d["ema_params"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.step = int(d["step"])
        self.seed = int(d.get("seed", self.seed))
        if "torch_rng" in d:
            torch.set_rng_state(d["torch_rng"])


def make_ema(student: SegmentationModel) -> SegmentationModel:
    ema = SegmentationModel.from_metadata(student.metadata()).to(
        next(student.parameters()).dtype)
    ema.load_state_dict(student.state_dict())
    for p in ema.parameters():
        p.requires_grad_(False)
    return ema.eval()


def make_optimizer(model: SegmentationModel, encoder_lr: float, head_lr: float,
                   betas=(0.9, 0.999), weight_decay: float = 0.01) -> torch.optim.AdamW:
    enc, rest = model.param_groups()
    return torch.optim.AdamW([{"params": enc, "lr": encoder_lr, "initial_lr": encoder_lr},
                              {"params": rest, "lr": head_lr, "initial_lr": head_lr}],
                             betas=tuple(betas), weight_decay=weight_decay)


def teacher_features(teachers: Mapping[str, TeacherHandle], images: torch.Tensor,
                     grid: tuple[int, int]) -> dict[str, TokenFeatureMap]:
    return {k: align_token_grid(h(images), grid) for k, h in teachers.items()}


def _cat_maps(a: Mapping[str, TokenFeatureMap], b: Mapping[str, TokenFeatureMap]):
    return {k: TokenFeatureMap(torch.cat([a[k].data, b[k].data]), a[k].grid, a[k].source)
            for k in a}


def train_step(state: TrainState, labeled: Mapping[str, torch.Tensor],
               unlabeled: Mapping[str, torch.Tensor] | None,
               teachers: Mapping[str, TeacherHandle], cfg: SSLConfig):
    """One optimizer step. Mutates ``state`` and returns (state, LossReport).

    ``labeled``: image (B, 3, H, W) in [0, 1], label (B, H, W).
    ``unlabeled``: weak and strong views (B, 3, H, W), valid (B, H, W), box (B, 5).
    """
    w = cfg.weights
    student, ema = state.student, state.ema
    student.train()
    dtype = next(student.parameters()).dtype
    distill = w.lambda_d > 0 and bool(teachers)
    if distill and set(teachers) != set(student.teachers):
        raise ConfigurationError(
            f"teachers {sorted(teachers)} do not match student translators {student.teachers}")
    use_unlabeled = unlabeled is not None and (w.lambda_u > 0 or distill)

    l_unsup = None
    coverage = 0.0
    fused = False
    translated, targets = {}, {}
    if use_unlabeled:
        u_weak = unlabeled["weak"].to(dtype)
        u_strong = unlabeled["strong"].to(dtype)
        h, wd = u_weak.shape[-2:]
        mix = box_mask(decode_boxes(unlabeled["box"]), h, wd)
        # (a) EMA teacher pseudo-labels from the weak view
        with torch.no_grad():
            ema.eval()
            bundle = pseudo_label(ema.predict(u_weak, cfg.mode), cfg.tau)
        conf = bundle.confidence_mask & unlabeled["valid"].bool()
        # CutMix the strong view with the next sample in the batch, and its targets alike
        x_s = cutmix_tensors(u_strong, u_strong.roll(1, 0), mix)
        bundle = PseudoLabelBundle(cutmix_tensors(bundle.hard_labels, bundle.hard_labels.roll(1, 0), mix),
                                   cutmix_tensors(conf, conf.roll(1, 0), mix))
        coverage = bundle.coverage
        # (b) student on the strong view, with translation/fusion
        res_u = student(x_s, cfg.mode, translate=distill)
        fused = res_u.fused
        l_unsup = unsupervised_loss(res_u.logits, bundle)
        if distill:
            # (c) frozen teachers see the same strong pixels
            translated = res_u.translated
            targets = teacher_features(teachers, x_s, res_u.f_s.grid)

    # (e) labeled batch
    x_l = labeled["image"].to(dtype)
    res_l = student(x_l, cfg.mode, translate=distill and cfg.distill_labeled)
    fused = fused or res_l.fused
    l_sup = supervised_loss(res_l.logits, labeled["label"], cfg.ignore_value)
    if distill and cfg.distill_labeled:
        t_l = teacher_features(teachers, x_l, res_l.f_s.grid)
        if translated:
            translated, targets = _cat_maps(translated, res_l.translated), _cat_maps(targets, t_l)
        else:
            translated, targets = res_l.translated, t_l

    # (d) distillation
    l_distill, per = None, {}
    if distill and translated:
        l_distill, per = distillation_loss(translated, targets)
    if l_unsup is None:
        l_unsup = l_sup.new_zeros(())

    # (f) objective, backward, update
    loss = weighted_total(l_sup, l_unsup, l_distill, w)
    sup, unsup = l_sup.item(), l_unsup.item()
    dist = None if l_distill is None else l_distill.item()
    per = {k: v.item() for k, v in per.items()}
    if not torch.isfinite(loss):
        raise NumericFaultError(
            f"non-finite total loss at step {state.step}: l_sup={sup}, l_unsup={unsup}, "
            f"l_distill={dist}, per_teacher={per}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    # (g) EMA teacher
    ema_update(ema.parameters(), student.parameters(), cfg.ema.momentum)
    report = total_loss(sup, unsup, dist, w, per_teacher=per, coverage=coverage, fused=fused,
                        step=state.step, lr=state.optimizer.param_groups[-1]["lr"])
    state.step += 1
    return state, report
