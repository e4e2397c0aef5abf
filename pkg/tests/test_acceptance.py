"""Acceptance criteria 1-9. Each test records one PASS/FAIL line, listed in the terminal summary."""
import copy
import json
import time

import numpy as np
import pytest
import torch

import oracles
from acceptance_registry import record
from test_metrics import (DEEPGLOBE, DEEPGLOBE_10PCT, LOVEDA, LOVEDA_5PCT, POTSDAM,
                          POTSDAM_1PCT, random_pair)
from mtdseg import cli
from mtdseg.datapipe.loading import batch_loader
from mtdseg.datapipe.manifest import DatasetManifest
from mtdseg.engine import (LossWeights, distillation_loss, ema_update, pseudo_label,
                           supervised_loss, teacher_features, total_loss, train_step,
                           unsupervised_loss, weighted_total)
from mtdseg.metrics import ConfusionMatrix, accumulate, render_table, report_from_iou_row, summarize
from mtdseg.student import (FusionWeights, SegmentationModel, StudentConfig, Translator, fuse,
                            load_checkpoint, model_from_checkpoint)
from mtdseg.teachers import TeacherSpec, TokenFeatureMap, load_teacher
from mtdseg.training import build_run, evaluate, read_log, train


def elementwise_close(a: torch.Tensor, b: torch.Tensor, rel: float = 1e-10) -> bool:
    scale = torch.maximum(torch.ones_like(a), torch.maximum(a.abs(), b.abs()))
    return bool(((a - b).abs() <= rel * scale).all())


def first_batches(run, step=0):
    lab = next(iter(batch_loader(run.labeled, run.labeled_schedule, step, step + 1)))
    unl = next(iter(batch_loader(run.unlabeled, run.unlabeled_schedule, step, step + 1)))
    return lab, unl


# 1. metric oracle

def test_criterion_1_metric_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        pred, label, n = random_pair(rng)
        r = summarize(accumulate(ConfusionMatrix.empty(n), pred, label))
        iou, f1, oa, k, miou, mf1 = oracles.segmentation_scores(pred, label, n)
        diffs = [abs(a - b) for a, b in zip(r.iou_per_class + r.f1_per_class, iou + f1)
                 if not (np.isnan(a) and np.isnan(b))]
        diffs += [abs(r.oa - oa), abs(r.kappa - k), abs(r.miou - miou), abs(r.mf1 - mf1)]
        worst = max(worst, *diffs)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5.0
    assert record(1, ok, f"50 pairs, max |diff| {worst:.1e} (<=1e-9), {elapsed:.2f}s (<5s)")


# 2. published rows

def test_criterion_2_published_rows():
    rows = [(POTSDAM, POTSDAM_1PCT, 76.99), (LOVEDA, LOVEDA_5PCT, 54.89),
            (DEEPGLOBE, DEEPGLOBE_10PCT, 73.48)]
    errs = [abs(report_from_iou_row("r", names, iou, 0.0, 0.0).miou * 100 - stated)
            for names, iou, stated in rows]
    potsdam = report_from_iou_row("Ours 1%", POTSDAM, POTSDAM_1PCT, mf1_pct=83.22,
                                  kappa_value=0.8044)
    table, warnings = render_table([potsdam])
    ok = max(errs) <= 0.005 and potsdam.summary() == "76.99 / 83.22 / 0.8044" and \
        "76.99 / 83.22 / 0.8044" in table and not warnings
    assert record(2, ok, f"row means within {max(errs):.4f} (<=0.005); "
                         f"summary {potsdam.summary()!r}")


# 3. formula fidelity

def test_criterion_3_formula_oracles():
    g = torch.Generator().manual_seed(11)
    B, N, d = 2, 16, 8
    checks = {}

    tr = Translator(d, d).double()
    x = torch.randn(B, N, d, dtype=torch.float64, generator=g)
    checks["translate"] = oracles.close(
        tr(x).tolist(), oracles.translate(x.tolist(), tr.fc1.weight.tolist(), tr.fc1.bias.tolist(),
                                          tr.fc2.weight.tolist(), tr.fc2.bias.tolist()))

    f_s = torch.randn(B, N, d, dtype=torch.float64, generator=g)
    proj = [torch.randn(B, N, d, dtype=torch.float64, generator=g) for _ in range(2)]
    out = fuse(TokenFeatureMap(f_s, (4, 4)), [TokenFeatureMap(p, (4, 4)) for p in proj],
               FusionWeights(0.6, 0.7))
    checks["fuse"] = oracles.close(out.data.tolist(),
                                   oracles.fuse(f_s.tolist(), [p.tolist() for p in proj], 0.6, 0.7))

    s = {k: TokenFeatureMap(torch.randn(B, N, d, dtype=torch.float64, generator=g), (4, 4))
         for k in ("a", "b")}
    t = {k: TokenFeatureMap(torch.randn(B, N, d, dtype=torch.float64, generator=g), (4, 4))
         for k in ("a", "b")}
    tot, per = distillation_loss(s, t)
    ref_tot, ref_per = oracles.distill({k: v.data.tolist() for k, v in s.items()},
                                       {k: v.data.tolist() for k, v in t.items()})
    checks["distill"] = oracles.close(tot.item(), ref_tot) and \
        all(oracles.close(per[k].item(), ref_per[k]) for k in per)

    w = LossWeights(0.2, 0.5, 0.3)
    r = total_loss(0.7, 1.3, 2.9, w)
    checks["total"] = oracles.close(r.total, oracles.total(0.7, 1.3, 2.9, 0.2, 0.5, 0.3))

    theta = torch.randn(B, N, d, dtype=torch.float64, generator=g)
    stud = torch.randn(B, N, d, dtype=torch.float64, generator=g)
    ema = [theta.clone()]
    ema_update(ema, [stud], 0.9)
    checks["ema"] = oracles.close(ema[0].flatten().tolist(),
                                  oracles.ema(theta.flatten().tolist(), stud.flatten().tolist(), 0.9))

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    assert record(3, ok, f"translate/fuse/distill/total/ema at rel 1e-10 "
                         f"(B={B}, N={N}, d={d}); failed: {failed or 'none'}")


# 4. gradient check

DESK = StudentConfig(num_classes=4, embed_dim=32, patch_size=16, depth=4, num_heads=2,
                     pyramid_taps=(0, 1, 2, 3), decoder_channels=32, image_size=64)


def test_criterion_4_gradient_check():
    torch.manual_seed(0)
    teachers = {f"mock{i}": load_teacher(TeacherSpec("mock", 48, 16, seed=i + 1)) for i in range(2)}
    model = SegmentationModel(DESK, {k: 48 for k in teachers}, FusionWeights()).double()
    torch.nn.init.normal_(model.decoder.head[-1].weight, std=0.1)
    g = torch.Generator().manual_seed(1)
    x_l = torch.rand(2, 3, 64, 64, dtype=torch.float64, generator=g)
    y_l = torch.randint(0, 4, (2, 64, 64), generator=g)
    x_u = torch.rand(2, 3, 64, 64, dtype=torch.float64, generator=g)
    bundle = pseudo_label(torch.randn(2, 4, 64, 64, dtype=torch.float64, generator=g) * 3, 0.5)
    targets = teacher_features(teachers, x_u, (4, 4))
    w = LossWeights(1 / 3, 1 / 3, 1 / 3)

    def objective():
        res_u = model(x_u, "fused", translate=True)
        l_d, _ = distillation_loss(res_u.translated, targets)
        l_s = supervised_loss(model(x_l, "fused").logits, y_l)
        return weighted_total(l_s, unsupervised_loss(res_u.logits, bundle), l_d, w), l_d

    named = {n: p for n, p in model.named_parameters() if n.startswith(("translator.", "projector."))}
    picks = []
    rng = np.random.default_rng(4)
    names = sorted(named)
    for _ in range(20):
        n = names[rng.integers(len(names))]
        picks.append((n, int(rng.integers(named[n].numel()))))

    loss, l_d = objective()
    analytic = dict(zip(names, torch.autograd.grad(loss, [named[n] for n in names],
                                                      retain_graph=True)))
    # near-zero gradients are compared on an absolute floor: a ReLU kink crossed inside +-h
    # dominates a central difference of size 1e-7
    h, floor, worst, tiny = 1e-4, 1e-6, 0.0, 0
    for n, i in picks:
        flat = named[n].data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            up = objective()[0].item()
            flat[i] = orig - h
            down = objective()[0].item()
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = analytic[n].view(-1)[i].item()
        tiny += max(abs(a), abs(numeric)) < floor
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, rel)

    everything = dict(model.named_parameters())
    d_grads = torch.autograd.grad(l_d, list(everything.values()), allow_unused=True)
    decoder_absent = all(gr is None for n, gr in zip(everything, d_grads) if n.startswith("decoder."))
    ok = worst <= 1e-3 and decoder_absent
    assert record(4, ok, f"20 translator/projector params ({tiny} below |g| {floor:g}), worst rel err "
                         f"{worst:.1e} (<=1e-3); "
                         f"decoder grads of distillation absent: {decoder_absent}")


# 5. frozen teachers and EMA

@pytest.fixture(scope="module")
def tiny_dinov2(tmp_path_factory):
    transformers = pytest.importorskip("transformers")
    path = tmp_path_factory.mktemp("hf") / "dinov2"
    cfg = transformers.Dinov2Config(image_size=32, patch_size=8, hidden_size=32, num_hidden_layers=1,
                                    num_attention_heads=2, intermediate_size=64)
    transformers.Dinov2Model(cfg).save_pretrained(path)
    return path


def test_criterion_5_frozen_teachers_and_ema(tiny_config, tiny_manifest, tiny_dinov2):
    teachers = [t.model_dump() for t in tiny_config.teachers]
    teachers.append({"kind": "dinov2", "embed_dim": 32, "patch_size": 8,
                     "weights_ref": str(tiny_dinov2)})
    cfg = tiny_config.override(teachers=teachers)
    run = build_run(cfg, tiny_manifest)
    before = {k: h.checksum() for k, h in run.teachers.items()}
    ssl = cfg.ssl_config()
    lab_it = iter(batch_loader(run.labeled, run.labeled_schedule, 0, 50))
    unl_it = iter(batch_loader(run.unlabeled, run.unlabeled_schedule, 0, 50))
    constant = True
    for _ in range(50):
        train_step(run.state, next(lab_it), next(unl_it), run.teachers, ssl)
        constant &= {k: h.checksum() for k, h in run.teachers.items()} == before

    # closed form of repeated EMA updates towards a fixed student, on real model parameters
    ema = [p.detach().double().clone() for p in run.state.ema.parameters()]
    theta0 = [p.clone() for p in ema]
    stud = [p.detach().double() for p in run.state.student.parameters()]
    m, closed = 0.9, True
    for k in range(1, 21):
        ema_update(ema, stud, m)
        closed &= all(elementwise_close(e, m ** k * t + (1 - m ** k) * s)
                      for e, t, s in zip(ema, theta0, stud))

    frozen_cfg = cfg.override(ssl__ema_momentum=1.0)
    frun = build_run(frozen_cfg, tiny_manifest)
    ema0 = copy.deepcopy(frun.state.ema.state_dict())
    for step in range(3):
        lab, unl = first_batches(frun, step)
        train_step(frun.state, lab, unl, frun.teachers, frozen_cfg.ssl_config())
    identical = all(torch.equal(ema0[k], v) for k, v in frun.state.ema.state_dict().items())

    ok = constant and closed and identical
    assert record(5, ok, f"{len(before)} teacher checksums constant over 50 steps: {constant}; "
                         f"EMA closed form k<=20: {closed}; momentum 1 bit-identical: {identical}")


# 6. confidence gate

def test_criterion_6_confidence_gate(tiny_config, tiny_manifest):
    logits = torch.randn(4, 4, 32, 32, generator=torch.Generator().manual_seed(6)) * 4
    taus = (0.5, 0.8, 0.85, 0.9, 0.95, 0.98, 1.0)
    cov = [pseudo_label(logits, t).coverage for t in taus]
    monotone = all(a >= b for a, b in zip(cov, cov[1:]))

    # the zero-initialized head makes the EMA teacher's first logits exactly uniform
    run = build_run(tiny_config.override(ssl__tau=0.95), tiny_manifest)
    lab, unl = first_batches(run)
    with torch.no_grad():
        uniform = torch.count_nonzero(run.state.ema.predict(unl["weak"])) == 0
    _, rep = train_step(run.state, lab, unl, run.teachers, tiny_config.ssl_config())
    completed = run.state.step == 1 and np.isfinite(rep.total)
    ok = monotone and uniform and rep.pseudo_coverage == 0.0 and rep.l_unsup == 0.0 and completed
    assert record(6, ok, f"coverage over tau {taus}: {[round(c, 3) for c in cov]}; uniform logits "
                         f"at tau 0.95 give coverage {rep.pseudo_coverage}, l_unsup {rep.l_unsup}, "
                         f"step completed: {completed}")


# 7. determinism and resume

def test_criterion_7_determinism_and_resume(tiny_config, tiny_manifest, tmp_path):
    cfg = tiny_config.override(optim__max_steps=10, io__checkpoint_every=1000)
    a = read_log(train(cfg.override(io__output_dir=str(tmp_path / "a")), tiny_manifest)["log"])
    b = read_log(train(cfg.override(io__output_dir=str(tmp_path / "b")), tiny_manifest)["log"])
    k = 4
    part = cfg.override(io__output_dir=str(tmp_path / "part"))
    train(part, tiny_manifest, stop_at=k)
    c = read_log(train(part, tiny_manifest, resume_from=True)["log"])
    ok = len(a) == 10 and a == b and c == a and c[k] == a[k]
    assert record(7, ok, f"two seeded 10-step streams identical: {a == b}; interrupted after "
                         f"{k} steps, step {k + 1} matches: {c[k] == a[k]}")


# 8. synthetic end-to-end

@pytest.fixture(scope="module")
def synthetic_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    data, out, cfg = root / "data", root / "out", root / "desk.yaml"
    assert cli.main(["synth", "--root", str(data)]) == 0
    assert cli.main(["config", "--desk", "--root", str(data), "--out", str(out),
                     "--write", str(cfg)]) == 0
    assert cli.main(["split", "--config", str(cfg), "--ratio", "0.1"]) == 0
    return root, cfg, out / "splits" / "synthetic_labeled0.1.jsonl"


def test_criterion_8_synthetic_end_to_end(synthetic_workspace):
    t0 = time.perf_counter()
    root, cfg, manifest_path = synthetic_workspace
    manifest = DatasetManifest.read(manifest_path)
    n_train = len(manifest.select("train"))
    n_labeled = len(manifest.select("train", labeled=True))
    common = ["train", "--config", str(cfg), "--manifest", str(manifest_path), "--steps", "1000"]
    assert cli.main(common + ["--out", str(root / "rs")]) == 0
    assert cli.main(common + ["--lambda-u", "0", "--lambda-d", "0", "--out", str(root / "base")]) == 0

    def held_out_miou(run_dir):
        model = model_from_checkpoint(load_checkpoint(run_dir / "last.pt"), "ema")
        return 100 * evaluate(model, manifest, "test", batch_size=64).miou

    rs, base = held_out_miou(root / "rs"), held_out_miou(root / "base")
    log = read_log(root / "rs" / "train_log.jsonl")
    d50, d1000 = log[49]["l_distill_total"], log[999]["l_distill_total"]
    elapsed = time.perf_counter() - t0
    ok = n_train == 2000 and n_labeled == 200 and rs >= base - 1.0 and d1000 <= 0.5 * d50
    assert record(8, ok, f"{n_train} train tiles, {n_labeled} labeled; test mIoU full {rs:.2f} vs "
                         f"supervised-only {base:.2f} (bound {base - 1.0:.2f}); distillation "
                         f"{d50:.3f} at step 50 -> {d1000:.3f} at step 1000; {elapsed:.0f}s")


# 9. ablation switches

def test_criterion_9_ablation_switches(tiny_config, tiny_manifest, tmp_path):
    path = tiny_config.save(tmp_path / "base.yaml")
    variants = {
        "plain": ["--lambda-d", "0", "--omega-d", "0"],
        "distill": ["--omega-d", "0"],
        "fused": [],
    }
    outcomes = {}
    for name, flags in variants.items():
        args = cli.build_parser().parse_args(["train", "--config", str(path)] + flags)
        cfg = cli._config(args)
        run = build_run(cfg, tiny_manifest)
        student = run.state.student
        seen = []
        hooks = [
            student.encoder.register_forward_hook(
                lambda m, i, o: seen.append({"f_s": o[0][-1].detach().clone(), "proj": []})),
            student.decoder.register_forward_pre_hook(
                lambda m, i: seen[-1].update(deepest=i[0][-1].data.detach().clone())),
        ]
        hooks += [p.register_forward_hook(lambda m, i, o: seen[-1]["proj"].append(o.detach().clone()))
                  for p in student.projector.values()]
        lab, unl = first_batches(run)
        try:
            _, rep = train_step(run.state, lab, unl, run.teachers, cfg.ssl_config())
        finally:
            for h in hooks:
                h.remove()
        fw = cfg.fusion_weights()
        matches = all(torch.allclose(s["deepest"],
                                     fw.omega_s * s["f_s"] + fw.omega_d * sum(s["proj"])
                                     if s["proj"] else s["f_s"], rtol=1e-5, atol=1e-6)
                      for s in seen)
        projected = all(bool(s["proj"]) for s in seen)
        outcomes[name] = (rep.l_distill_total is not None, rep.fused, projected, matches)

    expected = {"plain": (False, False, False, True), "distill": (True, False, False, True),
                "fused": (True, True, True, True)}
    distinct = len({v[:2] for v in outcomes.values()}) == 3
    ok = outcomes == expected and distinct
    assert record(9, ok, "(distill present, fused, decoder saw projections, deepest input checked) "
                         + json.dumps(outcomes))
