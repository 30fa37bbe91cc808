import math

import numpy as np
import pytest

from sr4ir import tensor as T
from sr4ir.data import TRAIN, DatasetSpec, batch_iter
from sr4ir.imaging import DegradationConfig
from sr4ir.losses import NONE, ON_TRAINING_JOINT, PRETRAINED_GENERIC, PRETRAINED_TASK, pixel_loss, task_loss
from sr4ir.nets import NetConfig, ParamSet, init_params, sr_forward, task_forward
from sr4ir.seeding import substream
from sr4ir.tensor import Tensor
from sr4ir.trainer import (AdamW, CorruptCheckpoint, RunReport, SGDMomentum, TrainConfig, Trainer, confusion_matrix,
                           cosine_lr, evaluate, feature_variance, miou_from_confusion, plan_stages, top1)

SPEC = DatasetSpec(num_classes=4, image_size=16, train_count=16, test_count=8)
NET = NetConfig(sr_channels=4, sr_blocks=1, feat_channels=4, feat_stages=2, num_classes=4)


def tiny(scenario="SR4IR", spec=SPEC, net=NET, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 4)
    return Trainer(scenario, net, TrainConfig(**kw), spec)


def scale1():
    spec = DatasetSpec(num_classes=4, image_size=8, train_count=8, test_count=4,
                       degradation=DegradationConfig(scale=1))
    return spec, NetConfig(sr_channels=2, sr_blocks=1, scale=1, feat_channels=3, feat_stages=1, num_classes=4)


# schedule and optimizers

def test_cosine_lr():
    assert cosine_lr(0, 10, 0.3) == 0.3
    assert abs(cosine_lr(10, 10, 0.3)) < 1e-15
    assert abs(cosine_lr(5, 10, 0.3) - 0.15) < 1e-15
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.3)


def test_adamw_one_step_closed_form():
    # 1-parameter linear "SR net" y = w*x under an L1 loss
    w0, x, y, lr, wd, eps = 0.7, 2.0, 3.0, 0.05, 0.1, 1e-8
    with T.precision(np.float64):
        p = ParamSet({"w": np.array([w0])})
        T.backward(T.l1_loss(p["w"] * x, Tensor(np.array([y]))))
        AdamW(p, lr=lr, weight_decay=wd, eps=eps).step()
    g = -x  # sign(w*x - y) * x
    m_hat, v_hat = g, g * g  # bias correction undoes the (1-beta) factors on step 1
    expect = w0 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert abs(p["w"].data[0] - expect) < 1e-7


def test_sgd_momentum_two_steps():
    p = ParamSet({"w": np.array([1.0])})
    opt = SGDMomentum(p, lr=0.1, momentum=0.9)
    for _ in range(2):
        p["w"].grad = np.array([0.5])
        opt.step()
    # buf: 0.5 then 0.9*0.5+0.5
    assert abs(p["w"].data[0] - (1 - 0.1 * 0.5 - 0.1 * 0.95)) < 1e-7


def test_optimizers_refuse_frozen():
    p = ParamSet({"w": np.array([1.0])}).freeze()
    with pytest.raises(RuntimeError):
        AdamW(p).step()
    with pytest.raises(RuntimeError):
        SGDMomentum(p).step()


# metrics

def test_confusion_miou_oracle():
    gt = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([0, 1, 1, 1, 2, 0])
    cm = confusion_matrix(pred, gt, 3)
    # IoU: class0 1/(2+2-1)=1/3, class1 2/(2+3-2)=2/3, class2 1/(2+1-1)=1/2
    assert abs(miou_from_confusion(cm) - (1 / 3 + 2 / 3 + 1 / 2) / 3) < 1e-12
    assert miou_from_confusion(confusion_matrix(gt, gt, 3)) == 1.0
    # class 3 absent from both sides is skipped
    assert miou_from_confusion(confusion_matrix(gt, gt, 4)) == 1.0
    assert miou_from_confusion(confusion_matrix(np.ones(4), np.zeros(4), 2)) == 0.0


def test_top1():
    logits = np.eye(3)[[0, 2, 1, 1]]
    assert top1(logits, np.array([0, 2, 1, 1])) == 1.0
    assert top1(logits, np.array([1, 2, 1, 0])) == 0.5


def test_evaluate_constant_head():
    # a head whose bias dominates predicts class 0 everywhere; the test split
    # of a 4-class dataset holds 2 of each class
    _, feat, head = init_params(NET, 0)
    head["fc.w"].data[...] = 0
    head["fc.b"].data[...] = [10, 0, 0, 0]
    m = evaluate(feat, head, None, "HR_to_T", SPEC)
    assert m.score == 0.25 and m.psnr == math.inf
    assert m.task_loss > 5


def test_collapse_ratio():
    r = RunReport("x", "SR4IR")
    r.trace["feat_variance"] = [1.0, float("nan"), 0.5, 0.05, 0.2]
    assert abs(r.collapse_ratio() - 20) < 1e-12 and r.collapsed()
    r.trace["feat_variance"] = [1.0, 0.2]
    assert not r.collapsed()


# protocol

def test_plan_stages():
    cfg = TrainConfig(epochs=3)
    assert [(s.kind, s.task_input) for s in plan_stages("S_then_T", cfg)] == [("sr_pixel", "HR"), ("task", "SR")]
    assert [s.kind for s in plan_stages("T_then_S", cfg)] == ["task", "sr_task"]
    assert [s.kind for s in plan_stages("SR4IR", TrainConfig(perceptual_source=PRETRAINED_TASK))] == [
        "pretrain", "alternate"]
    assert [s.kind for s in plan_stages("SR4IR", TrainConfig(perceptual_source=ON_TRAINING_JOINT))] == ["joint_tdp"]
    with pytest.raises(ValueError):
        plan_stages("T_plus_S", cfg)


def test_trainer_config_errors():
    with pytest.raises(ValueError):
        tiny("nope")
    with pytest.raises(ValueError, match="scale"):
        tiny(net=NetConfig(scale=2, num_classes=4))
    with pytest.raises(ValueError, match="num_classes"):
        tiny(net=NetConfig(num_classes=8))
    with pytest.raises(ValueError):
        tiny("HR_to_T", perceptual_source=PRETRAINED_TASK)
    with pytest.raises(ValueError, match="tdp_stages"):
        tiny(tdp_stages=3)
    with pytest.raises(ValueError):
        TrainConfig(train_image_set=())
    with pytest.raises(ValueError):
        TrainConfig(tdp_warmup_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig(train_image_set=("AUG",), cqmix_enabled=False).image_members()


def test_phase1_zero_lr_keeps_sr():
    tr = tiny(lr_sr=0.0)
    lr, hr, _ = tr.batch_for(0)
    before = tr.sr.checksum()
    tr.phase1_step(lr, hr, 0, 10, 0.0)
    assert tr.sr.checksum() == before


def test_phase1_warmup_logs_unapplied_tdp():
    tr = tiny()
    lr, hr, _ = tr.batch_for(0)
    out = tr.phase1_step(lr, hr, 0, 10, 1e-3)
    assert not out["tdp_applied"] and out["tdp_loss"] >= 0
    out = tr.phase1_step(lr, hr, 1, 10, 1e-3)
    assert out["tdp_applied"]


def test_cat_size_law():
    for members in [("HR",), ("SR", "HR"), ("SR", "HR", "AUG")]:
        tr = tiny(train_image_set=members)
        lr, hr, y = tr.batch_for(0)
        x, ys = tr.build_cat(lr, hr, y, 0)
        assert len(x) == len(ys) == len(members) * 4
        assert np.array_equal(ys[-4:], y)


def test_phase2_hr_only_is_plain_supervised_step():
    tr = tiny(train_image_set=("HR",))
    ref = tiny(train_image_set=("HR",))
    lr, hr, y = tr.batch_for(0)
    tr.phase2_step(lr, hr, y, 0, 0.03)
    ref.sr.freeze()
    ref._task_train_step(ref.feat, ref.head, ref.opt_task, hr, y, 0.03)
    assert tr.feat.checksum() == ref.feat.checksum() and tr.head.checksum() == ref.head.checksum()


def test_duplication_oracle():
    # scale 1 with a zero tail: the SR member is an exact copy of HR
    spec, net = scale1()
    tr = Trainer("SR4IR", net, TrainConfig(epochs=1, batch_size=4, cqmix_enabled=False,
                                           train_image_set=("SR", "HR")), spec)
    lr, hr, y = tr.batch_for(0)
    x, ys = tr.build_cat(lr, hr, y, 0)
    assert np.array_equal(x[:4], x[4:])

    def grads(inp, labels, reduce_sum):
        with T.precision(np.float64):
            feat = ParamSet({k: v.data for k, v in tr.feat.items()})
            head = ParamSet({k: v.data for k, v in tr.head.items()})
            _, logits = task_forward(feat, head, inp)
            loss = task_loss(logits, labels)
            T.backward(loss * len(labels) if reduce_sum else loss)
        return np.concatenate([p.grad.ravel() for p in list(feat.entries.values()) + list(head.entries.values())])

    single, dup = grads(hr, y, True), grads(x, ys, True)
    assert np.allclose(dup, 2 * single, rtol=1e-10, atol=1e-12)  # summed loss: exactly twice
    assert np.allclose(grads(x, ys, False), grads(hr, y, False), rtol=1e-10, atol=1e-12)  # mean: unchanged


def test_freeze_invariants_every_phase():
    tr = tiny()
    rep = tr.run()
    assert rep.freeze_checks == 2 * tr.total_steps and rep.freeze_violations == 0
    for scen in ("T_then_S", "S_then_T", "HR_to_T"):
        rep = tiny(scen, epochs=1).run()
        assert rep.freeze_violations == 0


def test_warmup_matches_pixel_only_run():
    a = tiny(epochs=5)
    b = tiny(epochs=5, perceptual_source=NONE)
    n = a.total_steps
    warm = math.ceil(0.1 * n)
    for step in range(warm + 1):
        a.step()
        b.step()
        if step < warm:
            assert a.sr.checksum() == b.sr.checksum(), step
    assert a.sr.checksum() != b.sr.checksum()
    assert a.report.trace["tdp_applied"][:warm] == [False] * warm


def test_scale1_hr_and_lr_protocols_agree():
    spec, net = scale1()
    cfg = TrainConfig(epochs=2, batch_size=4)
    a = Trainer("HR_to_T", net, cfg, spec).run()
    b = Trainer("LR_to_T", net, cfg, spec).run()
    assert a.final["score"] == b.final["score"] and a.trace["task_loss"] == b.trace["task_loss"]


def test_s_then_t_stage1_matches_scripted_pixel_run():
    cfg = TrainConfig(epochs=2, batch_size=4, lr_sr=2e-3)
    tr = Trainer("S_then_T", NET, cfg, SPEC)
    n = cfg.epochs * (SPEC.train_count // cfg.batch_size)
    tr.run(max_steps=n)

    sr, _, _ = init_params(NET, cfg.seed)
    opt = AdamW(sr, cfg.lr_sr, weight_decay=cfg.weight_decay)
    t, last = 0, None
    for epoch in range(cfg.epochs):
        es = int(substream(cfg.seed, "epoch", 0, epoch).integers(0, 2 ** 63))
        for lr, hr, _ in batch_iter(SPEC, TRAIN, cfg.batch_size, es):
            sr.zero_grad()
            loss = pixel_loss(sr_forward(sr, lr), hr)
            T.backward(loss)
            opt.lr = cosine_lr(t, n, cfg.lr_sr)
            opt.step()
            last = loss.item()
            t += 1
    assert tr.report.trace["pixel_loss"][n - 1] == last
    assert tr.sr.checksum() == sr.checksum()


def test_s_plus_t_nesting_with_zero_task_lr():
    cfg = TrainConfig(epochs=1, batch_size=4, lr_task=0.0)
    tr = Trainer("S_plus_T", NET, cfg, SPEC)
    feat0 = tr.feat.checksum()
    tr.run()
    assert tr.feat.checksum() == feat0

    sr, feat, head = init_params(NET, cfg.seed)
    feat.freeze()
    head.freeze()
    opt = AdamW(sr, cfg.lr_sr, weight_decay=cfg.weight_decay)
    n = SPEC.train_count // cfg.batch_size
    es = int(substream(cfg.seed, "epoch", 0, 0).integers(0, 2 ** 63))
    for t, (lr, hr, y) in enumerate(batch_iter(SPEC, TRAIN, cfg.batch_size, es)):
        sr.zero_grad()
        out = sr_forward(sr, lr)
        _, logits = task_forward(feat, head, out)
        T.backward(pixel_loss(out, hr) + task_loss(logits, y))
        opt.lr = cosine_lr(t, n, cfg.lr_sr)
        opt.step()
    assert np.allclose(np.concatenate([v.data.ravel() for v in sr.entries.values()]),
                       np.concatenate([v.data.ravel() for v in tr.sr.entries.values()]), atol=1e-6)


def test_report_rows_and_determinism():
    a, b = tiny(epochs=2).run(), tiny(epochs=2).run()
    assert [r["epoch"] for r in a.rows] == [1, 2]
    assert a.rows == b.rows and a.trace == b.trace and a.final == b.final
    assert 0 <= a.final["score"] <= 1


def test_pretrained_sources_run():
    for src in (PRETRAINED_TASK, PRETRAINED_GENERIC):
        tr = tiny(epochs=1, perceptual_source=src)
        rep = tr.run()
        assert tr.percept.frozen_params is not None and tr.percept.frozen_params.frozen
        assert [r["epoch"] for r in rep.rows] == [1]  # pretrain stage not reported


def test_checkpoint_resume_equivalence(tmp_path):
    full = tiny(epochs=3)
    full.run(max_steps=12)
    part = tiny(epochs=3)
    part.run(max_steps=5)
    path = tmp_path / "c.sr4c"
    part.save_checkpoint(path)
    resumed = tiny(epochs=3)
    resumed.load_checkpoint(path)
    assert resumed.sr.checksum() == part.sr.checksum() and resumed.step_count == 5
    resumed.run(max_steps=7)
    for k in ("pixel_loss", "tdp_loss", "task_loss", "feat_variance"):
        assert np.array_equal(np.array(resumed.report.trace[k]), np.array(full.report.trace[k]), equal_nan=True)
    assert resumed.feat.checksum() == full.feat.checksum()


def test_checkpoint_corruption_leaves_state(tmp_path):
    tr = tiny()
    tr.run(max_steps=2)
    path = tmp_path / "c.sr4c"
    tr.save_checkpoint(path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-20])
    fresh = tiny()
    before = fresh.sr.checksum()
    with pytest.raises(CorruptCheckpoint):
        fresh.load_checkpoint(path)
    assert fresh.sr.checksum() == before and fresh.step_count == 0
    path.write_bytes(raw)
    with pytest.raises(CorruptCheckpoint):
        tiny("HR_to_T").load_checkpoint(tmp_path / "missing.sr4c")
    with pytest.raises(CorruptCheckpoint, match="match"):
        Trainer("SR4IR", NetConfig(sr_channels=2, sr_blocks=1, feat_channels=4, feat_stages=2, num_classes=4),
                TrainConfig(epochs=2, batch_size=4), SPEC).load_checkpoint(path)


def test_segmentation_run():
    net = NetConfig(sr_channels=2, sr_blocks=1, feat_channels=4, feat_stages=2, num_classes=5,
                    task_kind="segmentation")
    rep = Trainer("SR4IR", net, TrainConfig(epochs=1, batch_size=4), SPEC).run()
    assert 0 <= rep.final["score"] <= 1 and rep.final["kind"] == "segmentation"


def test_feature_variance_scale_free():
    f = np.random.default_rng(0).random((8, 4, 2, 2))
    v = feature_variance(f)
    assert 0 < v < 1 and abs(feature_variance(100 * f) - v) < 1e-12
    assert feature_variance(np.ones((8, 4, 2, 2))) == 0.0
    assert feature_variance(np.zeros((8, 4, 2, 2))) == 0.0
    # oracle: across-batch variance over mean square, by loops
    num = den = 0.0
    for c in range(4):
        for y in range(2):
            for x in range(2):
                col = f[:, c, y, x]
                num += np.mean((col - col.mean()) ** 2)
                den += np.mean(col ** 2)
    assert abs(v - num / den) < 1e-12
