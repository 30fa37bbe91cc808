"""Training scenarios, alternate SR/task optimisation, evaluation and checkpoints.

Every scenario is a list of stages. A stage runs ``epochs`` passes over the
training split with one kind of step. The global step counter walks through
the stages in order, which is all a checkpoint needs to resume exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cqmix import make_mask, mix
from .data import TRAIN, TEST, DatasetSpec, batch_iter, epoch_order, load_split, steps_per_epoch
from .imaging import bilinear_upsample, psnr_per_image
from .losses import (NONE, ON_TRAINING_ALTERNATE, ON_TRAINING_JOINT, PERCEPTUAL_KINDS, PRETRAINED_GENERIC,
                     PRETRAINED_TASK, PerceptualSource, perceptual_from_source, pixel_loss, task_loss)
from .nets import (CLASSIFICATION, SEGMENTATION, NetConfig, ParamSet, init_feat, init_head, init_params,
                   feat_forward, read_entries, sr_forward, task_forward, write_entries)
from .seeding import substream
from .tensor import Tensor

HR_TO_T = "HR_to_T"
LR_TO_T = "LR_to_T"
S_THEN_T = "S_then_T"
T_THEN_S = "T_then_S"
S_PLUS_T = "S_plus_T"
SR4IR = "SR4IR"
SCENARIOS = (HR_TO_T, LR_TO_T, S_THEN_T, T_THEN_S, S_PLUS_T, SR4IR)

IMAGE_SETS = ("SR", "HR", "AUG")
CHECKPOINT_VERSION = 1

CSV_FIELDS = ["run_id", "scenario", "epoch", "lr_sr", "lr_task", "pixel_loss", "tdp_loss", "task_loss",
              "feat_variance", "test_top1_or_miou", "test_psnr"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    # full-scale values are 1e-4 (SR) and 2e-2 / 3e-2 (task)
    lr_sr: float = 1e-3
    lr_task: float = 3e-2
    optimizer_sr: str = "adamw"
    optimizer_task: str = "sgd_momentum"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    tdp_warmup_fraction: float = 0.1
    tdp_stages: int = 0  # extractor stages feeding the perceptual term; 0 means all (final feature)
    perceptual_source: str = ON_TRAINING_ALTERNATE
    cqmix_enabled: bool = True
    n_patches: int = 16
    p_hr: float = 0.5
    train_image_set: tuple[str, ...] = ("SR", "HR", "AUG")
    pixel_weight: float = 1.0
    tdp_weight: float = 1.0
    task_weight: float = 1.0
    phase1_steps: int = 1
    phase2_steps: int = 1
    pretrain_epochs: int = 0  # 0 means: same as epochs
    eval_every: int = 1
    check_freeze: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_image_set", tuple(self.train_image_set))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("train.epochs and train.batch_size must be >= 1")
        if not 0.0 <= self.tdp_warmup_fraction <= 1.0:
            raise ValueError("train.tdp_warmup_fraction must lie in [0,1]")
        if self.optimizer_sr != "adamw":
            raise ValueError("train.optimizer_sr must be adamw")
        if self.optimizer_task != "sgd_momentum":
            raise ValueError("train.optimizer_task must be sgd_momentum")
        if self.perceptual_source not in PERCEPTUAL_KINDS:
            raise ValueError(f"train.perceptual_source must be one of {PERCEPTUAL_KINDS}")
        if not self.train_image_set:
            raise ValueError("train.train_image_set must not be empty")
        bad = [m for m in self.train_image_set if m not in IMAGE_SETS]
        if bad or len(set(self.train_image_set)) != len(self.train_image_set):
            raise ValueError(f"train.train_image_set must be distinct members of {IMAGE_SETS}")
        if self.tdp_stages < 0:
            raise ValueError("train.tdp_stages must be >= 0")
        if self.phase1_steps < 1 or self.phase2_steps < 1:
            raise ValueError("train.phase1_steps and train.phase2_steps must be >= 1")
        if self.lr_sr < 0 or self.lr_task < 0:
            raise ValueError("learning rates must be >= 0")

    def image_members(self) -> tuple[str, ...]:
        """Members of the task-training concatenation, in canonical order."""
        keep = [m for m in IMAGE_SETS if m in self.train_image_set]
        if not self.cqmix_enabled:
            keep = [m for m in keep if m != "AUG"]
        if not keep:
            raise ValueError("train_image_set is empty once CQMix is disabled")
        return tuple(keep)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr0 * 0.5 * (1 + math.cos(math.pi * t / total))


# optimizers ------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay (bias-corrected moments)."""

    def __init__(self, params: ParamSet, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(v.data)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v.data)) for k, v in params.items())

    def step(self):
        if self.params.frozen:
            raise RuntimeError("optimizer step on frozen parameters")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        out["t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, state):
        for k in self.m:
            self.m[k][...] = state[f"m/{k}"]
            self.v[k][...] = state[f"v/{k}"]
        self.t = int(state["t"][0])


class SGDMomentum:
    def __init__(self, params: ParamSet, lr=1e-2, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.t = 0
        self.buf = OrderedDict((k, np.zeros_like(v.data)) for k, v in params.items())

    def step(self):
        if self.params.frozen:
            raise RuntimeError("optimizer step on frozen parameters")
        for k, p in self.params.items():
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            b = self.buf[k]
            if self.t == 0:
                b[...] = g
            else:
                b *= self.momentum
                b += g
            p.data -= self.lr * b
        self.t += 1

    def state(self):
        out = OrderedDict((f"buf/{k}", b) for k, b in self.buf.items())
        out["t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, state):
        for k in self.buf:
            self.buf[k][...] = state[f"buf/{k}"]
        self.t = int(state["t"][0])


class TaskOptimizer:
    """SGD with momentum over the extractor and head together."""

    def __init__(self, feat: ParamSet, head: ParamSet, cfg: TrainConfig):
        self.feat = SGDMomentum(feat, cfg.lr_task, cfg.momentum, cfg.weight_decay)
        self.head = SGDMomentum(head, cfg.lr_task, cfg.momentum, cfg.weight_decay)

    @property
    def lr(self):
        return self.feat.lr

    @lr.setter
    def lr(self, value):
        self.feat.lr = self.head.lr = value

    def step(self):
        self.feat.step()
        self.head.step()

    def state(self):
        out = OrderedDict()
        for name, opt in (("feat", self.feat), ("head", self.head)):
            for k, v in opt.state().items():
                out[f"{name}/{k}"] = v
        return out

    def load_state(self, state):
        for name, opt in (("feat", self.feat), ("head", self.head)):
            prefix = f"{name}/"
            opt.load_state({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


# metrics ------------------------------------------------------------------------

def feature_variance(feat: np.ndarray) -> float:
    """Across-batch variance as a share of the features' mean square.

    Lies in [0, 1]; zero means the extractor maps every input to the same
    output. Dividing by the energy keeps ordinary shrinkage of activations
    (weight decay, dead units) from reading as collapse.
    """
    f = feat.astype(np.float64)
    energy = float(np.mean(f * f))
    if energy == 0.0:
        return 0.0
    return float(np.mean(np.var(f, axis=0))) / energy


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    idx = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    if not present.any():
        return float("nan")
    return float(np.mean(inter[present] / union[present]))


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class Metrics:
    score: float  # top-1 accuracy or mIoU
    psnr: float
    task_loss: float
    pixel_loss: float
    kind: str = CLASSIFICATION


def _task_input(scenario: str, sr: ParamSet | None, lr: np.ndarray, hr: np.ndarray) -> np.ndarray:
    if scenario == HR_TO_T:
        return hr
    if scenario == LR_TO_T:
        return bilinear_upsample(lr, hr.shape[-1] // lr.shape[-1])
    return sr_forward(sr, lr).data


def evaluate(feat: ParamSet, head: ParamSet, sr: ParamSet | None, scenario: str, spec: DatasetSpec,
             task_kind: str = CLASSIFICATION, batch_size: int = 50, split: str = TEST) -> Metrics:
    """Top-1 or mIoU of the task network on the test split, plus PSNR of its input."""
    num_classes = (head["fc.w"].shape[1] if "fc.w" in head else head["cls.w"].shape[0])
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    correct = total = 0
    psnrs, tl, pl, weights = [], 0.0, 0.0, 0
    with T.no_grad():
        for lr, hr, y in batch_iter(spec, split, min(batch_size, spec.split_count(split)), None,
                                    task_kind, drop_last=False):
            x = _task_input(scenario, sr, lr, hr)
            _, logits = task_forward(feat, head, x)
            n = len(y)
            tl += task_loss(logits, y, task_kind).item() * n
            pl += float(np.mean(np.abs(x.astype(np.float64) - hr))) * n
            weights += n
            psnrs.extend(psnr_per_image(x, hr))
            pred = np.argmax(logits.data, axis=1)
            if task_kind == SEGMENTATION:
                cm += confusion_matrix(pred, y, num_classes)
            else:
                correct += int(np.sum(pred == y))
                total += n
    if weights == 0:
        raise ValueError("empty test set")
    score = miou_from_confusion(cm) if task_kind == SEGMENTATION else correct / total
    return Metrics(score, float(np.mean(psnrs)), tl / weights, pl / weights, task_kind)


# run state ----------------------------------------------------------------------

@dataclass
class Stage:
    kind: str  # task | sr_pixel | sr_task | joint | alternate | joint_tdp | pretrain
    epochs: int
    task_input: str = "HR"  # for task stages: HR | LR | SR
    reported: bool = True


def plan_stages(scenario: str, cfg: TrainConfig) -> list[Stage]:
    E = cfg.epochs
    pre = cfg.pretrain_epochs or E
    if scenario == HR_TO_T:
        return [Stage("task", E, "HR")]
    if scenario == LR_TO_T:
        return [Stage("task", E, "LR")]
    if scenario == S_THEN_T:
        return [Stage("sr_pixel", E), Stage("task", E, "SR")]
    if scenario == T_THEN_S:
        return [Stage("task", E, "HR"), Stage("sr_task", E)]
    if scenario == S_PLUS_T:
        return [Stage("joint", E)]
    if scenario == SR4IR:
        stages = []
        if cfg.perceptual_source in (PRETRAINED_TASK, PRETRAINED_GENERIC):
            stages.append(Stage("pretrain", pre, reported=False))
        if cfg.perceptual_source == ON_TRAINING_JOINT:
            stages.append(Stage("joint_tdp", E))
        else:
            stages.append(Stage("alternate", E))
        return stages
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass
class RunReport:
    run_id: str
    scenario: str
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    trace: dict = field(default_factory=lambda: {"pixel_loss": [], "tdp_loss": [], "tdp_applied": [],
                                                 "task_loss": [], "feat_variance": []})
    freeze_checks: int = 0
    freeze_violations: int = 0

    def collapse_ratio(self) -> float:
        """Initial feature variance over the smallest one seen later."""
        fv = [v for v in self.trace["feat_variance"] if not math.isnan(v)]
        if not fv:
            return float("nan")
        low = min(fv)
        return math.inf if low == 0 else fv[0] / low

    def collapsed(self, factor: float = 10.0) -> bool:
        return self.collapse_ratio() >= factor


class Trainer:
    """Owns the parameters, optimizers and step counter of one run."""

    def __init__(self, scenario: str, net_cfg: NetConfig, train_cfg: TrainConfig, spec: DatasetSpec,
                 run_id: str | None = None):
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        if net_cfg.scale != spec.degradation.scale:
            raise ValueError(f"net.scale {net_cfg.scale} != degradation scale {spec.degradation.scale}")
        expected = spec.num_classes + (1 if net_cfg.task_kind == SEGMENTATION else 0)
        if net_cfg.num_classes != expected:
            raise ValueError(f"net.num_classes must be {expected} for {net_cfg.task_kind} on this dataset")
        if train_cfg.perceptual_source == PRETRAINED_GENERIC and net_cfg.task_kind != CLASSIFICATION:
            raise ValueError("pretrained_generic perceptual source needs image-level labels (classification)")
        if train_cfg.tdp_stages > net_cfg.feat_stages:
            raise ValueError(f"train.tdp_stages {train_cfg.tdp_stages} exceeds net.feat_stages {net_cfg.feat_stages}")
        if scenario != SR4IR and train_cfg.perceptual_source not in (ON_TRAINING_ALTERNATE, NONE):
            raise ValueError(f"perceptual_source {train_cfg.perceptual_source} only applies to SR4IR")
        self.scenario = scenario
        self.net_cfg = net_cfg
        self.cfg = train_cfg
        self.spec = spec
        self.run_id = run_id or f"{scenario}-s{train_cfg.seed}"
        self.task_kind = net_cfg.task_kind
        self.sr, self.feat, self.head = init_params(net_cfg, train_cfg.seed)
        self.opt_sr = AdamW(self.sr, train_cfg.lr_sr, weight_decay=train_cfg.weight_decay)
        self.opt_task = TaskOptimizer(self.feat, self.head, train_cfg)
        self.stages = plan_stages(scenario, train_cfg)
        self.spe = steps_per_epoch(spec, train_cfg.batch_size)
        if self.spe < 1:
            raise ValueError("batch_size larger than the training split")
        self.step_count = 0
        self._order_key, self._order = None, None
        self.report = RunReport(self.run_id, scenario)
        self._accum = self._empty_accum()
        self.percept = PerceptualSource(train_cfg.perceptual_source if scenario == SR4IR else NONE)
        self.tdp_stages = train_cfg.tdp_stages or None
        self.pre_feat = self.pre_head = self.opt_pre = None
        if any(s.kind == "pretrain" for s in self.stages):
            pcfg = NetConfig(**{**asdict(net_cfg), "num_classes": self._pretrain_classes()})
            self.pre_feat = init_feat(pcfg, substream(train_cfg.seed, "init", "pretrain_feat"))
            self.pre_head = init_head(pcfg, substream(train_cfg.seed, "init", "pretrain_head"))
            self.opt_pre = TaskOptimizer(self.pre_feat, self.pre_head, train_cfg)

    # bookkeeping ---------------------------------------------------------------

    def _pretrain_classes(self) -> int:
        if self.cfg.perceptual_source == PRETRAINED_GENERIC:
            return 6
        return self.net_cfg.num_classes

    @staticmethod
    def _empty_accum():
        return {"pixel_loss": [0.0, 0], "tdp_loss": [0.0, 0], "task_loss": [0.0, 0], "feat_variance": [0.0, 0]}

    @property
    def total_steps(self) -> int:
        return sum(s.epochs for s in self.stages) * self.spe

    def done(self) -> bool:
        return self.step_count >= self.total_steps

    def locate(self, step: int):
        """(stage index, step within stage, stage length) for a global step."""
        start = 0
        for i, s in enumerate(self.stages):
            n = s.epochs * self.spe
            if step < start + n:
                return i, step - start, n
            start += n
        raise IndexError("step past the end of the run")

    def epoch_seed(self, stage_idx: int, epoch: int) -> int:
        return int(substream(self.cfg.seed, "epoch", stage_idx, epoch).integers(0, 2 ** 63))

    def batch_for(self, step: int):
        """``(lr, hr, y)`` for a global step, recomputed from the seeds alone."""
        si, t, _ = self.locate(step)
        epoch, pos = divmod(t, self.spe)
        key = (si, epoch)
        if self._order_key != key:
            self._order = epoch_order(self.spec.train_count, self.epoch_seed(si, epoch))
            self._order_key = key
        data = load_split(self.spec, TRAIN)
        bs = self.cfg.batch_size
        idx = self._order[pos * bs:(pos + 1) * bs]
        if self.stages[si].kind == "pretrain" and self.cfg.perceptual_source == PRETRAINED_GENERIC:
            y = data.generic[idx]
        else:
            y = data.targets(self.task_kind)[idx]
        return data.lr[idx], data.hr[idx], y

    def _log(self, name: str, value):
        self.report.trace[name].append(value)
        if value is not None and not (isinstance(value, float) and math.isnan(value)):
            acc = self._accum[name]
            acc[0] += float(value)
            acc[1] += 1

    # steps -----------------------------------------------------------------------

    def _task_train_step(self, feat, head, opt, x, y, lr_task):
        feat.unfreeze()
        head.unfreeze()
        feat.zero_grad()
        head.zero_grad()
        f, logits = task_forward(feat, head, x)
        loss = task_loss(logits, y, self.task_kind)
        T.backward(loss)
        opt.lr = lr_task
        opt.step()
        return loss.item(), feature_variance(f.data)

    def phase1_step(self, lr, hr, t: int, t_total: int, lr_sr: float) -> dict:
        """One AdamW step on the SR network with the task network frozen."""
        self.feat.freeze()
        self.head.freeze()
        self.sr.unfreeze()
        self.sr.zero_grad()
        sr = sr_forward(self.sr, lr)
        pix = pixel_loss(sr, hr)
        applied = t >= self.cfg.tdp_warmup_fraction * t_total and self.percept.kind != NONE
        if applied:
            tdp = perceptual_from_source(self.percept, self.feat, sr, hr, self.tdp_stages)
            loss = pix * self.cfg.pixel_weight + tdp * self.cfg.tdp_weight
            tdp_val = tdp.item()
        else:
            loss = pix * self.cfg.pixel_weight if self.cfg.pixel_weight != 1.0 else pix
            tdp_val = float("nan")
            if self.percept.kind != NONE:
                with T.no_grad():
                    tdp_val = perceptual_from_source(self.percept, self.feat, Tensor(sr.data), hr,
                                                     self.tdp_stages).item()
        T.backward(loss)
        self.opt_sr.lr = lr_sr
        self.opt_sr.step()
        return {"pixel_loss": pix.item(), "tdp_loss": tdp_val, "tdp_applied": bool(applied)}

    def build_cat(self, lr, hr, y, step: int):
        """Concatenate the configured SR / HR / CQMix members along the batch axis."""
        members = self.cfg.image_members()
        parts = {}
        if "SR" in members or "AUG" in members:
            with T.no_grad():
                parts["SR"] = sr_forward(self.sr, lr).data
        parts["HR"] = hr
        if "AUG" in members:
            H, W = hr.shape[2:]
            m = make_mask(len(hr), H, W, self.cfg.n_patches, self.cfg.p_hr,
                          rng=substream(self.cfg.seed, "cqmix", step))
            parts["AUG"] = mix(hr, parts["SR"], m).data
        x = np.concatenate([parts[k] for k in members])
        ys = np.concatenate([y] * len(members))
        return x, ys

    def phase2_step(self, lr, hr, y, step: int, lr_task: float) -> dict:
        """One SGD step on the task network with the SR network frozen."""
        self.sr.freeze()
        x, ys = self.build_cat(lr, hr, y, step)
        loss, fv = self._task_train_step(self.feat, self.head, self.opt_task, x, ys, lr_task)
        return {"task_loss": loss, "feat_variance": fv}

    def _checksums(self, *sets):
        return [s.checksum() for s in sets] if self.cfg.check_freeze else None

    def _verify(self, before, *sets):
        if before is None:
            return
        after = [s.checksum() for s in sets]
        self.report.freeze_checks += 1
        if after != before:
            self.report.freeze_violations += 1

    def step(self) -> dict:
        """Run the next global step; returns the logged values."""
        si, t, n = self.locate(self.step_count)
        stage = self.stages[si]
        lr_sr = cosine_lr(t, n, self.cfg.lr_sr)
        lr_task = cosine_lr(t, n, self.cfg.lr_task)
        lr, hr, y = self.batch_for(self.step_count)
        out = {"pixel_loss": float("nan"), "tdp_loss": float("nan"), "tdp_applied": False,
               "task_loss": float("nan"), "feat_variance": float("nan")}
        if stage.kind == "task":
            self.sr.freeze()
            x = hr
            if stage.task_input == "LR":
                x = bilinear_upsample(lr, self.net_cfg.scale)
            elif stage.task_input == "SR":
                with T.no_grad():
                    x = sr_forward(self.sr, lr).data
            before = self._checksums(self.sr)
            out["task_loss"], out["feat_variance"] = self._task_train_step(
                self.feat, self.head, self.opt_task, x, y, lr_task)
            self._verify(before, self.sr)
        elif stage.kind == "pretrain":
            out["task_loss"], out["feat_variance"] = self._task_train_step(
                self.pre_feat, self.pre_head, self.opt_pre, hr, y, lr_task)
            if t == n - 1:
                self.pre_feat.freeze()
                self.percept = PerceptualSource(self.cfg.perceptual_source, self.pre_feat)
        elif stage.kind == "sr_pixel":
            self.feat.freeze()
            self.head.freeze()
            self.sr.unfreeze()
            self.sr.zero_grad()
            pix = pixel_loss(sr_forward(self.sr, lr), hr)
            T.backward(pix)
            self.opt_sr.lr = lr_sr
            self.opt_sr.step()
            out["pixel_loss"] = pix.item()
        elif stage.kind == "sr_task":
            self.feat.freeze()
            self.head.freeze()
            self.sr.unfreeze()
            self.sr.zero_grad()
            before = self._checksums(self.feat, self.head)
            sr = sr_forward(self.sr, lr)
            pix = pixel_loss(sr, hr)
            _, logits = task_forward(self.feat, self.head, sr)
            tl = task_loss(logits, y, self.task_kind)
            T.backward(pix * self.cfg.pixel_weight + tl * self.cfg.task_weight)
            self.opt_sr.lr = lr_sr
            self.opt_sr.step()
            self._verify(before, self.feat, self.head)
            out["pixel_loss"], out["task_loss"] = pix.item(), tl.item()
        elif stage.kind == "joint":
            for p in (self.sr, self.feat, self.head):
                p.unfreeze()
                p.zero_grad()
            sr = sr_forward(self.sr, lr)
            pix = pixel_loss(sr, hr)
            f, logits = task_forward(self.feat, self.head, sr)
            tl = task_loss(logits, y, self.task_kind)
            T.backward(pix * self.cfg.pixel_weight + tl * self.cfg.task_weight)
            self.opt_sr.lr = lr_sr
            self.opt_sr.step()
            self.opt_task.lr = lr_task
            self.opt_task.step()
            out.update(pixel_loss=pix.item(), task_loss=tl.item(), feat_variance=feature_variance(f.data))
        elif stage.kind == "alternate":
            for _ in range(self.cfg.phase1_steps):
                before = self._checksums(self.feat, self.head)
                out.update(self.phase1_step(lr, hr, t, n, lr_sr))
                self._verify(before, self.feat, self.head)
            for _ in range(self.cfg.phase2_steps):
                before = self._checksums(self.sr)
                out.update(self.phase2_step(lr, hr, y, self.step_count, lr_task))
                self._verify(before, self.sr)
        elif stage.kind == "joint_tdp":
            out.update(self._joint_tdp_step(lr, hr, y, t, n, lr_sr, lr_task))
        else:
            raise ValueError(f"unknown stage kind {stage.kind}")

        for k in ("pixel_loss", "tdp_loss", "task_loss", "feat_variance"):
            self._log(k, out[k])
        self.report.trace["tdp_applied"].append(out["tdp_applied"])
        self.step_count += 1
        if (self.step_count - self._stage_start(si)) % self.spe == 0:
            self._end_epoch(si, (t + 1) // self.spe, lr_sr, lr_task)
        return out

    def _joint_tdp_step(self, lr, hr, y, t, n, lr_sr, lr_task):
        """Perceptual loss through a trainable extractor, everything updated together."""
        for p in (self.sr, self.feat, self.head):
            p.unfreeze()
            p.zero_grad()
        sr = sr_forward(self.sr, lr)
        pix = pixel_loss(sr, hr)
        applied = t >= self.cfg.tdp_warmup_fraction * n
        members = self.cfg.image_members()
        parts = {"SR": sr, "HR": Tensor(hr)}
        if "AUG" in members:
            H, W = hr.shape[2:]
            m = make_mask(len(hr), H, W, self.cfg.n_patches, self.cfg.p_hr,
                          rng=substream(self.cfg.seed, "cqmix", self.step_count))
            parts["AUG"] = mix(hr, sr, m)
        x = T.concat([parts[k] for k in members])
        f, logits = task_forward(self.feat, self.head, x)
        tl = task_loss(logits, np.concatenate([y] * len(members)), self.task_kind)
        loss = pix * self.cfg.pixel_weight + tl * self.cfg.task_weight
        if applied:
            tdp = perceptual_from_source(self.percept, self.feat, sr, hr, self.tdp_stages)
            loss = loss + tdp * self.cfg.tdp_weight
            tdp_val = tdp.item()
        else:
            with T.no_grad():
                tdp_val = T.l1_loss(feat_forward(self.feat, sr.data, self.tdp_stages),
                                    feat_forward(self.feat, hr, self.tdp_stages)).item()
        T.backward(loss)
        self.opt_sr.lr = lr_sr
        self.opt_sr.step()
        self.opt_task.lr = lr_task
        self.opt_task.step()
        return {"pixel_loss": pix.item(), "tdp_loss": tdp_val, "tdp_applied": bool(applied),
                "task_loss": tl.item(), "feat_variance": feature_variance(f.data)}

    def _stage_start(self, si: int) -> int:
        return sum(s.epochs for s in self.stages[:si]) * self.spe

    def _end_epoch(self, si: int, epoch_in_stage: int, lr_sr: float, lr_task: float):
        means = {k: (a[0] / a[1] if a[1] else float("nan")) for k, a in self._accum.items()}
        self._accum = self._empty_accum()
        if not self.stages[si].reported:
            return
        global_epoch = sum(s.epochs for s in self.stages[:si] if s.reported) + epoch_in_stage
        last = self.step_count >= self.total_steps
        metrics = None
        if last or (self.cfg.eval_every and global_epoch % self.cfg.eval_every == 0):
            metrics = self.evaluate()
        row = {"run_id": self.run_id, "scenario": self.scenario, "epoch": global_epoch,
               "lr_sr": lr_sr, "lr_task": lr_task, **means,
               "test_top1_or_miou": metrics.score if metrics else float("nan"),
               "test_psnr": metrics.psnr if metrics else float("nan")}
        self.report.rows.append(row)
        if last:
            self.report.final = asdict(metrics)

    def evaluate(self, split: str = TEST) -> Metrics:
        return evaluate(self.feat, self.head, self.sr, self.scenario, self.spec, self.task_kind, split=split)

    def run(self, max_steps: int | None = None, on_epoch=None) -> RunReport:
        limit = self.total_steps if max_steps is None else min(self.total_steps, self.step_count + max_steps)
        while self.step_count < limit:
            n_rows = len(self.report.rows)
            self.step()
            if on_epoch is not None and len(self.report.rows) > n_rows:
                on_epoch(self)
        return self.report

    # checkpoints -----------------------------------------------------------

    def state_entries(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        out["meta/version"] = np.array([CHECKPOINT_VERSION], dtype=np.float32)
        for prefix, ps in (("sr", self.sr), ("feat", self.feat), ("head", self.head)):
            for k, v in ps.items():
                out[f"{prefix}/{k}"] = v.data
        for k, v in self.opt_sr.state().items():
            out[f"opt_sr/{k}"] = v
        for k, v in self.opt_task.state().items():
            out[f"opt_task/{k}"] = v
        if self.pre_feat is not None:
            for prefix, ps in (("pre_feat", self.pre_feat), ("pre_head", self.pre_head)):
                for k, v in ps.items():
                    out[f"{prefix}/{k}"] = v.data
            for k, v in self.opt_pre.state().items():
                out[f"opt_pre/{k}"] = v
        return out

    def save_checkpoint(self, path) -> None:
        """Binary SR4C tensors + u64 step, with a JSON sidecar for the report."""
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            write_entries(f, self.state_entries())
            f.write(struct.pack("<Q", self.step_count))
        side = {"version": CHECKPOINT_VERSION, "step": self.step_count, "run_id": self.run_id,
                "scenario": self.scenario, "report": asdict(self.report), "accum": self._accum}
        with open(f"{path}.json.tmp", "w") as f:
            json.dump(side, f)
        os.replace(tmp, path)
        os.replace(f"{path}.json.tmp", f"{path}.json")

    def load_checkpoint(self, path) -> None:
        """Restore a checkpoint written by the same configuration.

        Everything is parsed and validated before any state is touched.
        """
        try:
            with open(path, "rb") as f:
                entries = read_entries(f)
                raw = f.read(8)
                if len(raw) != 8:
                    raise ValueError("missing step counter")
                (step,) = struct.unpack("<Q", raw)
                if f.read(1):
                    raise ValueError("trailing bytes")
            with open(f"{path}.json") as f:
                side = json.load(f)
        except (ValueError, OSError, struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptCheckpoint(f"corrupt checkpoint {path}: {exc}") from exc
        version = entries.get("meta/version")
        if version is None or int(version[0]) != CHECKPOINT_VERSION or side.get("version") != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"checkpoint version mismatch in {path}")
        current = self.state_entries()
        if list(current) != list(entries):
            raise CorruptCheckpoint(f"checkpoint {path} does not match this run's parameters")
        for k, v in current.items():
            if v.shape != entries[k].shape:
                raise CorruptCheckpoint(f"shape mismatch for {k} in {path}")
        if side.get("step") != step or step > self.total_steps:
            raise CorruptCheckpoint(f"inconsistent step counter in {path}")

        def group(prefix):
            return OrderedDict((k[len(prefix) + 1:], v) for k, v in entries.items() if k.startswith(prefix + "/"))

        self.sr.load_arrays(group("sr"))
        self.feat.load_arrays(group("feat"))
        self.head.load_arrays(group("head"))
        self.opt_sr.load_state(group("opt_sr"))
        self.opt_task.load_state(group("opt_task"))
        if self.pre_feat is not None:
            self.pre_feat.load_arrays(group("pre_feat"))
            self.pre_head.load_arrays(group("pre_head"))
            self.opt_pre.load_state(group("opt_pre"))
            pre_end = self.stages[0].epochs * self.spe
            if step >= pre_end:
                self.pre_feat.freeze()
                self.percept = PerceptualSource(self.cfg.perceptual_source, self.pre_feat)
        self.step_count = step
        rep = side["report"]
        self.report = RunReport(rep["run_id"], rep["scenario"], rep["rows"], rep["final"], rep["trace"],
                                rep["freeze_checks"], rep["freeze_violations"])
        self._accum = {k: list(v) for k, v in side["accum"].items()}


class CorruptCheckpoint(ValueError):
    pass


def run_scenario(scenario: str, net_cfg: NetConfig, train_cfg: TrainConfig, spec: DatasetSpec,
                 run_id: str | None = None) -> RunReport:
    return Trainer(scenario, net_cfg, train_cfg, spec, run_id).run()


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})
