"""Command line entry point: ``python -m sr4ir {run,eval,gradcheck,dumpdata}``.

Everything a command writes goes under the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import traceback
from dataclasses import asdict, replace

from . import config as C
from .data import dump_dataset
from .trainer import CorruptCheckpoint, Trainer, write_metrics_csv

SUMMARY_FIELDS = ["run_id", "scenario", "seed", "test_top1_or_miou", "test_psnr", "test_task_loss",
                  "freeze_violations", "collapse_ratio"]
CHECKPOINT = "checkpoint.sr4c"


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _load_cfg(args) -> C.ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "output", None):
        overrides.append(f"run.output_dir={args.output}")
    return C.load(args.config, overrides)


def run_one(cfg: C.ExperimentConfig, scenario: str, seed: int, resume: bool, log=print) -> dict:
    run_id = cfg.run_id(scenario, seed)
    out = os.path.join(cfg.run.output_dir, run_id)
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, CHECKPOINT)
    tr = Trainer(scenario, cfg.net, cfg.train_for(seed), cfg.data, run_id)
    if resume and os.path.exists(ckpt):
        tr.load_checkpoint(ckpt)
        log(f"[{run_id}] resumed at step {tr.step_count}/{tr.total_steps}")
    metrics_path = os.path.join(out, "metrics.csv")
    every = cfg.run.checkpoint_every

    def on_epoch(t: Trainer):
        row = t.report.rows[-1]
        write_metrics_csv(metrics_path, t.report.rows)
        if (every and row["epoch"] % every == 0) or t.done():
            t.save_checkpoint(ckpt)
        log(f"[{run_id}] epoch {row['epoch']} task_loss {row['task_loss']:.4f} "
            f"pixel_loss {row['pixel_loss']:.4f} score {row['test_top1_or_miou']:.4f} psnr {row['test_psnr']:.2f}")

    rep = tr.run(on_epoch=on_epoch)
    write_metrics_csv(metrics_path, rep.rows)
    if not os.path.exists(ckpt) or tr.step_count != _ckpt_step(ckpt):
        tr.save_checkpoint(ckpt)
    return {"run_id": run_id, "scenario": scenario, "seed": seed,
            "test_top1_or_miou": rep.final["score"], "test_psnr": rep.final["psnr"],
            "test_task_loss": rep.final["task_loss"], "freeze_violations": rep.freeze_violations,
            "collapse_ratio": rep.collapse_ratio()}


def _ckpt_step(path) -> int:
    with open(f"{path}.json") as f:
        return json.load(f)["step"]


def write_summary(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in SUMMARY_FIELDS})


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.run.output_dir
    os.makedirs(out, exist_ok=True)
    C.write_resolved(cfg, out)
    rows, failed = [], 0
    for scenario, seed in cfg.run_matrix():
        try:
            rows.append(run_one(cfg, scenario, seed, args.resume, log=_log(args)))
        except Exception as exc:  # keep going; the exit code reports it
            failed += 1
            print(f"[{cfg.run_id(scenario, seed)}] FAILED: {exc}", file=sys.stderr)
            if os.environ.get("SR4IR_TRACEBACK"):
                traceback.print_exc()
    write_summary(os.path.join(out, "summary.csv"), rows)
    return 1 if failed else 0


def _log(args):
    if getattr(args, "quiet", False):
        return lambda *a, **k: None
    return lambda msg: print(msg, flush=True)


def cmd_eval(args) -> int:
    side_path = f"{args.checkpoint}.json"
    scenario = None
    if os.path.exists(side_path):
        with open(side_path) as f:
            scenario = json.load(f).get("scenario")
    overrides = list(args.set or [])
    cfg = C.load(args.config, overrides)
    scenario = args.scenario or scenario or cfg.run_matrix()[0][0]
    tr = Trainer(scenario, cfg.net, cfg.train, cfg.data)
    try:
        tr.load_checkpoint(args.checkpoint)
    except CorruptCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    m = tr.evaluate()
    label = "miou" if m.kind == "segmentation" else "top1"
    print(f"scenario {scenario} step {tr.step_count}")
    print(f"{label} {m.score:.4f}")
    print(f"psnr {m.psnr:.4f}" if math.isfinite(m.psnr) else "psnr inf")
    print(f"task_loss {m.task_loss:.4f}")
    if args.json:
        print(json.dumps(asdict(m)))
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    return gradcheck.main(verbose=True)


def cmd_dumpdata(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.run.output_dir
    manifest = dump_dataset(cfg.data, out)
    C.write_resolved(cfg, out)
    with open(manifest) as f:
        n = sum(1 for _ in f)
    print(f"wrote {n} images, manifest {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sr4ir", description="Task-driven SR experiments on a texture dataset.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, output=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        if output:
            sp.add_argument("--output", help="output directory (overrides run.output_dir)")

    r = sub.add_parser("run", help="train the run matrix and write CSVs, checkpoints and summary.csv")
    common(r)
    r.add_argument("--resume", action="store_true", help="continue from checkpoints in the output directory")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(e, output=False)
    e.add_argument("checkpoint")
    e.add_argument("--scenario", help="scenario deciding the task input (default: from the checkpoint)")
    e.add_argument("--json", action="store_true")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("dumpdata", help="write the dataset as PPM files plus manifest.txt")
    common(d)
    d.set_defaults(fn=cmd_dumpdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
