"""Four scenarios on a shrunken dataset, a couple of minutes on one core.

Too small to show the full ordering reliably; it is a smoke run of the
whole pipeline. The full comparison is `python -m sr4ir run --config
demos/compare.cfg`.
"""

from sr4ir import config as C
from sr4ir.trainer import Trainer

cfg = C.parse("", ["data.train_count=320", "data.test_count=160", "train.epochs=4",
                   "net.sr_blocks=2", "net.feat_channels=16"])
print(f"{'scenario':10s} {'top1':>6s} {'psnr':>7s}")
for scenario in ("HR_to_T", "SR4IR", "S_then_T", "LR_to_T"):
    rep = Trainer(scenario, cfg.net, cfg.train, cfg.data).run()
    print(f"{scenario:10s} {rep.final['score']:6.3f} {rep.final['psnr']:7.2f}")
