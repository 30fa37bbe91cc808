"""Write a few HR / bilinear-LR / CQMix composites as PPM files for a look."""

import os
import sys

import numpy as np

from sr4ir.cqmix import make_mask, mix
from sr4ir.data import TRAIN, DatasetSpec, load_split
from sr4ir.imaging import bilinear_upsample, ppm_write

out = sys.argv[1] if len(sys.argv) > 1 else "cqmix_preview"
os.makedirs(out, exist_ok=True)
spec = DatasetSpec(train_count=8, test_count=1)
d = load_split(spec, TRAIN)
up = bilinear_upsample(d.lr, spec.degradation.scale)
m = make_mask(len(d), spec.image_size, spec.image_size, n_patches=16, p_hr=0.5, seed=0)
aug = mix(d.hr, up, m).data
for i in range(len(d)):
    strip = np.concatenate([d.hr[i], up[i], aug[i]], axis=2)  # side by side
    ppm_write(strip, os.path.join(out, f"sample{i}_class{d.label[i]}.ppm"))
print(f"wrote {len(d)} strips (HR | upsampled LR | mix) to {out}/")
