"""Task-driven super-resolution for image recognition, in plain numpy.

Modules: ``tensor`` (reverse-mode autodiff), ``imaging`` (resampling, PSNR,
PPM), ``nets`` (SR net, feature extractor, heads), ``losses``, ``cqmix``,
``data`` (procedural texture dataset), ``trainer`` (scenarios, alternate
training, checkpoints), ``config`` and ``cli``.
"""

from .tensor import Tensor, no_grad, precision
from .imaging import (DegradationConfig, ImageBatch, bicubic_downsample, bilinear_upsample, gaussian_blur,
                      ppm_read, ppm_write, psnr)
from .nets import NetConfig, ParamSet, feat_forward, head_forward, init_params, sr_forward, task_forward
from .losses import PerceptualSource, pixel_loss, task_loss, tdp_loss
from .cqmix import GridMask, make_mask, mix
from .data import DatasetSpec, batch_iter, dump_dataset, gen_sample, load_split, make_pair
from .trainer import Metrics, RunReport, TrainConfig, Trainer, evaluate, run_scenario

__version__ = "0.1.0"
