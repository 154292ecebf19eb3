"""Coupled dictionary learning for guided multimodal image restoration."""

from mmcdl.core import PatchGeometry, PatchSet, aggregate_patches, extract_patches
from mmcdl.dictlearn import CoupledDictionary, TrainConfig, train_coupled
from mmcdl.kernels import available_backends, get_backend, set_backend
from mmcdl.metrics import QualityReport, psnr, rmse, ssim
from mmcdl.sparse import StackedDictionary, StopRule, batch_code, masked_omp, omp
from mmcdl.tasks import (DenoiseConfig, InpaintConfig, SrConfig, denoise, inpaint,
                         solve_fidelity_combine, superresolve)

__version__ = "0.1.0"
