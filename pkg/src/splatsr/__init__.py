"""Super-resolution novel view synthesis with 3D Gaussian splatting.

The pipeline fits a low-resolution splat scene, then refines it at a higher
resolution with a sub-pixel MSE constraint plus score distillation from a
closed-form prior oracle. Densification uses Gaussian dropout and the
diffusion timestep range is annealed to tame gradient variance.
"""

from ._validation import ConfigError, InconsistentStateError, InvalidParameterError, ParseError
from .data import Dataset, make_dataset
from .densify import DensifyStats, accumulate_stats, densify_apply, dropout_mask, prune, select_candidates
from .diffusion import AnnealState, DiffusionSchedule, PriorOracle, build_schedule, lower_bound, sample_timestep, sds_pixel_grad
from .estimator import LowResSplatter, SuperResSplatter
from .grad import ParamGrads, finite_diff_check, rasterize_backward
from .io import parse_config, ply_read, ply_write, ppm_read, ppm_write
from .metrics import MetricReport, evaluate, psnr, ssim
from .render import downsample, rasterize, render, upsample
from .scene import CameraView, GaussianPrimitive, Scene, make_camera_ring, make_synthetic_scene
from .train import TrainConfig, mse_subpixel_loss, train_lr, train_sr, trace_gradients

__version__ = "0.1.0"
