"""Synthetic multi-view super-resolution datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import downsample, rasterize
from .scene import CameraView, Scene, make_camera_ring, make_synthetic_scene


@dataclass(eq=False)
class Dataset:
    gt: Scene
    train_hr: list   # HR cameras with ground-truth HR targets
    train_lr: list   # LR cameras with bilinear-downsampled targets
    test_hr: list    # held-out HR cameras with ground-truth targets
    sr_factor: int

    @property
    def test_lr(self) -> list:
        return [lr_camera(c, self.sr_factor) for c in self.test_hr]


def lr_camera(hr: CameraView, factor: int) -> CameraView:
    """The low-resolution camera whose :meth:`CameraView.scaled` is ``hr`` (target dropped)."""
    return CameraView(hr.world_to_camera, hr.focal / factor,
                      (hr.principal_point + 0.5) / factor - 0.5,
                      hr.width // factor, hr.height // factor)


def make_dataset(seed: int = 1, n_prims: int = 300, n_views: int = 8, n_test: int = 4,
                 lr_size: int = 32, sr_factor: int = 4, radius: float = 3.0, fov_deg: float = 50.0,
                 extent: float = 1.0, background=(0.0, 0.0, 0.0), workers: int = 1) -> Dataset:
    """Ground-truth scene plus ring cameras; held-out views sit halfway between training views."""
    gt = make_synthetic_scene(seed, n_prims, extent)
    hr_size = lr_size * sr_factor
    train = make_camera_ring(n_views, radius, fov_deg, hr_size, hr_size)
    test = make_camera_ring(n_test, radius, fov_deg, hr_size, hr_size, phase_deg=180.0 / n_views)

    def shoot(cam):
        return cam.with_target(np.clip(rasterize(gt, cam, background=background, workers=workers)[0], 0, 1))

    train_hr = [shoot(c) for c in train]
    test_hr = [shoot(c) for c in test]
    train_lr = [lr_camera(c, sr_factor).with_target(downsample(c.target_image, sr_factor, "bilinear"))
                for c in train_hr]
    return Dataset(gt, train_hr, train_lr, test_hr, sr_factor)
