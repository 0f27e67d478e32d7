"""scikit-learn style wrappers around the two training stages.

``X`` is always a list of :class:`~splatsr.scene.CameraView`. ``fit`` reads
the targets attached to the views; ``predict`` renders one image per view
and stacks them into an ``(n, H, W, 3)`` array.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import InvalidParameterError
from .metrics import psnr
from .render import rasterize
from .scene import Scene, make_synthetic_scene
from .train import TrainConfig, make_oracles, train_lr, train_sr


def _config(cfg):
    if cfg is None:
        return TrainConfig()
    if isinstance(cfg, dict):
        return TrainConfig(**cfg)
    if not isinstance(cfg, TrainConfig):
        raise InvalidParameterError("config must be a TrainConfig, a dict or None")
    return cfg


def _render_all(scene, cams, factor, background, workers):
    out = []
    for cam in cams:
        cam = cam.scaled(factor) if factor != 1 else cam
        out.append(np.clip(rasterize(scene, cam, background=background, workers=workers)[0], 0, 1))
    return np.stack(out)


class LowResSplatter(BaseEstimator):
    """Plain-MSE Gaussian splatting fit at the input resolution.

    Parameters
    ----------
    config : TrainConfig, dict or None
        Training settings; ``iters_lr`` sets the iteration count.
    n_init : int
        Primitives in the random starting scene.
    init_seed : int
        Seed of the starting scene.
    """

    def __init__(self, config=None, n_init=50, init_seed=1000):
        self.config = config
        self.n_init = n_init
        self.init_seed = init_seed

    def fit(self, X, y=None):
        cfg = _config(self.config)
        init = make_synthetic_scene(self.init_seed, self.n_init, 1.0)
        self.scene_ = train_lr(init, X, cfg)
        self.n_primitives_ = len(self.scene_)
        return self

    def predict(self, X):
        check_is_fitted(self, "scene_")
        cfg = _config(self.config)
        return _render_all(self.scene_, X, 1, cfg.background, cfg.workers)

    def score(self, X, y=None):
        """Mean PSNR against the views' own targets (or ``y``)."""
        pred = self.predict(X)
        refs = y if y is not None else [v.target_image for v in X]
        return float(np.mean([psnr(p, r) for p, r in zip(pred, refs)]))


class SuperResSplatter(BaseEstimator):
    """High-resolution refinement from low-resolution views and a prior oracle.

    ``fit(X, y)`` takes LR views in ``X`` and, for the ``perfect`` and
    ``noisy`` priors, the HR reference images in ``y``. Without ``init`` an
    LR scene is fit first. ``predict`` renders the LR cameras at
    ``sr_factor`` times their resolution.
    """

    def __init__(self, config=None, init=None, n_init=50, init_seed=1000):
        self.config = config
        self.init = init
        self.n_init = n_init
        self.init_seed = init_seed

    def fit(self, X, y=None):
        cfg = _config(self.config)
        init = self.init
        if init is None:
            init = LowResSplatter(cfg, self.n_init, self.init_seed).fit(X).scene_
        elif not isinstance(init, Scene):
            raise InvalidParameterError("init must be a Scene")
        oracles = make_oracles(X, cfg, None if y is None else list(y))
        self.scene_, self.telemetry_ = train_sr(init, X, oracles, cfg)
        self.n_primitives_ = len(self.scene_)
        return self

    def predict(self, X):
        check_is_fitted(self, "scene_")
        cfg = _config(self.config)
        return _render_all(self.scene_, X, cfg.sr_factor, cfg.background, cfg.workers)

    def score(self, X, y):
        """Mean PSNR of the HR renders of LR cameras ``X`` against HR images ``y``."""
        pred = self.predict(X)
        return float(np.mean([psnr(p, r) for p, r in zip(pred, y)]))
