"""Optimization: sub-pixel MSE, Adam, the low-res and super-res stages, gradient telemetry."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ._rng import keyed_rng
from ._validation import (
    InconsistentStateError,
    InvalidParameterError,
    check_image,
    check_probability,
)
from .densify import (
    DensifyStats,
    accumulate_stats,
    densify_apply,
    dropout_mask,
    plan_densify,
    prune_mask,
    select_candidates,
)
from .diffusion import AnnealState, PriorOracle, build_schedule, lower_bound, sample_timestep, sds_pixel_grad
from .grad import ParamGrads, rasterize_backward
from .metrics import psnr
from .render import downsample, downsample_adjoint, rasterize
from .scene import CameraView, Scene

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Every tunable of the pipeline. Field names double as config-file keys."""

    # objective
    lambda_sds: float = 0.001
    w_mode: str = "const"
    prior: str = "perfect"
    sigma_p: float = 0.0
    sr_factor: int = 4
    background: tuple = (0.0, 0.0, 0.0)
    # diffusion schedule (linear betas)
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    anneal: bool = True
    anneal_N: int = 100
    anneal_delta: int = 1
    anneal_t_min: int = 1
    anneal_integer: bool = True
    # densification
    dropout: bool = True
    dropout_p: float = 0.7
    tau_pos: float = 0.0002
    percent_dense: float = 0.01
    opacity_min: float = 0.005
    densify_every: int = 200
    densify_from: int = 100
    densify_until: float = 0.6
    # optimization
    iters_lr: int = 2000
    iters_sr: int = 2000
    lr_position: float = 1.6e-3
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    seed: int = 0
    workers: int = 1
    psnr_every: int = 0

    def __post_init__(self):
        if self.sr_factor < 1:
            raise InvalidParameterError("sr_factor must be >= 1")
        if self.lambda_sds < 0:
            raise InvalidParameterError("lambda_sds must be >= 0")
        check_probability(self.dropout_p, "dropout_p")
        for name in ("lr_position", "lr_log_scale", "lr_rotation", "lr_opacity", "lr_color", "tau_pos"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be > 0")
        if self.sigma_p < 0:
            raise InvalidParameterError("sigma_p must be >= 0")
        if self.prior not in ("perfect", "noisy", "bicubic"):
            raise InvalidParameterError(f"unknown prior {self.prior!r}")
        if self.w_mode not in ("const", "one_minus_abar"):
            raise InvalidParameterError(f"unknown w_mode {self.w_mode!r}")
        for name in ("T", "anneal_N", "anneal_delta", "anneal_t_min", "densify_every"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.T < 2 or self.anneal_t_min > self.T:
            raise InvalidParameterError("need T >= 2 and anneal_t_min <= T")
        if not 0.0 < self.opacity_min < 1.0:
            raise InvalidParameterError("opacity_min must lie in (0, 1)")
        if len(self.background) != 3:
            raise InvalidParameterError("background needs three channels")

    def learning_rates(self, extent: float) -> dict[str, float]:
        return {
            "position": self.lr_position * extent,
            "log_scale": self.lr_log_scale,
            "rotation": self.lr_rotation,
            "opacity": self.lr_opacity,
            "color": self.lr_color,
        }

    def anneal_state(self) -> AnnealState:
        return AnnealState(self.T, self.anneal_N, self.anneal_t_min, self.anneal_delta, self.anneal_integer)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# losses and optimizer


def mse_subpixel_loss(hr_render, lr_target, factor: int):
    """Mean squared error between the bilinear downsample of ``hr_render`` and ``lr_target``.

    Returns ``(loss, dL/d hr_render)``.
    """
    hr = check_image(hr_render, "hr_render")
    lr = check_image(lr_target, "lr_target")
    if hr.shape[0] != lr.shape[0] * factor or hr.shape[1] != lr.shape[1] * factor:
        raise InvalidParameterError(
            f"render {hr.shape[1]}x{hr.shape[0]} is not {factor}x the target {lr.shape[1]}x{lr.shape[0]}")
    resid = downsample(hr, factor, "bilinear") - lr
    loss = float(np.mean(resid**2))
    return loss, downsample_adjoint(2.0 * resid / resid.size, factor, "bilinear")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def for_scene(cls, scene: Scene) -> "AdamState":
        params = scene.params()
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})

    def remap(self, kept: np.ndarray, n_new: int) -> "AdamState":
        """Moments for a reshaped scene: rows ``kept`` survive in order, ``n_new`` zero rows follow."""
        def f(a):
            return np.concatenate([a[kept], np.zeros((n_new,) + a.shape[1:])])
        return AdamState({k: f(a) for k, a in self.m.items()}, {k: f(a) for k, a in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(scene: Scene, grads: ParamGrads, state: AdamState, lrs: dict[str, float]):
    """One bias-corrected Adam update on every parameter group; returns ``(scene, state)``."""
    groups = grads.groups()
    params = scene.params()
    for k, a in params.items():
        if groups[k].shape != a.shape or state.m[k].shape != a.shape:
            raise InconsistentStateError(f"shape mismatch in parameter group {k!r}")
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_m, new_v, new_params = {}, {}, {}
    for k, a in params.items():
        g = groups[k]
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        new_params[k] = a - lrs[k] * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    return scene.replace(**new_params), AdamState(new_m, new_v, step, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TelemetryRow:
    iter: int
    loss_mse: float
    arm: str
    t: int | None
    lb: int | None
    grad_mean: float
    grad_max: float
    n_prims: int
    psnr: float | None = None

    def as_csv_fields(self) -> list[str]:
        def fmt(x):
            if x is None:
                return ""
            return repr(float(x)) if isinstance(x, float) else str(x)
        return [fmt(getattr(self, f.name)) for f in fields(self)]


TELEMETRY_HEADER = [f.name for f in fields(TelemetryRow)]


def _view_schedule(n_views: int, seed: int, iteration: int) -> int:
    epoch, k = divmod(iteration, n_views)
    return int(keyed_rng(seed, epoch, "views").permutation(n_views)[k])


def _is_densify_step(i: int, total: int, cfg: TrainConfig) -> bool:
    return i >= cfg.densify_from and i <= cfg.densify_until * total and i % cfg.densify_every == 0 and i > 0


def _check_views(views, need_targets=True):
    views = list(views)
    if not views:
        raise InvalidParameterError("no training views given")
    for v in views:
        if not isinstance(v, CameraView):
            raise InvalidParameterError("views must be CameraView instances")
        if need_targets and v.target_image is None:
            raise InvalidParameterError("every training view needs a target image")
    return views


def optimize(scene: Scene, views, cfg: TrainConfig, iterations: int, *, factor: int = 1,
             oracles=None, arm: str | None = None, use_mse: bool = True, dropout: bool = False,
             eval_views=None):
    """Shared training loop.

    ``views`` carry low-resolution targets; rendering happens at ``factor``
    times their resolution. SDS is active when ``lambda_sds > 0`` and
    ``oracles`` (one per view) are given. Returns ``(scene, telemetry)``.
    """
    views = _check_views(views)
    render_cams = [v.scaled(factor) if factor > 1 else v for v in views]
    use_sds = cfg.lambda_sds > 0 and oracles is not None
    if use_sds and len(oracles) != len(views):
        raise InvalidParameterError("need one prior oracle per view")
    if arm is None:
        arm = "sds" if use_sds else "mse"
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end) if use_sds else None
    ann = cfg.anneal_state()
    bg = np.asarray(cfg.background, dtype=np.float64)

    state = AdamState.for_scene(scene)
    stats = DensifyStats.zeros(len(scene))
    telemetry = []
    for i in range(iterations):
        vi = _view_schedule(len(views), cfg.seed, i)
        view, cam = views[vi], render_cams[vi]
        image, aux = rasterize(scene, cam, keep_aux=True, background=bg, workers=cfg.workers)
        loss, dl = mse_subpixel_loss(image, view.target_image, factor)
        if not use_mse:
            dl = np.zeros_like(dl)
        t = lb = None
        if use_sds:
            lb = lower_bound(i, ann) if cfg.anneal else 1
            t = sample_timestep(i, ann, keyed_rng(cfg.seed, i, "timestep"), anneal=cfg.anneal)
            g_sds = sds_pixel_grad(image, view.target_image, t, oracles[vi], sched, cfg.w_mode,
                                   keyed_rng(cfg.seed, i, "sds"))
            dl = dl + cfg.lambda_sds * g_sds
        grads = rasterize_backward(scene, cam, aux, dl, workers=cfg.workers)

        vis = grads.visible
        norms = np.linalg.norm(grads.ndc_grad, axis=1)[vis]
        score = None
        if eval_views and cfg.psnr_every and i % cfg.psnr_every == 0:
            score = float(np.mean([psnr(np.clip(rasterize(scene, ev, background=bg)[0], 0, 1),
                                        ev.target_image) for ev in eval_views]))
        telemetry.append(TelemetryRow(
            i, loss, arm, t, lb,
            float(norms.mean()) if len(norms) else 0.0,
            float(norms.max()) if len(norms) else 0.0,
            len(scene), score,
        ))

        stats = accumulate_stats(stats, grads, vis, aux.pixel_radius)
        scene, state = adam_step(scene, grads, state, cfg.learning_rates(scene.extent))

        if _is_densify_step(i + 1, iterations, cfg):
            scene, state, stats = _densify(scene, state, stats, cfg, i + 1, dropout)
    return scene, telemetry


def _densify(scene, state, stats, cfg: TrainConfig, iteration: int, dropout: bool):
    candidates = select_candidates(stats, cfg.tau_pos)
    retained = candidates
    if dropout:
        retained = dropout_mask(candidates, cfg.dropout_p, keyed_rng(cfg.seed, iteration, "dropout"))
    plan = plan_densify(scene, retained, cfg.percent_dense)
    n_before = len(scene)
    scene = densify_apply(scene, retained, cfg.percent_dense, keyed_rng(cfg.seed, iteration, "split"), plan)
    state = state.remap(plan.kept, len(plan.appended_from))
    keep = prune_mask(scene, cfg.opacity_min)
    if keep.any() and not keep.all():
        idx = np.flatnonzero(keep)
        scene = scene.take(idx)
        state = state.remap(idx, 0)
    logger.debug("iter %d: %d candidates, %d retained, %d -> %d primitives",
                 iteration, len(candidates), len(retained), n_before, len(scene))
    return scene, state, DensifyStats.zeros(len(scene))


def train_lr(init: Scene, views_lr, cfg: TrainConfig = TrainConfig()) -> Scene:
    """Fit a scene to the low-resolution views with plain MSE (no SDS, no dropout)."""
    views_lr = _check_views(views_lr)
    if len(views_lr) < 2:
        raise InvalidParameterError("train_lr needs at least two views")
    scene, _ = optimize(init, views_lr, cfg.with_(lambda_sds=0.0), cfg.iters_lr)
    return scene


def make_oracles(views_lr, cfg: TrainConfig, hr_references=None) -> list[PriorOracle]:
    if cfg.prior == "bicubic":
        return [PriorOracle("bicubic") for _ in views_lr]
    if hr_references is None:
        raise InvalidParameterError(f"{cfg.prior} prior needs high-resolution reference images")
    return [PriorOracle(cfg.prior, ref, cfg.sigma_p if cfg.prior == "noisy" else 0.0)
            for ref in hr_references]


def train_sr(init: Scene, views_lr, oracles, cfg: TrainConfig = TrainConfig(), eval_views=None):
    """Optimize the high-resolution scene with the sub-pixel MSE plus weighted SDS.

    Returns ``(scene, telemetry)``.
    """
    views_lr = _check_views(views_lr)
    if oracles is not None:
        for o, v in zip(oracles, views_lr):
            if o.hr_reference is not None and o.hr_reference.shape[:2] != (
                    v.height * cfg.sr_factor, v.width * cfg.sr_factor):
                raise InvalidParameterError("oracle resolution must be sr_factor x the LR views")
    return optimize(init, views_lr, cfg, cfg.iters_sr, factor=cfg.sr_factor,
                    oracles=oracles, dropout=cfg.dropout, eval_views=eval_views)


def coefficient_of_variation(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    return float(values.std() / mean) if mean > 0 else math.inf


def trace_gradients(init: Scene, views_lr, oracles, cfg: TrainConfig, arms=("mse", "sds"),
                    iterations: int | None = None) -> dict:
    """Run fixed-seed arms from the same start and record their gradient traces.

    ``mse`` trains on the sub-pixel MSE alone, ``sds`` on the weighted SDS
    term alone (timestep sampling per ``cfg.anneal``). Returns
    ``{arm: (telemetry, coefficient_of_variation)}``.
    """
    iterations = cfg.iters_sr if iterations is None else iterations
    out = {}
    for arm in arms:
        if arm == "mse":
            _, rows = optimize(init, views_lr, cfg.with_(lambda_sds=0.0), iterations,
                               factor=cfg.sr_factor, arm="mse", dropout=cfg.dropout)
        elif arm == "sds":
            _, rows = optimize(init, views_lr, cfg, iterations, factor=cfg.sr_factor,
                               oracles=oracles, arm="sds", use_mse=False, dropout=cfg.dropout)
        else:
            raise InvalidParameterError(f"unknown arm {arm!r}")
        out[arm] = (rows, coefficient_of_variation([r.grad_mean for r in rows]))
    return out

