"""Adaptive density control with Gaussian Dropout.

A primitive becomes a densification candidate when its screen-space
positional gradient, averaged over the views it was visible in, exceeds
``tau_pos``. Each candidate is then independently dropped with probability
``p``; survivors are cloned (small) or split in two (large).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    InconsistentStateError,
    InvalidParameterError,
    check_positive,
    check_probability,
)
from .scene import Scene, quaternion_to_matrix, normalize_rotation, sigmoid

SPLIT_SCALE_DIVISOR = 1.6


@dataclass
class DensifyStats:
    grad_norm_sum: np.ndarray
    view_count: np.ndarray
    max_pixel_radius: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grad_norm_sum = np.asarray(self.grad_norm_sum, dtype=np.float64)
        self.view_count = np.asarray(self.view_count, dtype=np.int64)
        if self.max_pixel_radius is None:
            self.max_pixel_radius = np.zeros_like(self.grad_norm_sum)
        if not (len(self.grad_norm_sum) == len(self.view_count) == len(self.max_pixel_radius)):
            raise InconsistentStateError("stats arrays differ in length")

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n))

    def __len__(self):
        return len(self.view_count)

    def mean_grad(self) -> np.ndarray:
        return np.where(self.view_count > 0, self.grad_norm_sum / np.maximum(self.view_count, 1), 0.0)


def accumulate_stats(stats: DensifyStats, grads, visibility, pixel_radius=None) -> DensifyStats:
    """Add one view's NDC-gradient norms for the visible primitives.

    ``grads`` is a :class:`~splatsr.grad.ParamGrads` or an ``(n, 2)`` array
    of NDC gradients.
    """
    ndc = np.asarray(getattr(grads, "ndc_grad", grads), dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    if not (len(ndc) == len(vis) == len(stats)):
        raise InconsistentStateError(
            f"stats ({len(stats)}), gradients ({len(ndc)}) and visibility ({len(vis)}) disagree")
    norms = np.sqrt(ndc[:, 0] ** 2 + ndc[:, 1] ** 2)
    radius = stats.max_pixel_radius
    if pixel_radius is not None:
        radius = np.where(vis, np.maximum(radius, pixel_radius), radius)
    return DensifyStats(
        stats.grad_norm_sum + np.where(vis, norms, 0.0),
        stats.view_count + vis,
        radius,
    )


def select_candidates(stats: DensifyStats, tau_pos: float) -> np.ndarray:
    tau_pos = check_positive(tau_pos, "tau_pos")
    seen = stats.view_count > 0
    return np.flatnonzero(seen & (stats.mean_grad() > tau_pos))


def dropout_mask(candidates, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each candidate unless its uniform draw falls below ``p``."""
    p = check_probability(p)
    candidates = np.asarray(candidates, dtype=np.int64)
    draws = rng.random(len(candidates))
    return candidates[~(draws < p)]


@dataclass(frozen=True)
class DensifyPlan:
    """Where each primitive of the densified scene comes from.

    ``kept`` are the surviving original indices (in order), followed by
    ``appended_from``, the source index of each appended primitive, and
    ``appended_clone`` telling clones from split children.
    """

    kept: np.ndarray
    appended_from: np.ndarray
    appended_clone: np.ndarray


def plan_densify(scene: Scene, retained, percent_dense: float) -> DensifyPlan:
    retained = np.unique(np.asarray(retained, dtype=np.int64))
    if len(retained) and (retained[0] < 0 or retained[-1] >= len(scene)):
        raise InvalidParameterError("densify index out of range")
    big = np.exp(scene.log_scales[retained]).max(axis=1) > percent_dense * scene.extent
    split = retained[big]
    kept = np.setdiff1d(np.arange(len(scene)), split, assume_unique=True)
    src, clone = [], []
    for i, is_split in zip(retained.tolist(), big.tolist()):
        if is_split:
            src += [i, i]
            clone += [False, False]
        else:
            src.append(i)
            clone.append(True)
    return DensifyPlan(kept, np.array(src, dtype=np.int64), np.array(clone, dtype=bool))


def densify_apply(scene: Scene, retained, percent_dense: float, rng: np.random.Generator,
                  plan: DensifyPlan | None = None) -> Scene:
    """Clone small retained primitives and split large ones.

    A primitive is small when its largest activated scale is at most
    ``percent_dense * scene.extent``. Clones are exact copies; split
    children draw their positions from the parent's own Gaussian and shrink
    their scales by 1.6. Survivors keep their order; new primitives are
    appended by ascending source index.
    """
    if plan is None:
        plan = plan_densify(scene, retained, percent_dense)
    if len(plan.appended_from) == 0:
        return scene
    src = plan.appended_from
    children = ~plan.appended_clone
    pos = scene.positions[src].copy()
    log_scales = scene.log_scales[src].copy()
    if children.any():
        parents = src[children]
        R = quaternion_to_matrix(normalize_rotation(scene.rotations[parents]))
        z = rng.standard_normal((len(parents), 3)) * np.exp(scene.log_scales[parents])
        pos[children] = scene.positions[parents] + np.einsum("nij,nj->ni", R, z)
        log_scales[children] -= np.log(SPLIT_SCALE_DIVISOR)
    kept = plan.kept
    return Scene(
        np.concatenate([scene.positions[kept], pos]),
        np.concatenate([scene.log_scales[kept], log_scales]),
        np.concatenate([scene.rotations[kept], scene.rotations[src]]),
        np.concatenate([scene.opacity_logits[kept], scene.opacity_logits[src]]),
        np.concatenate([scene.color_logits[kept], scene.color_logits[src]]),
        scene.extent,
    )


def prune_mask(scene: Scene, opacity_min: float) -> np.ndarray:
    if not 0.0 < opacity_min < 1.0:
        raise InvalidParameterError(f"opacity_min must lie in (0, 1), got {opacity_min!r}")
    return sigmoid(scene.opacity_logits) >= opacity_min


def prune(scene: Scene, opacity_min: float) -> Scene:
    keep = prune_mask(scene, opacity_min)
    if not keep.any():
        raise InconsistentStateError("pruning would remove every primitive")
    return scene.take(np.flatnonzero(keep))
