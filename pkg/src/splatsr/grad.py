"""Exact reverse-mode derivatives of :func:`splatsr.render.rasterize`.

The alpha cap and the 1/255 skip are hard gates; gradients through a gated
contribution are zero, matching what the forward pass computes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import InconsistentStateError, InvalidParameterError, check_image
from .render import Block, Projections, RenderAux, _pixel_coords, _run, rasterize
from .scene import PARAM_GROUPS, CameraView, Scene


@dataclass(eq=False)
class ParamGrads:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    ndc_grad: np.ndarray
    mean2d_grad: np.ndarray
    visible: np.ndarray

    def groups(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            *(getattr(self, f) + getattr(other, f) for f in
              ("position", "log_scale", "rotation", "opacity", "color", "ndc_grad", "mean2d_grad")),
            visible=self.visible | other.visible,
        )

    def scaled(self, k: float) -> "ParamGrads":
        return ParamGrads(
            *(getattr(self, f) * k for f in
              ("position", "log_scale", "rotation", "opacity", "color", "ndc_grad", "mean2d_grad")),
            visible=self.visible.copy(),
        )


def _block_backward(proj: Projections, blk: Block, dl_dc: np.ndarray, background, width, n):
    """Per-primitive partial sums for one band: activated opacity/color, 2D mean, conic."""
    out = np.zeros((n, 9))
    if blk.index.shape[1] == 0:
        return out
    idx = np.where(blk.index >= 0, blk.index, 0)
    inc = blk.included
    weight = blk.alpha * blk.transmittance
    color = proj.color[idx]

    cw = color * weight[..., None]
    behind = np.cumsum(cw[:, ::-1], axis=1)[:, ::-1] - cw
    behind += background * blk.final_transmittance[:, None, None]
    dc_da = color * blk.transmittance[..., None] - behind / (1.0 - blk.alpha)[..., None]
    dl_da = np.einsum("plc,pc->pl", dc_da, dl_dc) * inc
    dl_da = np.where(blk.capped, 0.0, dl_da)

    o = proj.opacity[idx]
    dl_dpower = dl_da * o * blk.gauss
    px, py = _pixel_coords(blk.row0, blk.row1, width)
    dx = px[:, None] - proj.mean2d[idx, 0]
    dy = py[:, None] - proj.mean2d[idx, 1]
    a, b, c = proj.conic[idx, 0], proj.conic[idx, 1], proj.conic[idx, 2]

    flat = idx[inc]
    cols = [
        dl_da * blk.gauss,
        *(weight[..., None] * dl_dc[:, None, :]).transpose(2, 0, 1),
        dl_dpower * (a * dx + b * dy),
        dl_dpower * (b * dx + c * dy),
        dl_dpower * (-0.5 * dx * dx),
        dl_dpower * (-dx * dy),
        dl_dpower * (-0.5 * dy * dy),
    ]
    for j, col in enumerate(cols):
        out[:, j] = np.bincount(flat, weights=col[inc], minlength=n)
    return out


# derivatives of the rotation matrix w.r.t. (w, x, y, z), each a function of q
def _drot_dq(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    d = np.empty((len(q), 4, 3, 3))
    d[:, 0] = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(-1, 3, 3)
    d[:, 1] = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1).reshape(-1, 3, 3)
    d[:, 2] = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1).reshape(-1, 3, 3)
    d[:, 3] = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1).reshape(-1, 3, 3)
    return 2.0 * d


def _chain(proj: Projections, cam: CameraView, partial: np.ndarray):
    g_opacity_act = partial[:, 0]
    g_color_act = partial[:, 1:4]
    g_mean = partial[:, 4:6]
    ga, gb, gc = partial[:, 6], partial[:, 7], partial[:, 8]

    # conic -> cov2d, using symmetric-matrix gradients throughout
    q = np.empty((len(proj.conic), 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = (
        proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2])
    gq = np.empty_like(q)
    gq[:, 0, 0], gq[:, 0, 1], gq[:, 1, 0], gq[:, 1, 1] = ga, 0.5 * gb, 0.5 * gb, gc
    g_cov2d = -q @ gq @ q

    W = cam.rotation
    J = proj.jacobian
    M = J @ W
    g_M = 2.0 * g_cov2d @ M @ proj.cov3d
    g_cov3d = np.swapaxes(M, 1, 2) @ g_cov2d @ M
    g_J = g_M @ W.T

    # cov3d = L L^T with L = R diag(s)
    L = proj.rotmat * proj.scale[:, None, :]
    g_L = 2.0 * g_cov3d @ L
    g_scale = np.einsum("nji,nji->ni", g_L, proj.rotmat)
    g_R = g_L * proj.scale[:, None, :]
    g_q = np.einsum("nij,nkij->nk", g_R, _drot_dq(proj.quat))
    g_q -= proj.quat * np.sum(proj.quat * g_q, axis=1, keepdims=True)
    g_rotation = g_q / proj.rot_norm[:, None]

    fx, fy = cam.focal
    x, y = proj.cam_pos[:, 0], proj.cam_pos[:, 1]
    z = np.where(proj.culled, 1.0, proj.cam_pos[:, 2])
    gu, gv = g_mean[:, 0], g_mean[:, 1]
    g_t = np.stack([
        gu * fx / z - g_J[:, 0, 2] * fx / z**2,
        gv * fy / z - g_J[:, 1, 2] * fy / z**2,
        -gu * fx * x / z**2 - gv * fy * y / z**2
        - g_J[:, 0, 0] * fx / z**2 + g_J[:, 0, 2] * 2 * fx * x / z**3
        - g_J[:, 1, 1] * fy / z**2 + g_J[:, 1, 2] * 2 * fy * y / z**3,
    ], axis=1)
    g_position = g_t @ W

    live = ~proj.culled[:, None]
    return (
        g_position * live,
        g_scale * proj.scale * live,
        g_rotation * live,
        g_opacity_act * proj.opacity * (1.0 - proj.opacity) * live[:, 0],
        g_color_act * proj.color * (1.0 - proj.color) * live,
    )


def rasterize_backward(scene: Scene, cam: CameraView, aux: RenderAux, dl_dimage,
                       workers: int = 1) -> ParamGrads:
    """Gradients of a loss w.r.t. every scene parameter, given ``dL/dimage``.

    ``ndc_grad`` is the derivative w.r.t. each primitive's NDC ``(x, y)``
    mean, i.e. the 2D pixel-mean gradient times ``(width / 2, height / 2)``.
    """
    if aux is None:
        raise InconsistentStateError("backward needs the aux record of a forward pass")
    if aux.n_primitives != len(scene) or aux.fingerprint != scene.fingerprint():
        raise InconsistentStateError("aux was produced for a different scene")
    if (aux.width, aux.height) != (cam.width, cam.height):
        raise InconsistentStateError("aux was produced for a different camera resolution")
    dl_dimage = check_image(dl_dimage, "dL/dimage", (cam.height, cam.width))
    n = len(scene)
    flat = dl_dimage.reshape(-1, 3)
    W = cam.width

    def work(blk):
        return _block_backward(aux.proj, blk, flat[blk.row0 * W:blk.row1 * W], aux.background, W, n)

    partials = _run(work, aux.blocks, workers)
    partial = np.zeros((n, 9))
    for p in partials:  # fixed band order
        partial += p

    pos, ls, rot, op, col = _chain(aux.proj, cam, partial)
    mean2d = partial[:, 4:6] * ~aux.proj.culled[:, None]
    return ParamGrads(
        position=pos, log_scale=ls, rotation=rot, opacity=op, color=col,
        ndc_grad=mean2d * np.array([cam.width / 2.0, cam.height / 2.0]),
        mean2d_grad=mean2d, visible=aux.visible,
    )


def _loss_fn(loss_spec, shape):
    """Normalize ``loss_spec`` to ``image -> (value, dL/dimage)``."""
    if loss_spec is None or (isinstance(loss_spec, str) and loss_spec == "sum"):
        return lambda img: (float(img.sum()), np.ones(shape))
    if callable(loss_spec):
        return loss_spec
    weights = np.asarray(loss_spec, dtype=np.float64)
    if weights.shape != shape:
        raise InvalidParameterError(f"loss weights must have shape {shape}")
    return lambda img: (float(np.sum(weights * img)), weights)


@dataclass
class FiniteDiffReport:
    errors: dict
    worst: dict
    h: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def passes(self, tol: float = 1e-3) -> bool:
        return self.max_error < tol


def finite_diff_check(scene: Scene, cam: CameraView, loss_spec=None, h: float = 1e-4,
                      background=None, freeze_gates: bool = True) -> FiniteDiffReport:
    """Compare analytic gradients with central differences for every scalar parameter.

    ``loss_spec`` is ``None``/``"sum"`` (sum of the image), a weight array
    (linear loss) or a callable ``image -> (value, dL/dimage)``. With
    ``freeze_gates`` the perturbed renders reuse the base render's
    contribution lists and gate decisions, so the difference quotient never
    straddles a skip/cap/termination discontinuity.

    Reports, per parameter group, the worst
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)``.
    """
    if h <= 0:
        raise InvalidParameterError("h must be positive")
    shape = (cam.height, cam.width, 3)
    loss = _loss_fn(loss_spec, shape)
    image, aux = rasterize(scene, cam, keep_aux=True, background=background)
    _, dl = loss(image)
    analytic = rasterize_backward(scene, cam, aux, dl).groups()
    frozen = aux if freeze_gates else None

    def value(s):
        return loss(rasterize(s, cam, background=background, frozen=frozen)[0])[0]

    errors, worst = {}, {}
    for name, attr in PARAM_GROUPS.items():
        base = getattr(scene, attr)
        ana = analytic[name].reshape(base.shape)
        err = np.zeros(base.shape)
        for i in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[i] += h
            minus[i] -= h
            num = (value(scene.replace(**{name: plus})) - value(scene.replace(**{name: minus}))) / (2 * h)
            err[i] = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-6)
        errors[name] = float(err.max())
        worst[name] = tuple(int(k) for k in np.unravel_index(np.argmax(err), err.shape))
    return FiniteDiffReport(errors, worst, h)
