"""Forward rasterization of Gaussian scenes and image resampling.

Primitives are projected with the first-order (EWA) approximation, globally
depth sorted and alpha-composited front to back. The image is processed in
fixed bands of ``BLOCK_ROWS`` rows; each band is independent, so the band
partition (not the worker count) fixes every floating-point reduction order.
"""

from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._validation import InvalidParameterError, check_count, check_image
from .scene import CameraView, GaussianPrimitive, Scene, activate, build_covariance, quaternion_to_matrix

NEAR = 0.01
FAR = 100.0
GUARD_BAND = 1.3
COV2D_DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
BLOCK_ROWS = 16


@dataclass(frozen=True)
class Projection2D:
    ndc: np.ndarray
    pixel_center: np.ndarray
    cov2d: np.ndarray
    depth: float
    culled: bool


@dataclass(frozen=True, eq=False)
class Projections:
    """Screen-space quantities for every primitive of a scene under one camera.

    ``conic`` holds the packed inverse 2D covariance ``(a, b, c)`` with
    ``inv(cov2d) = [[a, b], [b, c]]``. The remaining fields are the
    intermediates the backward pass needs.
    """

    cam_pos: np.ndarray
    mean2d: np.ndarray
    ndc: np.ndarray
    depth: np.ndarray
    culled: np.ndarray
    jacobian: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    scale: np.ndarray
    rotmat: np.ndarray
    quat: np.ndarray
    rot_norm: np.ndarray


def project(scene: Scene, cam: CameraView, near: float = NEAR) -> Projections:
    act = activate(scene)
    W = cam.rotation
    t = scene.positions @ W.T + cam.translation
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    behind = z <= near
    zs = np.where(behind, 1.0, z)

    u = fx * x / zs + cx
    v = fy * y / zs + cy
    ndc = np.stack([
        (u - cx) / (cam.width / 2.0),
        (v - cy) / (cam.height / 2.0),
        (FAR + near) / (FAR - near) - 2.0 * FAR * near / ((FAR - near) * zs),
    ], axis=1)
    culled = behind | (np.abs(ndc[:, 0]) > GUARD_BAND) | (np.abs(ndc[:, 1]) > GUARD_BAND)

    J = np.zeros((len(scene), 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs**2

    cov3d = build_covariance(scene.log_scales, scene.rotations)
    M = J @ W
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], axis=1)

    return Projections(
        cam_pos=t, mean2d=np.stack([u, v], axis=1), ndc=ndc, depth=z, culled=culled,
        jacobian=J, cov3d=cov3d, cov2d=cov2d, conic=conic,
        opacity=act.opacity, color=act.color, scale=act.scale,
        rotmat=quaternion_to_matrix(act.rotation), quat=act.rotation,
        rot_norm=np.linalg.norm(scene.rotations, axis=1),
    )


def project_gaussian(p: GaussianPrimitive, cam: CameraView) -> Projection2D:
    proj = project(Scene.from_primitives([p], extent=1.0), cam)
    return Projection2D(
        ndc=proj.ndc[0], pixel_center=proj.mean2d[0], cov2d=proj.cov2d[0],
        depth=float(proj.depth[0]), culled=bool(proj.culled[0]),
    )


def depth_order(proj: Projections) -> np.ndarray:
    """Indices of non-culled primitives by ascending depth, ties by index."""
    idx = np.flatnonzero(~proj.culled)
    return idx[np.lexsort((idx, proj.depth[idx]))]


@dataclass(eq=False)
class Block:
    """Per-pixel contribution lists for one band of rows.

    Arrays are ``(pixels_in_band, L)``, front to back, padded with
    ``index == -1``. ``included`` marks contributions actually composited
    (alpha above the skip threshold, transmittance not yet exhausted);
    ``capped`` marks those whose alpha hit ``ALPHA_MAX``.
    """

    row0: int
    row1: int
    index: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    included: np.ndarray
    capped: np.ndarray
    final_transmittance: np.ndarray


@dataclass(eq=False)
class RenderAux:
    proj: Projections
    blocks: list
    background: np.ndarray
    width: int
    height: int
    n_primitives: int
    fingerprint: bytes

    def contributions(self, row: int, col: int) -> list[tuple[int, float, float]]:
        """Composited ``(primitive index, alpha, transmittance before)`` records of one pixel."""
        blk = self.blocks[row // BLOCK_ROWS]
        p = (row - blk.row0) * self.width + col
        sel = blk.included[p]
        return list(zip(blk.index[p][sel].tolist(), blk.alpha[p][sel].tolist(),
                        blk.transmittance[p][sel].tolist()))

    @property
    def visible(self) -> np.ndarray:
        """Primitives with at least one composited contribution."""
        counts = np.zeros(self.n_primitives, dtype=np.int64)
        for blk in self.blocks:
            counts += np.bincount(blk.index[blk.included], minlength=self.n_primitives)
        return counts > 0

    @property
    def pixel_radius(self) -> np.ndarray:
        lam = np.linalg.eigvalsh(self.proj.cov2d)[:, 1]
        return np.where(self.proj.culled, 0.0, 3.0 * np.sqrt(lam))


def _screen_bounds(proj: Projections, order: np.ndarray, width: int, height: int):
    """Integer pixel boxes that contain every pixel where ``opacity * G >= ALPHA_MIN``."""
    o = proj.opacity[order]
    ok = o * 1.0 >= ALPHA_MIN
    r2 = 2.0 * np.log(np.maximum(o, ALPHA_MIN) / ALPHA_MIN)
    hx = np.sqrt(r2 * proj.cov2d[order, 0, 0])
    hy = np.sqrt(r2 * proj.cov2d[order, 1, 1])
    u, v = proj.mean2d[order, 0], proj.mean2d[order, 1]
    x0 = np.clip(np.floor(u - hx) - 1, 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(u + hx) + 1, -1, width - 1).astype(np.int64)
    y0 = np.clip(np.floor(v - hy) - 1, 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(v + hy) + 1, -1, height - 1).astype(np.int64)
    x1 = np.where(ok, x1, -1)
    return x0, x1, y0, y1


def _gaussian_at(proj: Projections, prim: np.ndarray, px, py):
    dx = px - proj.mean2d[prim, 0]
    dy = py - proj.mean2d[prim, 1]
    a, b, c = proj.conic[prim, 0], proj.conic[prim, 1], proj.conic[prim, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    return np.exp(np.minimum(power, 0.0))


def _block_layout(proj, order, bounds, row0, row1, width):
    """Padded front-to-back candidate lists for rows ``[row0, row1)``."""
    x0, x1, y0, y1 = bounds
    ya = np.maximum(y0, row0)
    yb = np.minimum(y1, row1 - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(yb - ya + 1, 0)
    counts = nx * ny
    npix = (row1 - row0) * width
    total = int(counts.sum())
    if total == 0:
        return np.full((npix, 0), -1, dtype=np.int64)
    k = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[k] + local % nx[k]
    py = ya[k] + local // nx[k]
    prim = order[k]
    g = _gaussian_at(proj, prim, px, py)
    keep = proj.opacity[prim] * g >= ALPHA_MIN
    prim, px, py = prim[keep], px[keep], py[keep]
    pix = (py - row0) * width + px
    perm = np.argsort(pix, kind="stable")
    pix, prim = pix[perm], prim[perm]
    per_pixel = np.bincount(pix, minlength=npix)
    L = int(per_pixel.max()) if len(pix) else 0
    starts = np.cumsum(per_pixel) - per_pixel
    slot = np.arange(len(pix)) - starts[pix]
    index = np.full((npix, L), -1, dtype=np.int64)
    index[pix, slot] = prim
    return index


def _pixel_coords(row0, row1, width):
    rows, cols = np.divmod(np.arange((row1 - row0) * width), width)
    return cols.astype(np.float64), (rows + row0).astype(np.float64)


def _evaluate_block(proj, index, row0, row1, width, frozen=None):
    """Alpha, transmittance and gating for a candidate layout.

    With ``frozen=(included, capped)`` the gate decisions are taken as given
    instead of being recomputed; finite-difference checks use this to stay
    on one smooth branch of the forward map.
    """
    valid = index >= 0
    safe = np.where(valid, index, 0)
    px, py = _pixel_coords(row0, row1, width)
    g = _gaussian_at(proj, safe, px[:, None], py[:, None]) * valid
    og = proj.opacity[safe] * g
    if frozen is None:
        capped = valid & (og > ALPHA_MAX)
        alpha = np.where(capped, ALPHA_MAX, og)
        t_all = np.cumprod(1.0 - alpha, axis=1)
        t_excl = np.concatenate([np.ones((len(index), 1)), t_all[:, :-1]], axis=1)
        included = valid & (t_excl >= T_MIN)
    else:
        included, capped = frozen
        alpha = np.where(capped, ALPHA_MAX, og)
    alpha = alpha * included
    t_all = np.cumprod(1.0 - alpha, axis=1)
    ones = np.ones((len(index), 1))
    t_excl = np.concatenate([ones, t_all[:, :-1]], axis=1)
    t_final = t_all[:, -1] if index.shape[1] else ones[:, 0]
    return Block(row0, row1, index, g, alpha, t_excl, included, capped, t_final)


def _composite(proj: Projections, blk: Block, background: np.ndarray) -> np.ndarray:
    weight = blk.alpha * blk.transmittance
    color = proj.color[np.where(blk.index >= 0, blk.index, 0)]
    return np.einsum("pl,plc->pc", weight, color) + blk.final_transmittance[:, None] * background


def _run(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def rasterize(scene: Scene, cam: CameraView, keep_aux: bool = False, background=None,
              workers: int = 1, frozen: RenderAux | None = None):
    """Render ``scene`` from ``cam``.

    Returns ``(image, aux)`` where ``image`` is ``(H, W, 3)`` float64, not
    clamped, and ``aux`` is a :class:`RenderAux` when ``keep_aux`` is set
    (otherwise ``None``). Passing a previous render's aux as ``frozen``
    reuses its contribution lists and gate decisions.
    """
    if not isinstance(scene, Scene) or len(scene) == 0:
        raise InvalidParameterError("rasterize needs a nonempty scene")
    workers = check_count(workers, "workers")
    bg = np.zeros(3) if background is None else np.broadcast_to(
        np.asarray(background, dtype=np.float64), (3,)).copy()
    proj = project(scene, cam)
    H, W = cam.height, cam.width
    bands = [(r, min(r + BLOCK_ROWS, H)) for r in range(0, H, BLOCK_ROWS)]

    if frozen is not None:
        if frozen.n_primitives != len(scene) or (frozen.width, frozen.height) != (W, H):
            raise InvalidParameterError("frozen aux does not match scene/camera")

        def work(i):
            fb = frozen.blocks[i]
            return _evaluate_block(proj, fb.index, fb.row0, fb.row1, W, (fb.included, fb.capped))

        blocks = _run(work, range(len(bands)), workers)
    else:
        order = depth_order(proj)
        bounds = _screen_bounds(proj, order, W, H)

        def work(band):
            index = _block_layout(proj, order, bounds, band[0], band[1], W)
            return _evaluate_block(proj, index, band[0], band[1], W)

        blocks = _run(work, bands, workers)

    image = np.concatenate([_composite(proj, b, bg) for b in blocks]).reshape(H, W, 3)
    aux = None
    if keep_aux:
        aux = RenderAux(proj, blocks, bg, W, H, len(scene), scene.fingerprint())
    return image, aux


def render(scene: Scene, cam: CameraView, background=None, workers: int = 1) -> np.ndarray:
    return rasterize(scene, cam, background=background, workers=workers)[0]


# ---------------------------------------------------------------------------
# resampling


def _linear_weights(n_src: int, n_dst: int) -> np.ndarray:
    """``(n_dst, n_src)`` half-pixel-aligned linear interpolation matrix, edge clamped."""
    scale = n_src / n_dst
    x = np.maximum((np.arange(n_dst) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(x).astype(np.int64), n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = x - i0
    m = np.zeros((n_dst, n_src))
    np.add.at(m, (np.arange(n_dst), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_dst), i1), frac)
    return m


def _area_weights(n_src: int, factor: int) -> np.ndarray:
    m = np.zeros((n_src // factor, n_src))
    for i in range(n_src // factor):
        m[i, i * factor:(i + 1) * factor] = 1.0 / factor
    return m


def _cubic_weights(n_src: int, n_dst: int, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution, half-pixel aligned, edge clamped."""
    def kernel(t):
        t = np.abs(t)
        return np.where(
            t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
            np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0))

    x = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    base = np.floor(x).astype(np.int64)
    m = np.zeros((n_dst, n_src))
    for off in (-1, 0, 1, 2):
        idx = base + off
        np.add.at(m, (np.arange(n_dst), np.clip(idx, 0, n_src - 1)), kernel(x - idx))
    return m


@functools.lru_cache(maxsize=32)
def resample_matrices(height: int, width: int, out_height: int, out_width: int, mode: str):
    """Row and column weight matrices ``(my, mx)``; the output is ``my @ img @ mx.T`` per channel."""
    my, mx = _resample_matrices(height, width, out_height, out_width, mode)
    my.setflags(write=False)
    mx.setflags(write=False)
    return my, mx


def _resample_matrices(height, width, out_height, out_width, mode):
    if mode == "bilinear":
        return _linear_weights(height, out_height), _linear_weights(width, out_width)
    if mode == "bicubic":
        return _cubic_weights(height, out_height), _cubic_weights(width, out_width)
    if mode == "area":
        return _area_weights(height, height // out_height), _area_weights(width, width // out_width)
    raise InvalidParameterError(f"unknown resampling mode {mode!r}")


def _apply(img, my, mx):
    h, w, c = img.shape
    rows = (my @ img.reshape(h, w * c)).reshape(my.shape[0], w, c)
    return np.matmul(mx, rows)


def downsample(img, factor: int, mode: str = "bilinear") -> np.ndarray:
    """Shrink an image by an integer factor.

    ``bilinear`` samples each destination pixel center mapped into the
    source grid with half-pixel alignment (no antialiasing prefilter);
    ``area`` averages each ``factor`` x ``factor`` block.
    """
    img = check_image(img)
    factor = check_count(factor, "factor")
    H, W = img.shape[:2]
    if H % factor or W % factor:
        raise InvalidParameterError(f"image size {W}x{H} is not divisible by {factor}")
    if factor == 1:
        return img.copy()
    my, mx = resample_matrices(H, W, H // factor, W // factor, mode)
    return _apply(img, my, mx)


def downsample_adjoint(grad, factor: int, mode: str = "bilinear") -> np.ndarray:
    """Transpose of :func:`downsample`: pulls a gradient on the small image back to the large one."""
    grad = np.asarray(grad, dtype=np.float64)
    if factor == 1:
        return grad.copy()
    h, w = grad.shape[:2]
    my, mx = resample_matrices(h * factor, w * factor, h, w, mode)
    return _apply(grad, my.T, mx.T)


def upsample(img, factor: int, mode: str = "bilinear") -> np.ndarray:
    img = check_image(img)
    factor = check_count(factor, "factor")
    if factor == 1:
        return img.copy()
    H, W = img.shape[:2]
    if mode == "area":
        raise InvalidParameterError("area mode only shrinks")
    my, mx = resample_matrices(H, W, H * factor, W * factor, mode)
    return _apply(img, my, mx)
