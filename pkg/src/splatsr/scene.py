"""Scene representation: Gaussian primitives, cameras, activations and synthetic generators.

Parameters are stored unconstrained (log scale, logit opacity, logit color)
so an optimizer step can never leave the valid domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    InvalidParameterError,
    check_count,
    check_image,
    check_positive,
    check_vector,
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_rotation(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidParameterError("rotation vector has zero norm")
    return r / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(w, x, y, z)``; works on ``(..., 4)``."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(log_scale, rotation) -> np.ndarray:
    """Covariance ``R diag(exp(log_scale))^2 R^T``.

    Accepts a single primitive (``(3,)``, ``(4,)``) or stacked arrays
    (``(n, 3)``, ``(n, 4)``).
    """
    log_scale = check_vector(log_scale, 3, "log_scale")
    rotation = check_vector(rotation, 4, "rotation")
    R = quaternion_to_matrix(normalize_rotation(rotation))
    L = R * np.exp(log_scale)[..., None, :]
    cov = L @ np.swapaxes(L, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color_logit: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", check_vector(self.position, 3, "position"))
        object.__setattr__(self, "log_scale", check_vector(self.log_scale, 3, "log_scale"))
        rot = check_vector(self.rotation, 4, "rotation")
        if np.linalg.norm(rot) == 0.0:
            raise InvalidParameterError("rotation vector has zero norm")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        object.__setattr__(self, "color_logit", check_vector(self.color_logit, 3, "color_logit"))


@dataclass(frozen=True)
class Activated:
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    rotation: np.ndarray


def activate(p) -> Activated:
    """Map stored parameters of a primitive (or a whole :class:`Scene`) to their activated values."""
    if isinstance(p, GaussianPrimitive):
        log_scale, opacity, color, rotation = p.log_scale, p.opacity_logit, p.color_logit, p.rotation
    else:
        log_scale, opacity, color, rotation = p.log_scales, p.opacity_logits, p.color_logits, p.rotations
    opacity = sigmoid(opacity)
    return Activated(
        scale=np.exp(log_scale),
        opacity=opacity[()] if opacity.ndim == 0 else opacity,
        color=sigmoid(color),
        rotation=normalize_rotation(rotation),
    )


def _frozen(a, shape, name) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidParameterError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Scene:
    """Struct-of-arrays collection of primitives.

    ``log_scale`` and friends are read-only arrays; operations that change
    a scene return a new one.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    extent: float

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0] if np.ndim(self.positions) == 2 else -1
        if n < 1:
            raise InvalidParameterError("a scene needs at least one primitive")
        object.__setattr__(self, "positions", _frozen(self.positions, (n, 3), "positions"))
        object.__setattr__(self, "log_scales", _frozen(self.log_scales, (n, 3), "log_scales"))
        object.__setattr__(self, "rotations", _frozen(self.rotations, (n, 4), "rotations"))
        object.__setattr__(self, "opacity_logits", _frozen(self.opacity_logits, (n,), "opacity_logits"))
        object.__setattr__(self, "color_logits", _frozen(self.color_logits, (n, 3), "color_logits"))
        if np.any(np.linalg.norm(self.rotations, axis=1) == 0.0):
            raise InvalidParameterError("rotation vector has zero norm")
        object.__setattr__(self, "extent", check_positive(float(self.extent), "extent"))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i], self.log_scales[i], self.rotations[i],
            self.opacity_logits[i], self.color_logits[i],
        )

    @classmethod
    def from_primitives(cls, primitives, extent: float) -> "Scene":
        prims = list(primitives)
        if not prims:
            raise InvalidParameterError("a scene needs at least one primitive")
        return cls(
            positions=np.stack([p.position for p in prims]),
            log_scales=np.stack([p.log_scale for p in prims]),
            rotations=np.stack([p.rotation for p in prims]),
            opacity_logits=np.array([p.opacity_logit for p in prims]),
            color_logits=np.stack([p.color_logit for p in prims]),
            extent=extent,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, attr) for name, attr in PARAM_GROUPS.items()}

    def replace(self, **groups) -> "Scene":
        """New scene with the named parameter groups swapped (group names as in ``PARAM_GROUPS``)."""
        kwargs = {attr: getattr(self, attr) for attr in PARAM_GROUPS.values()}
        for name, value in groups.items():
            if name == "extent":
                continue
            kwargs[PARAM_GROUPS[name]] = value
        return Scene(**kwargs, extent=groups.get("extent", self.extent))

    def take(self, index) -> "Scene":
        index = np.asarray(index)
        return Scene(
            self.positions[index], self.log_scales[index], self.rotations[index],
            self.opacity_logits[index], self.color_logits[index], self.extent,
        )

    def fingerprint(self) -> bytes:
        import hashlib

        h = hashlib.sha1()
        for attr in PARAM_GROUPS.values():
            h.update(getattr(self, attr).tobytes())
        return h.digest()


# optimizer-facing group name -> Scene attribute
PARAM_GROUPS = {
    "position": "positions",
    "log_scale": "log_scales",
    "rotation": "rotations",
    "opacity": "opacity_logits",
    "color": "color_logits",
}


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera (x right, y down, z forward) with an optional target image.

    Pixel ``(row, col)`` is sampled at image coordinates ``(col, row)``.
    """

    world_to_camera: np.ndarray
    focal: np.ndarray
    principal_point: np.ndarray
    width: int
    height: int
    target_image: np.ndarray | None = field(default=None)

    def __post_init__(self):
        w2c = np.array(self.world_to_camera, dtype=np.float64)
        if w2c.shape == (3, 4):
            w2c = np.vstack([w2c, [0.0, 0.0, 0.0, 1.0]])
        if w2c.shape != (4, 4) or not np.all(np.isfinite(w2c)):
            raise InvalidParameterError("world_to_camera must be a finite 4x4 matrix")
        R = w2c[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise InvalidParameterError("world_to_camera rotation block is not orthonormal")
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_camera", w2c)
        focal = check_vector(self.focal, 2, "focal")
        if np.any(focal <= 0):
            raise InvalidParameterError("focal lengths must be positive")
        object.__setattr__(self, "focal", focal)
        object.__setattr__(self, "principal_point", check_vector(self.principal_point, 2, "principal_point"))
        object.__setattr__(self, "width", check_count(self.width, "width"))
        object.__setattr__(self, "height", check_count(self.height, "height"))
        if self.target_image is not None:
            img = check_image(self.target_image, "target_image", (self.height, self.width))
            object.__setattr__(self, "target_image", img)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_target(self, image) -> "CameraView":
        return CameraView(self.world_to_camera, self.focal, self.principal_point,
                          self.width, self.height, image)

    def scaled(self, factor: int) -> "CameraView":
        """Same viewpoint at ``factor`` times the resolution, sample grids aligned.

        A pixel of this camera covers a ``factor`` x ``factor`` block of the
        scaled camera, sharing its center. The target image is dropped.
        """
        return CameraView(
            self.world_to_camera,
            self.focal * factor,
            (self.principal_point + 0.5) * factor - 0.5,
            self.width * factor,
            self.height * factor,
        )


def make_synthetic_scene(seed: int, n: int, extent: float) -> Scene:
    """Random scene with positions uniform in the ball of radius ``extent``.

    Color logits are uniform in [-2, 2], opacity logits in [0, 3] and log
    scales in [ln(0.02 extent), ln(0.08 extent)]; rotations are uniform
    unit quaternions.
    """
    n = check_count(n, "n")
    extent = check_positive(extent, "extent")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = extent * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    positions = direction * radius
    log_scales = rng.uniform(np.log(0.02 * extent), np.log(0.08 * extent), size=(n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity_logits = rng.uniform(0.0, 3.0, size=n)
    color_logits = rng.uniform(-2.0, 2.0, size=(n, 3))
    spread = float(np.max(np.linalg.norm(positions - positions.mean(axis=0), axis=1)))
    return Scene(positions, log_scales, rotations, opacity_logits, color_logits,
                 extent=spread if spread > 0 else extent)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ center
    return w2c


def make_camera_ring(n_views: int, radius: float, fov_deg: float, width: int, height: int,
                     phase_deg: float = 0.0) -> list[CameraView]:
    """Cameras evenly spaced on the horizontal circle ``z = 0``, all aimed at the origin.

    ``fov_deg`` is the horizontal field of view; both focal lengths equal
    ``(width / 2) / tan(fov / 2)``. The principal point is the image center
    ``((width - 1) / 2, (height - 1) / 2)`` in sample coordinates.
    """
    n_views = check_count(n_views, "n_views")
    radius = check_positive(radius, "radius")
    if not 0.0 < fov_deg < 180.0:
        raise InvalidParameterError(f"fov_deg must lie in (0, 180), got {fov_deg!r}")
    width = check_count(width, "width")
    height = check_count(height, "height")
    f = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    cams = []
    for k in range(n_views):
        theta = np.deg2rad(phase_deg) + 2.0 * np.pi * k / n_views
        center = radius * np.array([np.cos(theta), np.sin(theta), 0.0])
        cams.append(CameraView(look_at(center), (f, f), ((width - 1) / 2.0, (height - 1) / 2.0),
                               width, height))
    return cams
