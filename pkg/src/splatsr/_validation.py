"""Input validation helpers and the package's exception types."""

from __future__ import annotations

import numbers

import numpy as np


class InvalidParameterError(ValueError):
    """A caller-supplied value violates an operation's precondition."""


class InconsistentStateError(RuntimeError):
    """Two pieces of state that must agree (scene, aux, stats, optimizer) do not."""


class ParseError(ValueError):
    """A file could not be decoded. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A configuration key is unknown or its value does not parse."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def check_image(img, name: str = "image", shape: tuple[int, int] | None = None) -> np.ndarray:
    """Return ``img`` as a float64 ``(H, W, 3)`` array, rejecting non-finite values."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidParameterError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidParameterError(f"{name} is empty")
    if shape is not None and arr.shape[:2] != tuple(shape):
        raise InvalidParameterError(
            f"{name} has size {arr.shape[1]}x{arr.shape[0]}, expected {shape[1]}x{shape[0]}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise InvalidParameterError(f"{names[0]} {a.shape} and {names[1]} {b.shape} differ in shape")


def check_probability(p, name: str = "p") -> float:
    if not isinstance(p, numbers.Real) or not 0.0 <= float(p) <= 1.0:
        raise InvalidParameterError(f"{name} must lie in [0, 1], got {p!r}")
    return float(p)


def check_positive(x, name: str) -> float:
    if not isinstance(x, numbers.Real) or not np.isfinite(x) or x <= 0:
        raise InvalidParameterError(f"{name} must be a positive finite number, got {x!r}")
    return float(x)


def check_count(n, name: str, minimum: int = 1) -> int:
    if isinstance(n, bool) or not isinstance(n, numbers.Integral) or n < minimum:
        raise InvalidParameterError(f"{name} must be an integer >= {minimum}, got {n!r}")
    return int(n)


def check_vector(x, size: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1:] != (size,):
        raise InvalidParameterError(f"{name} must have trailing dimension {size}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return arr
