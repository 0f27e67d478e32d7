"""File formats: 3DGS-style binary PLY, binary PPM, camera lists, config files and CSVs.

All writers go through :func:`atomic_write`, so a crashed run never leaves
a half-written file behind.
"""

from __future__ import annotations

import csv
import io
import os
import re
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from ._validation import ConfigError, InvalidParameterError, ParseError, check_image
from .scene import CameraView, Scene, logit, sigmoid

SH_C0 = 0.28209479177387814

PLY_PROPERTIES = (
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
)
_COLOR_EPS = 1e-12


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PLY


def ply_bytes(scene: Scene) -> bytes:
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    data = np.zeros((n, len(PLY_PROPERTIES)), dtype=np.float64)
    data[:, 0:3] = scene.positions
    data[:, 6:9] = (sigmoid(scene.color_logits) - 0.5) / SH_C0
    data[:, 9] = scene.opacity_logits
    data[:, 10:13] = scene.log_scales
    data[:, 13:17] = scene.rotations
    return ("\n".join(header) + "\n").encode("ascii") + data.astype("<f4").tobytes()


def ply_write(scene: Scene, path) -> None:
    atomic_write(path, ply_bytes(scene))


def ply_parse(buf: bytes, extent: float | None = None) -> Scene:
    """Decode a binary little-endian Gaussian PLY.

    Besides the canonical property list, files carrying higher-order
    ``f_rest_*`` coefficients after ``f_dc_2`` are accepted; those are
    ignored. ``extent`` defaults to the bounding radius of the positions.
    """
    if not buf.startswith(b"ply\n"):
        raise ParseError("missing 'ply' magic", 0)
    end = buf.find(b"\nend_header\n")
    if end < 0:
        raise ParseError("header has no end_header line", len(buf))
    header_end = end + len(b"\nend_header\n")
    try:
        lines = buf[4:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise ParseError("header is not ASCII", 4 + exc.start) from None

    offset = 4
    count = None
    seen_format = False
    names = []
    for line in lines:
        parts = line.split(" ")
        if line.startswith("comment ") or line.startswith("obj_info "):
            pass
        elif parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise ParseError(f"unsupported format line {line!r}", offset)
            seen_format = True
        elif parts[0] == "element":
            if count is not None or len(parts) != 3 or parts[1] != "vertex":
                raise ParseError(f"unexpected element line {line!r}", offset)
            if not re.fullmatch(r"[0-9]+", parts[2]):
                raise ParseError(f"bad vertex count {parts[2]!r}", offset)
            count = int(parts[2])
        elif parts[0] == "property":
            if count is None or len(parts) != 3 or parts[1] != "float":
                raise ParseError(f"unsupported property line {line!r}", offset)
            names.append(parts[2])
        else:
            raise ParseError(f"unrecognised header line {line!r}", offset)
        offset += len(line) + 1
    if not seen_format:
        raise ParseError("header has no format line", 4)
    if count is None:
        raise ParseError("header declares no vertex element", header_end)
    if count < 1:
        raise ParseError("vertex count must be at least 1", header_end)

    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    expected = list(PLY_PROPERTIES[:9]) + [f"f_rest_{k}" for k in range(n_rest)] + list(PLY_PROPERTIES[9:])
    if names != expected:
        raise ParseError(f"unexpected property order {names}", header_end)

    stride = 4 * len(names)
    payload = buf[header_end:]
    if len(payload) != count * stride:
        raise ParseError(
            f"payload has {len(payload)} bytes, header implies {count * stride}", header_end + len(payload))
    data = np.frombuffer(payload, dtype="<f4").reshape(count, len(names)).astype(np.float64)
    if not np.all(np.isfinite(data)):
        row = int(np.argmax(~np.all(np.isfinite(data), axis=1)))
        raise ParseError("non-finite value in vertex data", header_end + row * stride)
    col = {nm: i for i, nm in enumerate(names)}

    def cols(*keys):
        return data[:, [col[k] for k in keys]]

    rotations = cols("rot_0", "rot_1", "rot_2", "rot_3")
    bad = np.linalg.norm(rotations, axis=1) == 0.0
    if bad.any():
        raise ParseError("zero rotation vector", header_end + int(np.argmax(bad)) * stride)
    positions = cols("x", "y", "z")
    color = np.clip(cols("f_dc_0", "f_dc_1", "f_dc_2") * SH_C0 + 0.5, _COLOR_EPS, 1.0 - _COLOR_EPS)
    if extent is None:
        extent = float(np.max(np.linalg.norm(positions - positions.mean(axis=0), axis=1)))
        extent = extent if extent > 0 else 1.0
    return Scene(positions, cols("scale_0", "scale_1", "scale_2"), rotations,
                 data[:, col["opacity"]], logit(color), extent)


def ply_read(path, extent: float | None = None) -> Scene:
    return ply_parse(Path(path).read_bytes(), extent)


# ---------------------------------------------------------------------------
# PPM


def ppm_bytes(img) -> bytes:
    img = check_image(img)
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def ppm_write(img, path) -> None:
    atomic_write(path, ppm_bytes(img))


_PPM_WS = b" \t\r\n"


def ppm_parse(buf: bytes) -> np.ndarray:
    if not buf.startswith(b"P6"):
        raise ParseError("not a binary PPM (expected 'P6')", 0)
    pos = 2
    tokens = []
    while len(tokens) < 3:
        start = pos
        while pos < len(buf) and (buf[pos] in _PPM_WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] != ord("\n"):
                    pos += 1
            pos += 1
        if pos == start:
            raise ParseError("expected whitespace in header", pos)
        tok_start = pos
        while pos < len(buf) and buf[pos] not in _PPM_WS and buf[pos] != ord("#"):
            pos += 1
        tok = buf[tok_start:pos]
        if not re.fullmatch(rb"[0-9]{1,9}", tok):
            raise ParseError(f"bad header field {tok[:16]!r}", tok_start)
        tokens.append(int(tok))
    if pos >= len(buf) or buf[pos] not in _PPM_WS:
        raise ParseError("header not terminated by whitespace", pos)
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise ParseError(f"maxval must be 255, got {maxval}", pos)
    if w < 1 or h < 1:
        raise ParseError("image has zero size", pos)
    payload = buf[pos:]
    if len(payload) != w * h * 3:
        raise ParseError(f"payload has {len(payload)} bytes, expected {w * h * 3}", pos + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def ppm_read(path) -> np.ndarray:
    return ppm_parse(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# cameras: "id fx fy cx cy w h" followed by the 12 entries of the 3x4 world-to-camera


def cameras_text(cams) -> str:
    lines = []
    for i, c in enumerate(cams):
        nums = [*c.focal, *c.principal_point]
        vals = [str(i), *map(repr, map(float, nums)), str(c.width), str(c.height)]
        vals += [repr(float(x)) for x in c.world_to_camera[:3].ravel()]
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def cameras_write(cams, path) -> None:
    atomic_write(path, cameras_text(cams).encode("ascii"))


def cameras_parse(text: str) -> list[CameraView]:
    cams = []
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            parts = body.split()
            if len(parts) != 19:
                raise ParseError(f"camera line has {len(parts)} fields, expected 19", offset)
            try:
                fx, fy, cx, cy = map(float, parts[1:5])
                w, h = int(parts[5]), int(parts[6])
                w2c = np.array([float(x) for x in parts[7:]]).reshape(3, 4)
                cams.append(CameraView(w2c, (fx, fy), (cx, cy), w, h))
            except (ValueError, InvalidParameterError) as exc:
                raise ParseError(f"invalid camera: {exc}", offset) from None
        offset += len(line.encode("utf-8"))
    return cams


def cameras_read(path) -> list[CameraView]:
    return cameras_parse(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# config


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            vals = tuple(float(x) for x in raw.split(","))
            if len(vals) != len(default):
                raise ValueError(raw)
            return vals
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(path=None, overrides=(), text: str | None = None):
    """Build a :class:`~splatsr.train.TrainConfig` from a ``key=value`` file plus overrides.

    ``overrides`` are ``"key=value"`` strings (or a mapping) applied after
    the file, so they win.
    """
    from .train import TrainConfig

    defaults = {f.name: f.default for f in fields(TrainConfig)}
    values = {}
    pairs = []
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    if text:
        for line in text.splitlines():
            body = line.split("#", 1)[0].strip()
            if body:
                pairs.append(body)
    if isinstance(overrides, dict):
        pairs += [f"{k}={v}" for k, v in overrides.items()]
    else:
        pairs += list(overrides)
    for body in pairs:
        if "=" not in body:
            raise ConfigError(body, "expected key=value")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in defaults:
            raise ConfigError(key, "unknown key")
        values[key] = _parse_value(key, raw, defaults[key])
    try:
        return TrainConfig(**values)
    except InvalidParameterError as exc:
        bad = next((k for k in values if k in str(exc)), "config")
        raise ConfigError(bad, str(exc)) from None


def config_text(cfg) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name}={v}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# CSV


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def write_telemetry(rows, path) -> None:
    from .train import TELEMETRY_HEADER

    atomic_write(path, csv_bytes(TELEMETRY_HEADER, [r.as_csv_fields() for r in rows]))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
