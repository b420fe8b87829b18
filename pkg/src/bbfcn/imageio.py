"""Image containers, annotation files and zero-padded cropping."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError, ParseError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class AnnotatedFace:
    image: str
    box: tuple[float, float, float, float]  # x, y, w, h
    points: np.ndarray  # K x 2, (x, y)
    visible: np.ndarray  # K bools

    @property
    def K(self) -> int:
        return len(self.points)

    @property
    def box_length(self) -> float:
        return float(max(self.box[2], self.box[3]))


# ---------------------------------------------------------------- decoding


def _read_netpbm(data: bytes) -> np.ndarray:
    magic = data[:2]
    channels = {b"P6": 3, b"P5": 1}[magic]
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"bad netpbm header token {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError("bad netpbm dimensions or maxval")
    pos += 1  # single whitespace before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(data) - pos < count * dtype.itemsize:
        raise FormatError("truncated netpbm raster")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    img = raster.reshape(height, width, channels).astype(np.float32) / np.float32(maxval)
    img = img.transpose(2, 0, 1)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return np.ascontiguousarray(img)


def _read_png(data: bytes) -> np.ndarray:
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = np.repeat(arr[None], 3, axis=0)
                return arr.astype(np.float32)
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255)
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"cannot decode PNG: {exc}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def decode_image(source) -> np.ndarray:
    """Decode PNG or binary PPM/PGM into a 3 x H x W float32 array in [0, 1].

    ``source`` is raw bytes or a path.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if data.startswith(PNG_SIGNATURE):
        return _read_png(data)
    if data[:2] in (b"P5", b"P6"):
        return _read_netpbm(data)
    raise FormatError("unsupported image container (expected PNG, P5 or P6)")


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 with maxval 255."""
    rgb = _to_uint8(image).transpose(1, 2, 0)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    """Binary P5 with maxval 255 from an H x W array in [0, 1]."""
    g = _to_uint8(gray)
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode() + g.tobytes()


def write_image(path, image: np.ndarray) -> None:
    """Write a 3 x H x W image; container chosen by suffix (.ppm or .png)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        PILImage.fromarray(_to_uint8(image).transpose(1, 2, 0), "RGB").save(path)
    else:
        path.write_bytes(encode_ppm(image))


def write_gray_png(path, gray_u8: np.ndarray) -> None:
    PILImage.fromarray(gray_u8, "L").save(path)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so the image survives an 8-bit container exactly."""
    return (_to_uint8(image).astype(np.float32) / np.float32(255)).astype(np.float32)


# ---------------------------------------------------------------- annotations


def _number(token: str, line_no: int) -> float:
    try:
        return float(token.replace("−", "-"))
    except ValueError:
        raise ParseError(f"non-numeric token {token!r}", line_no) from None


def parse_annotation_text(text: str, K: int | None = None) -> list[AnnotatedFace]:
    faces = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            if key.strip() == "K":
                try:
                    K = int(value)
                except ValueError:
                    raise ParseError(f"bad K header {line!r}", line_no) from None
            continue
        if K is None:
            raise ParseError("missing #K=<int> header before first face", line_no)
        tokens = line.split()
        expected = 5 + 2 * K
        if len(tokens) != expected:
            raise ParseError(f"expected {expected} fields for K={K}, got {len(tokens)}", line_no)
        nums = [_number(t, line_no) for t in tokens[1:]]
        pts = np.array(nums[4:], dtype=np.float64).reshape(K, 2)
        visible = ~np.all(pts == -1, axis=1)
        faces.append(AnnotatedFace(tokens[0], tuple(nums[:4]), pts, visible))
    return faces


def parse_annotations(path, K: int | None = None) -> list[AnnotatedFace]:
    """One face per line: ``path box_x box_y box_w box_h x1 y1 ... xK yK``.

    A ``-1 -1`` pair marks an invisible landmark.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_annotation_text(fh.read(), K)


def format_annotations(faces: list[AnnotatedFace], K: int) -> str:
    def num(v: float) -> str:
        return f"{v:.4f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))

    lines = [f"#K={K}"]
    for f in faces:
        fields = [f.image] + [num(v) for v in f.box]
        for (x, y), vis in zip(f.points, f.visible):
            fields += [num(x), num(y)] if vis else ["-1", "-1"]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def resolve_image_path(face: AnnotatedFace, annotation_path) -> str:
    if os.path.isabs(face.image):
        return face.image
    return os.path.join(os.path.dirname(os.path.abspath(annotation_path)), face.image)


# ---------------------------------------------------------------- cropping


def crop_with_zero_pad(source: np.ndarray, center, side: int) -> np.ndarray:
    """``side x side`` window whose pixel (u, v) is ``source[center - side//2 + (u, v)]``.

    Works on H x W or C x H x W arrays; out-of-bounds pixels are zero. A
    fractional centre is rounded half up.
    """
    if side < 1:
        raise ValueError("side must be at least 1")
    cx = math.floor(center[0] + 0.5)
    cy = math.floor(center[1] + 0.5)
    return crop_region(source, cx - side // 2, cy - side // 2, side, side)


def crop_region(source: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Rectangular crop with top-left (x0, y0), zero outside the source."""
    H, W = source.shape[-2:]
    out = np.zeros(source.shape[:-2] + (h, w), dtype=source.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + w, W), min(y0 + h, H)
    if sx0 < sx1 and sy0 < sy1:
        out[..., sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = source[..., sy0:sy1, sx0:sx1]
    return out
