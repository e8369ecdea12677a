"""Camera frame preprocessing with integer-only, shift-friendly arithmetic.

320x240 RGB -> central 224x224 crop -> grayscale (8G + 5R + 3B) >> 4
-> 8x8 block means (sum >> 6) -> 28x28 bytes.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

FRAME_W, FRAME_H = 320, 240
CROP = 224
BLOCK = 8
OUT = CROP // BLOCK  # 28


class FrameError(ValueError):
    pass


def crop_center(frame: np.ndarray, size: int = CROP) -> np.ndarray:
    """Central ``size`` x ``size`` window of a (240, 320[, 3]) frame."""
    frame = np.asarray(frame)
    if frame.shape[:2] != (FRAME_H, FRAME_W):
        raise FrameError(f"expected a {FRAME_W}x{FRAME_H} frame, got {frame.shape[1]}x{frame.shape[0]}")
    dx, dy = FRAME_W - size, FRAME_H - size
    assert dx % 2 == 0 and dy % 2 == 0, "odd crop margin"
    x0, y0 = dx // 2, dy // 2
    return frame[y0:y0 + size, x0:x0 + size]


def to_gray(r, g, b):
    """Weighted grayscale: floor((8G + 5R + 3B) / 16). Works on ints or arrays."""
    if np.isscalar(r):
        return ((int(g) << 3) + 5 * int(r) + 3 * int(b)) >> 4
    r, g, b = (np.asarray(c, dtype=np.int32) for c in (r, g, b))
    return (((g << 3) + 5 * r + 3 * b) >> 4).astype(np.uint8)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    return to_gray(rgb[..., 0], rgb[..., 1], rgb[..., 2])


def block_average(gray: np.ndarray, block: int = BLOCK) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.shape != (CROP, CROP):
        raise FrameError(f"expected a {CROP}x{CROP} image, got {gray.shape}")
    n = CROP // block
    sums = gray.astype(np.int32).reshape(n, block, n, block).sum(axis=(1, 3))
    return (sums >> 6 if block == 8 else sums // (block * block)).astype(np.uint8)


def preprocess_frame(frame: np.ndarray) -> np.ndarray:
    """Full camera pipeline. Accepts a colour (240, 320, 3) or gray (240, 320) frame."""
    crop = crop_center(frame)
    gray = rgb_to_gray(crop) if crop.ndim == 3 else crop.astype(np.uint8)
    return block_average(gray)


def image_to_digit(img: np.ndarray) -> np.ndarray:
    """Bring any supported still to 28x28 bytes: full frames go through the
    pipeline, 224x224 crops skip the crop, 28x28 grays pass unchanged."""
    img = np.asarray(img)
    if img.shape[:2] == (FRAME_H, FRAME_W):
        return preprocess_frame(img)
    gray = rgb_to_gray(img) if img.ndim == 3 else img.astype(np.uint8)
    if gray.shape == (CROP, CROP):
        return block_average(gray)
    if gray.shape == (OUT, OUT):
        return gray
    raise FrameError(f"unsupported image size {img.shape[1]}x{img.shape[0]}; "
                     f"expected {FRAME_W}x{FRAME_H}, {CROP}x{CROP} or {OUT}x{OUT}")


# -- netpbm ----------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _tokens(data: bytes, count: int, pos: int = 0):
    out = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FrameError("truncated netpbm header")
        out.append(m.group(1))
        pos = m.end()
    return out, pos


def read_pnm(path) -> np.ndarray:
    """Read P2/P5 (gray) or P3/P6 (RGB) with maxval <= 255 as uint8."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    magic = magic.decode("ascii", "replace")
    if magic not in ("P2", "P3", "P5", "P6"):
        raise FrameError(f"unsupported netpbm magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval <= 255:
        raise FrameError(f"only 8-bit netpbm files are supported (maxval {maxval})")
    channels = 3 if magic in ("P3", "P6") else 1
    n = w * h * channels
    if magic in ("P5", "P6"):
        raw = data[pos + 1:pos + 1 + n]  # exactly one whitespace byte after maxval
        if len(raw) < n:
            raise FrameError("truncated netpbm payload")
        arr = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    else:
        vals = data[pos:].split()
        if len(vals) < n:
            raise FrameError("truncated netpbm payload")
        arr = np.array([int(v) for v in vals[:n]], dtype=np.int64)
    if arr.max(initial=0) > maxval:
        raise FrameError("sample exceeds maxval")
    if maxval != 255:
        arr = (arr * 255 + maxval // 2) // maxval
    arr = arr.astype(np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pnm(path, img: np.ndarray, plain: bool = False) -> Path:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise FrameError("netpbm writer expects uint8 pixels")
    if img.ndim == 2:
        magic = "P2" if plain else "P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = "P3" if plain else "P6"
    else:
        raise FrameError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    if plain:
        rows = img.reshape(h, -1)
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in rows).encode("ascii") + b"\n"
    else:
        body = img.tobytes()
    path = Path(path)
    path.write_bytes(header + body)
    return path
