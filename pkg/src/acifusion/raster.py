"""8-bit raster I/O (binary PGM as the canonical format, PNG via Pillow)
and the bilinear resize used for heatmap upsampling."""

from __future__ import annotations

import os

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array of values in [0, 255] as binary PGM (P5)."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"PGM expects a 2-D image, got shape {arr.shape}")
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) into a float64 array of values in [0, 255]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.float64)


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    data = np.clip(np.rint(np.asarray(image)), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def read_image(path) -> np.ndarray:
    """Read a grayscale raster (PGM or PNG) as float64 in [0, 255]."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)


def to_unit(image: np.ndarray) -> np.ndarray:
    """Scale an 8-bit image to [0, 1]."""
    return np.asarray(image, dtype=np.float64) / 255.0


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (matches the usual
    align_corners=False convention)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy
