"""8-bit PPM/PNG image and frame-directory I/O."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_PATTERN = "frame_{:06d}.ppm"
_FRAME_RE = re.compile(r"frame_(\d+)\.(ppm|png)$", re.IGNORECASE)


def read_image(path) -> np.ndarray:
    """(H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    fmt = "PNG" if path.suffix.lower() == ".png" else "PPM"
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format=fmt)


def list_frames(directory) -> list[Path]:
    found = []
    for p in Path(directory).iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise FileNotFoundError(f"no frame_NNNNNN.ppm/png files in {directory}")
    return [p for _, p in sorted(found)]


def read_frames(directory) -> list[np.ndarray]:
    return [read_image(p) for p in list_frames(directory)]


def write_frames(directory, frames) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = directory / FRAME_PATTERN.format(i)
        write_image(p, f)
        paths.append(p)
    return paths
