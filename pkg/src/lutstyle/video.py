"""Scene segmentation by Lab histograms and per-scene LUT reuse for video."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from skimage.color import rgb2lab

from .irstyle import IRStyleModel, LutSet, make_thumbnail

LAB_BINS = 32
LAB_RANGES = ((0.0, 100.0), (-128.0, 128.0), (-128.0, 128.0))
DEFAULT_SCENE_THRESHOLD = 0.3


def lab_histograms(frame: np.ndarray, bins: int = LAB_BINS) -> np.ndarray:
    """(3, bins) normalised histograms of L, a, b (D65)."""
    lab = rgb2lab(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)).reshape(-1, 3)
    # Neutral colors sit on the a/b bin edge at 0; rounding removes the
    # conversion's ~1e-3 noise so they land in one bin consistently.
    lab = np.round(lab, 2) + 0.0
    out = np.empty((3, bins))
    for c, (lo, hi) in enumerate(LAB_RANGES):
        h, _ = np.histogram(np.clip(lab[:, c], lo, hi), bins=bins, range=(lo, hi))
        out[c] = h / max(lab.shape[0], 1)
    return out


def lab_channel_distances(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """Half L1 distance between the normalised histograms, per channel (each in [0, 1])."""
    return 0.5 * np.abs(lab_histograms(f1) - lab_histograms(f2)).sum(axis=1)


def lab_histogram_distance(f1: np.ndarray, f2: np.ndarray) -> float:
    return float(lab_channel_distances(f1, f2).mean())


def segment_scenes(frames: Sequence[np.ndarray], threshold: float = DEFAULT_SCENE_THRESHOLD,
                   distance: Callable[[np.ndarray, np.ndarray], float] = lab_histogram_distance
                   ) -> list[range]:
    """Contiguous frame ranges; a cut is placed before frame i when d(i-1, i) > threshold."""
    if len(frames) == 0:
        raise ValueError("empty clip")
    starts = [0]
    for i in range(1, len(frames)):
        if distance(frames[i - 1], frames[i]) > threshold:
            starts.append(i)
    bounds = starts + [len(frames)]
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class VideoTransfer:
    frames: list[np.ndarray]
    segments: list[range]
    luts: list[LutSet]


def transfer_video(frames: Sequence[np.ndarray], style: np.ndarray, model: IRStyleModel,
                   threshold: float = DEFAULT_SCENE_THRESHOLD, threads: int | None = None) -> VideoTransfer:
    """Predict one LUT set per scene from its first frame and apply it to the whole scene."""
    segments = segment_scenes(frames, threshold)
    style_thumb = make_thumbnail(style)
    out: list[np.ndarray] = [None] * len(frames)
    luts = []
    for seg in segments:
        lut_set = model.predict_luts(make_thumbnail(frames[seg.start]), style_thumb)
        luts.append(lut_set)
        for i in seg:
            out[i] = lut_set.apply(frames[i], threads=threads)[0]
    return VideoTransfer(out, segments, luts)
