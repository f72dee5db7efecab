"""Grayscale images, pyramids, bilinear sampling and candidate-pixel selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ImageSizeError, SampleError
from .geometry import CameraModel

# offsets (dx, dy) of the 8 residual pixels around a point
PATTERN = np.array([(0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1)],
                   dtype=np.float64)


class GrayImage:
    """Float intensities in [0, 255], row-major ``data[y, x]``."""

    def __init__(self, data):
        data = np.array(data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("expected a 2D intensity array")
        if not np.all(np.isfinite(data)):
            raise ValueError("intensities must be finite")
        data.flags.writeable = False
        self.data = data

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @cached_property
    def gradients(self):
        """Central differences at integer pixels, zero on the 1-pixel border."""
        gx = np.zeros_like(self.data)
        gy = np.zeros_like(self.data)
        gx[1:-1, 1:-1] = 0.5 * (self.data[1:-1, 2:] - self.data[1:-1, :-2])
        gy[1:-1, 1:-1] = 0.5 * (self.data[2:, 1:-1] - self.data[:-2, 1:-1])
        gx.flags.writeable = False
        gy.flags.writeable = False
        return gx, gy

    @cached_property
    def gradient_magnitude(self):
        gx, gy = self.gradients
        return np.hypot(gx, gy)


def _bilinear(data, x, y):
    h, w = data.shape
    x0 = min(int(np.floor(x)), w - 2)
    y0 = min(int(np.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    return ((1 - fy) * ((1 - fx) * data[y0, x0] + fx * data[y0, x0 + 1])
            + fy * ((1 - fx) * data[y0 + 1, x0] + fx * data[y0 + 1, x0 + 1]))


def sample_bilinear(img, u):
    x, y = float(u[0]), float(u[1])
    if not (0.0 <= x <= img.width - 1 and 0.0 <= y <= img.height - 1):
        raise SampleError(f"sample at ({x:.2f}, {y:.2f}) outside the image")
    return float(_bilinear(img.data, x, y))


def gradient_at(img, u):
    x, y = float(u[0]), float(u[1])
    if not (1.0 <= x <= img.width - 2 and 1.0 <= y <= img.height - 2):
        raise SampleError(f"gradient at ({x:.2f}, {y:.2f}) too close to the border")
    gx, gy = img.gradients
    return np.array([_bilinear(gx, x, y), _bilinear(gy, x, y)])


def downsample(data):
    h, w = data.shape[0] // 2, data.shape[1] // 2
    d = data[:2 * h, :2 * w]
    return 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])


@dataclass
class Pyramid:
    levels: list
    cameras: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, level):
        return self.levels[level]


def build_pyramid(img, cam, n_levels):
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    need = 2 ** (n_levels - 1)
    if img.width < need or img.height < need:
        raise ImageSizeError(f"{img.width}x{img.height} image too small for {n_levels} levels")
    levels = [img]
    cams = [cam]
    for level in range(1, n_levels):
        levels.append(GrayImage(downsample(levels[-1].data)))
        cams.append(cam.at_level(level))
    return Pyramid(levels, cams)


def select_candidates(img, target_count, block=16, margin=7.0, border=4):
    """Pick at most one high-gradient pixel per ``block`` x ``block`` cell.

    A block's winner is its gradient-magnitude maximum, kept only when it exceeds
    the block's median magnitude plus ``margin``.  Pixels within ``border`` of
    the image edge are never selected.  When more blocks qualify than
    ``target_count``, the strongest margins over threshold are kept.
    Returns an (N, 2) integer array of (x, y) pixels.
    """
    h, w = img.height, img.width
    if w <= block or h <= block:
        raise ImageSizeError("image smaller than one candidate block")
    mag = np.array(img.gradient_magnitude)
    usable = np.zeros_like(mag, dtype=bool)
    usable[border:h - border, border:w - border] = True
    nby, nbx = h // block, w // block
    cells = mag[:nby * block, :nbx * block].reshape(nby, block, nbx, block).transpose(0, 2, 1, 3)
    cells = cells.reshape(nby, nbx, block * block)
    mask = usable[:nby * block, :nbx * block].reshape(nby, block, nbx, block).transpose(0, 2, 1, 3)
    mask = mask.reshape(nby, nbx, block * block)
    thresholds = np.median(cells, axis=2) + margin
    scores = np.where(mask, cells, -np.inf)
    best = np.argmax(scores, axis=2)
    best_val = np.take_along_axis(scores, best[..., None], axis=2)[..., 0]
    keep = best_val > thresholds
    by, bx = np.nonzero(keep)
    if len(by) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    local = best[by, bx]
    xs = bx * block + local % block
    ys = by * block + local // block
    excess = best_val[by, bx] - thresholds[by, bx]
    if len(xs) > target_count:
        order = np.argsort(-excess, kind="stable")[:target_count]
        order.sort()
        xs, ys = xs[order], ys[order]
    return np.stack([xs, ys], axis=1).astype(np.int64)
