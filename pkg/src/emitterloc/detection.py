"""Candidate spot detection: band-pass filtering, robust thresholding, centroiding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.segmentation import watershed

from .errors import BoundsError, ParameterError
from .image_model import Image, Point2D, RegionOfInterest

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class Candidate:
    """A detected spot: filtered-image centroid plus the window cut for fitting."""

    centroid: Point2D
    peak_filtered_value: float
    subroi: RegionOfInterest


def dog_bandpass(image: Image, sigma_low: float = 1.0, sigma_high: float = 8.0) -> Image:
    """Difference of Gaussians ``G(sigma_low) * I - G(sigma_high) * I``.

    Reflective boundaries.  The result is a signed image.
    """
    if not (0 < sigma_low < sigma_high):
        raise ParameterError(f"need 0 < sigma_low < sigma_high, got {sigma_low}, {sigma_high}")
    img = np.asarray(image.counts, dtype=np.float64)
    low = ndimage.gaussian_filter(img, sigma_low, mode="reflect")
    high = ndimage.gaussian_filter(img, sigma_high, mode="reflect")
    return Image(low - high, image.pixel_scale, signed=True)


def _robust_threshold(values: np.ndarray, k: float) -> float:
    med = float(np.median(values))
    sigma = MAD_TO_SIGMA * float(np.median(np.abs(values - med)))
    # a noise-free field has zero MAD; keep the threshold strictly above the median
    sigma = max(sigma, 1e-9 * max(1.0, float(np.max(np.abs(values)))))
    return med + k * sigma, med


class _Group:
    __slots__ = ("w", "wx", "wy", "peak", "peak_pos")

    def __init__(self, w, wx, wy, peak, peak_pos):
        self.w, self.wx, self.wy, self.peak, self.peak_pos = w, wx, wy, peak, peak_pos

    @property
    def centroid(self):
        return self.wx / self.w, self.wy / self.w

    def absorb(self, other: "_Group"):
        self.w += other.w
        self.wx += other.wx
        self.wy += other.wy
        if other.peak > self.peak or (other.peak == self.peak and other.peak_pos < self.peak_pos):
            self.peak, self.peak_pos = other.peak, other.peak_pos


def _merge_close(groups: list[_Group], min_separation: float) -> list[_Group]:
    """Repeatedly fuse the closest pair of groups nearer than ``min_separation``."""
    groups = list(groups)
    while len(groups) > 1:
        c = np.array([g.centroid for g in groups])
        d = np.hypot(c[:, None, 0] - c[None, :, 0], c[:, None, 1] - c[None, :, 1])
        d[np.tril_indices(len(groups))] = np.inf
        flat = int(np.argmin(d))
        a, b = divmod(flat, len(groups))
        if not d[a, b] < min_separation:
            break
        groups[a].absorb(groups[b])
        del groups[b]
    return groups


def detect_candidates(
    filtered: Image,
    roi: RegionOfInterest,
    threshold_sigma: float = 5.0,
    min_separation: float = 4.0,
    subroi_halfwidth: int = 5,
) -> list[Candidate]:
    """Threshold the band-passed image inside ``roi`` and centroid the spots.

    Pixels above ``median + threshold_sigma * 1.4826 * MAD`` are grouped into
    8-connected components.  A component holding several local maxima is
    split between them by watershed, so neighbouring spots are kept apart
    until the distance merge decides otherwise.  Each group's centroid is
    weighted by its filtered value above the median, and groups whose
    centroids lie closer than ``min_separation`` are fused.

    Returns candidates ordered by descending peak value, ties by ``(y, x)``.
    """
    if threshold_sigma <= 0:
        raise ParameterError("threshold_sigma must be positive")
    if subroi_halfwidth < 2:
        raise ParameterError("subroi_halfwidth must be at least 2")
    if min_separation < 0:
        raise ParameterError("min_separation must be non-negative")
    if not roi.inside(filtered.width, filtered.height):
        raise BoundsError(f"{roi} extends outside the {filtered.width}x{filtered.height} image")

    f = np.asarray(filtered.counts, dtype=np.float64)[roi.slices]
    thr, med = _robust_threshold(f, threshold_sigma)
    mask = f > thr
    if not mask.any():
        return []

    eight = np.ones((3, 3), dtype=bool)
    peaks = mask & (f == ndimage.maximum_filter(f, footprint=eight, mode="constant", cval=-np.inf))
    seeds, _ = ndimage.label(peaks, structure=eight)
    labels = watershed(-f, markers=seeds, mask=mask, connectivity=2)

    weight = np.where(mask, f - med, 0.0)
    rows, cols = np.indices(f.shape)
    n = int(labels.max())
    index = np.arange(1, n + 1)
    w = ndimage.sum_labels(weight, labels, index)
    wx = ndimage.sum_labels(weight * cols, labels, index)
    wy = ndimage.sum_labels(weight * rows, labels, index)
    peak = ndimage.maximum(f, labels, index)
    peak_pos = ndimage.maximum_position(f, labels, index)
    groups = [
        _Group(float(w[k]), float(wx[k]), float(wy[k]), float(peak[k]), tuple(peak_pos[k]))
        for k in range(n)
        if w[k] > 0
    ]
    groups = _merge_close(groups, min_separation)

    out = []
    for g in groups:
        cx, cy = g.centroid
        x, y = cx + roi.x0, cy + roi.y0
        rx, ry = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        sub = RegionOfInterest.centered(rx, ry, subroi_halfwidth).clip(roi)
        out.append(Candidate(Point2D(x, y), g.peak, sub))
    out.sort(key=lambda c: (-c.peak_filtered_value, c.centroid.y, c.centroid.x))
    return out
