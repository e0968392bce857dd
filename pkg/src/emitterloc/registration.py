"""Alignment-mark registration by template-convolution residual minimization.

Each mark region is cropped, flattened and binarized; a residual map is
built by comparing the template-filtered mark with the template-filtered ideal
mark at every candidate centre; a quadratic surface fitted around the
residual minimum gives the sub-pixel centre and its 68 % confidence interval.
Four marks then fix the rotation, the pixel scale and the write-field centre.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal, stats

from .errors import (
    BoundsError,
    ConvergenceError,
    DegenerateInputError,
    FitError,
    MarkNotFoundError,
    ParameterError,
    SaddlePointError,
)
from .image_model import (
    Image,
    PixelScale,
    Point2D,
    RegionOfInterest,
    rotate_image,
    rotate_points,
    rotated_window,
)

log = logging.getLogger(__name__)

# two-sided 68.27 % (one sigma) coverage
CI68_LEVEL = math.erf(1 / math.sqrt(2))


@dataclass(frozen=True, eq=False)
class Template:
    pattern: np.ndarray
    arm_length: int
    arm_width: int

    def __post_init__(self):
        p = np.asarray(self.pattern, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] % 2 == 0 or p.shape[1] % 2 == 0:
            raise ParameterError(f"template dimensions must be odd, got {p.shape}")
        if not np.all((p == 0) | (p == 1)) or p.sum() < 1:
            raise ParameterError("template must be binary with at least one set pixel")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "pattern", p)
        # binary pattern, so the self-convolution is integer valued
        ref = np.rint(signal.fftconvolve(p, p, mode="full"))
        ref.setflags(write=False)
        object.__setattr__(self, "self_convolution", ref)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pattern.shape


@dataclass(frozen=True, eq=False)
class BinaryMark:
    """Thresholded mark region; values lie in [0, 1] and are exactly 0/1 for a hard threshold."""

    pattern: np.ndarray
    source_roi: RegionOfInterest


@dataclass(frozen=True, eq=False)
class ResidualMap:
    """RMS residual per candidate centre.

    ``values[r, c]`` belongs to the candidate centre at parent-image pixel
    ``(origin[0] + c, origin[1] + r)``.
    """

    values: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ParameterError("residual map must be a finite, non-negative 2D array")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class QuadraticFit:
    """Least-squares fit of ``a0 + a1 x + a2 y + a3 x^2 + a4 y^2 + a5 x y``.

    Coefficients refer to coordinates measured from ``expansion_point``.
    """

    coefficients: np.ndarray
    covariance: np.ndarray
    minimum_point: Point2D
    ci68_x: float
    ci68_y: float
    expansion_point: tuple[float, float] = (0.0, 0.0)
    residual_rms: float = 0.0


@dataclass(frozen=True)
class RegistrationConfig:
    """Tunable parameters of :func:`register_field`.

    ``roi_halfwidth`` is the half-size of the square search window cut
    around each nominal mark position; it must exceed ``arm_length`` by at
    least ``fit_halfwidth``.
    """

    arm_length: int = 15
    arm_width: int = 3
    roi_halfwidth: int = 31
    flatten_sigma: float = 0.0
    threshold_quantile: float = 0.5
    threshold_softness: float = 1.0
    fit_halfwidth: int = 3
    recenter_iterations: int = 3
    angle_tol: float = 0.002
    max_iter: int = 10
    max_residual_ratio: float = 0.5

    def __post_init__(self):
        if self.arm_width < 1 or self.arm_width % 2 == 0:
            raise ParameterError(f"arm_width must be odd and >= 1, got {self.arm_width}")
        if self.arm_length < self.arm_width:
            raise ParameterError("arm_length must be >= arm_width")
        if self.roi_halfwidth < self.arm_length + self.fit_halfwidth:
            raise ParameterError("roi_halfwidth must be >= arm_length + fit_halfwidth")
        if not 0 < self.threshold_quantile < 1:
            raise ParameterError("threshold_quantile must lie in (0, 1)")
        if self.flatten_sigma < 0 or self.threshold_softness < 0:
            raise ParameterError("flatten_sigma and threshold_softness must be >= 0")
        if self.recenter_iterations < 0:
            raise ParameterError("recenter_iterations must be >= 0")
        if self.fit_halfwidth < 1:
            raise ParameterError("fit_halfwidth must be >= 1")
        if self.angle_tol <= 0 or self.max_iter < 1:
            raise ParameterError("angle_tol must be > 0 and max_iter >= 1")
        if not 0 < self.max_residual_ratio <= 1:
            raise ParameterError("max_residual_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class FieldRegistration:
    """Registered write field.

    Mark centres and the field centre are expressed in the corrected frame,
    i.e. the input image rotated by ``-rotation_deg`` about its centre.
    Marks are listed in the order they were supplied.
    """

    mark_centers: tuple[Point2D, ...]
    mark_ci68: tuple[tuple[float, float], ...]
    rotation_deg: float
    pixel_scale: PixelScale
    field_center: Point2D
    iterations_used: int
    rotation_center: tuple[float, float] = (0.0, 0.0)
    angle_history: tuple[float, ...] = ()
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.mark_centers) != 4 or len(self.mark_ci68) != 4:
            raise ParameterError("a write field is defined by exactly four marks")


def make_cross_template(arm_length: int, arm_width: int) -> Template:
    """Plus-shaped template on a ``(2 * arm_length + 1)`` square canvas."""
    if arm_width < 1 or arm_width % 2 == 0:
        raise ParameterError(f"arm_width must be odd and >= 1, got {arm_width}")
    if arm_length < arm_width:
        raise ParameterError(f"arm_length ({arm_length}) must be >= arm_width ({arm_width})")
    n = 2 * arm_length + 1
    d = np.abs(np.arange(n) - arm_length)
    half = arm_width // 2
    bar = d[:, None] <= half
    pattern = (bar | bar.T).astype(np.float64)
    return Template(pattern, arm_length, arm_width)


def preprocess_mark_region(
    image: Image,
    roi: RegionOfInterest,
    flatten_sigma: float = 0.0,
    threshold_quantile: float = 0.5,
    softness: float = 0.0,
) -> BinaryMark:
    """Crop, flatten and threshold one mark region.

    Flattening divides by a Gaussian-blurred copy of the crop (skipped when
    ``flatten_sigma`` is 0).  The threshold sits ``threshold_quantile`` of
    the way from the dark level (1st percentile) to the bright level (99th
    percentile) of the flattened crop.  With ``softness=0`` the result is
    strictly binary; larger values replace the step by a linear ramp
    spanning ``softness * (bright - dark)``, which keeps the sub-pixel edge
    information that a hard step throws away.
    """
    if not roi.inside(image.width, image.height):
        raise BoundsError(f"{roi} outside {image.width}x{image.height} image")
    return _threshold(image.counts[roi.slices], roi, flatten_sigma, threshold_quantile, softness)


def _threshold(sub: np.ndarray, roi, flatten_sigma, threshold_quantile, softness) -> BinaryMark:
    if not 0 < threshold_quantile < 1:
        raise ParameterError("threshold_quantile must lie in (0, 1)")
    if flatten_sigma < 0 or softness < 0:
        raise ParameterError("flatten_sigma and softness must be >= 0")
    sub = np.asarray(sub, dtype=np.float64)
    if flatten_sigma > 0:
        blurred = ndimage.gaussian_filter(sub, flatten_sigma, mode="reflect")
        if not np.any(blurred > 0):
            raise DegenerateInputError("mark region has no signal")
        sub = sub / np.maximum(blurred, 1e-12 * blurred.max())
    lo, hi = np.percentile(sub, [1.0, 99.0])
    if not hi > lo:
        lo, hi = sub.min(), sub.max()
    if not hi > lo:
        raise DegenerateInputError("mark region is uniform; threshold undefined")
    level = lo + threshold_quantile * (hi - lo)
    if softness == 0:
        pattern = (sub > level).astype(np.float64)
    else:
        band = softness * (hi - lo)
        pattern = np.clip((sub - level) / band + 0.5, 0.0, 1.0)
    return BinaryMark(pattern, roi)


def residual_map(mark: BinaryMark, template: Template) -> ResidualMap:
    """RMS of ``T * CM - T * T(x, y)`` for every centre where the template fits.

    ``T * CM`` is the full 2D convolution of the template with the processed
    mark; ``T * T(x, y)`` is the same convolution applied to an ideal mark
    (the template itself) placed with its centre at ``(x, y)``.  The RMS is
    taken over every pixel of the full convolution canvas.
    """
    cm = np.asarray(mark.pattern, dtype=np.float64)
    k = template.pattern
    th, tw = k.shape
    h, w = cm.shape
    if th > h or tw > w:
        raise ParameterError(f"template {k.shape} larger than mark region {cm.shape}")

    filtered = signal.convolve(cm, k, mode="full", method="fft")
    reference = template.self_convolution
    # sum((G - A_placed)^2) = sum(G^2) - 2 <G, A_placed> + sum(A^2)
    cross = signal.correlate(filtered, reference, mode="valid", method="fft")
    ssq = np.sum(filtered ** 2) - 2.0 * cross + np.sum(reference ** 2)
    npix = filtered.size
    values = np.sqrt(np.maximum(ssq, 0.0) / npix)

    roi = mark.source_roi
    origin = (roi.x0 + tw // 2, roi.y0 + th // 2)
    return ResidualMap(values, origin)


def _stationary_jacobian(a, mx, my):
    hess = np.array([[2 * a[3], a[5]], [a[5], 2 * a[4]]])
    rhs = np.zeros((2, 6))
    rhs[:, 1] = (1.0, 0.0)
    rhs[:, 2] = (0.0, 1.0)
    rhs[:, 3] = (2 * mx, 0.0)
    rhs[:, 4] = (0.0, 2 * my)
    rhs[:, 5] = (my, mx)
    return -np.linalg.solve(hess, rhs)


def fit_quadratic_minimum(rmap: ResidualMap, window_halfwidth: int = 3) -> QuadraticFit:
    """Fit a 6-coefficient quadratic around the discrete minimum of ``rmap``.

    The minimum location solves dP/dx = dP/dy = 0.  Its covariance follows
    from the coefficient covariance (residual variance times the inverse
    normal matrix) by first-order propagation; the reported half-widths use
    the Student-t quantile for 68.27 % two-sided coverage.
    """
    vals = rmap.values
    hw = int(window_halfwidth)
    n_win = (2 * hw + 1) ** 2
    if hw < 1 or n_win < 6:
        raise ParameterError("fit window must contain at least 6 points")
    r, c = np.unravel_index(np.argmin(vals), vals.shape)
    if r - hw < 0 or c - hw < 0 or r + hw >= vals.shape[0] or c + hw >= vals.shape[1]:
        raise FitError(f"fit window around minimum ({c}, {r}) leaves the residual map")

    win = vals[r - hw:r + hw + 1, c - hw:c + hw + 1]
    v, u = np.mgrid[-hw:hw + 1, -hw:hw + 1]
    u = u.ravel().astype(np.float64)
    v = v.ravel().astype(np.float64)
    design = np.column_stack([np.ones_like(u), u, v, u * u, v * v, u * v])
    z = win.ravel()
    normal = design.T @ design
    if np.linalg.matrix_rank(normal) < 6:
        raise FitError("singular normal equations")
    a, *_ = np.linalg.lstsq(design, z, rcond=None)

    a3, a4, a5 = a[3], a[4], a[5]
    det = 4 * a3 * a4 - a5 * a5
    if not (a3 > 0 and det > 0):
        raise SaddlePointError(f"Hessian not positive definite (a3={a3:.3g}, det={det:.3g})")
    mx = (a[2] * a5 - 2 * a[1] * a4) / det
    my = (a[1] * a5 - 2 * a[2] * a3) / det
    if abs(mx) > hw + 0.5 or abs(my) > hw + 0.5:
        raise FitError(f"stationary point ({mx:.2f}, {my:.2f}) lies outside the fit window")

    resid = z - design @ a
    dof = n_win - 6
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(normal)
    jac = _stationary_jacobian(a, mx, my)
    cov_min = jac @ cov @ jac.T
    tq = stats.t.ppf(0.5 + CI68_LEVEL / 2, dof) if dof > 0 else 0.0
    ci_x = tq * math.sqrt(max(cov_min[0, 0], 0.0))
    ci_y = tq * math.sqrt(max(cov_min[1, 1], 0.0))

    x0 = rmap.origin[0] + c
    y0 = rmap.origin[1] + r
    return QuadraticFit(
        coefficients=a,
        covariance=cov,
        minimum_point=Point2D(x0 + mx, y0 + my),
        ci68_x=ci_x,
        ci68_y=ci_y,
        expansion_point=(float(x0), float(y0)),
        residual_rms=math.sqrt(float(resid @ resid) / n_win),
    )


# --- field registration ----------------------------------------------------

def _corner_roles(points: np.ndarray) -> list[int]:
    """Indices of the top-left, top-right, bottom-right, bottom-left marks."""
    c = points.mean(axis=0)
    roles = {}
    for idx, (x, y) in enumerate(points):
        key = ("b" if y > c[1] else "t") + ("r" if x > c[0] else "l")
        if key in roles:
            raise ParameterError("nominal marks must occupy the four corners of a rectangle")
        roles[key] = idx
    return [roles["tl"], roles["tr"], roles["br"], roles["bl"]]


def _edge_geometry(centers: np.ndarray, roles: list[int]):
    tl, tr, br, bl = (centers[i] for i in roles)
    horizontal = [tr - tl, br - bl]
    vertical = [bl - tl, br - tr]
    angles = [math.atan2(d[1], d[0]) for d in horizontal]
    angles += [math.atan2(-d[0], d[1]) for d in vertical]
    # least-squares single angle over the four edge directions
    angle = math.degrees(float(np.mean(angles)))
    h_len = float(np.mean([np.hypot(*d) for d in horizontal]))
    v_len = float(np.mean([np.hypot(*d) for d in vertical]))
    return angle, h_len, v_len


def empty_residual(mark_shape, template: Template) -> float:
    """Residual the map would show for a mark region containing nothing."""
    ref = template.self_convolution
    n_full = (mark_shape[0] + template.shape[0] - 1) * (mark_shape[1] + template.shape[1] - 1)
    return math.sqrt(float(np.sum(ref ** 2)) / n_full)


def locate_mark(window: np.ndarray, roi: RegionOfInterest, template: Template, cfg: RegistrationConfig) -> QuadraticFit:
    """Sub-pixel centre of one mark from its (already resampled) window.

    After the first quadratic fit the thresholded mark is shifted (cubic
    spline) by the fractional part of the estimate, so that the mark centre
    sits on a pixel centre, and refitted.  A quadratic fitted to a residual
    surface that is symmetric about a grid point has no pixel-locking bias,
    so each pass removes most of the remaining offset.
    """
    mark = _threshold(window, roi, cfg.flatten_sigma, cfg.threshold_quantile, cfg.threshold_softness)
    rmap = residual_map(mark, template)
    best = float(rmap.values.min())
    empty = empty_residual(mark.pattern.shape, template)
    if best > cfg.max_residual_ratio * empty:
        raise FitError(f"best residual {best:.3g} exceeds {cfg.max_residual_ratio} x empty-field residual {empty:.3g}")
    fit = fit_quadratic_minimum(rmap, cfg.fit_halfwidth)

    shift = np.zeros(2)
    for _ in range(cfg.recenter_iterations):
        est = np.array([fit.minimum_point.x, fit.minimum_point.y]) + shift
        new_shift = est - np.round(est)
        if np.max(np.abs(new_shift - shift)) < 1e-4:
            break
        shift = new_shift
        moved = ndimage.shift(mark.pattern, (-shift[1], -shift[0]), order=3, mode="nearest")
        fit = fit_quadratic_minimum(residual_map(BinaryMark(moved, roi), template), cfg.fit_halfwidth)
    if not shift.any():
        return fit
    p = fit.minimum_point
    return QuadraticFit(
        coefficients=fit.coefficients,
        covariance=fit.covariance,
        minimum_point=Point2D(p.x + shift[0], p.y + shift[1]),
        ci68_x=fit.ci68_x,
        ci68_y=fit.ci68_y,
        expansion_point=(fit.expansion_point[0] + shift[0], fit.expansion_point[1] + shift[1]),
        residual_rms=fit.residual_rms,
    )


def register_field(
    image: Image,
    nominal_marks,
    nominal_pitch_nm: float,
    cfg: RegistrationConfig | None = None,
) -> FieldRegistration:
    """Locate the four marks, iterate the rotation correction and calibrate the scale.

    ``nominal_marks`` are approximate mark centres (pixels) in the input
    image.  Every pass resamples the mark windows from the original image
    rotated by the accumulated correction, so interpolation is never
    compounded.  Iteration stops once the newly measured residual angle is
    below ``cfg.angle_tol``.
    """
    cfg = cfg or RegistrationConfig()
    if not (math.isfinite(nominal_pitch_nm) and nominal_pitch_nm > 0):
        raise ParameterError("nominal_pitch_nm must be > 0")
    points = np.array([tuple(p) for p in nominal_marks], dtype=np.float64)
    if points.shape != (4, 2):
        raise ParameterError("exactly four nominal mark positions are required")
    roles = _corner_roles(points)
    template = make_cross_template(cfg.arm_length, cfg.arm_width)
    center = image.center
    hw = cfg.roi_halfwidth

    applied = 0.0
    history: list[float] = []
    guess = points
    for iteration in range(1, cfg.max_iter + 1):
        fits = []
        for idx, (gx, gy) in enumerate(guess):
            roi = RegionOfInterest.centered(int(round(gx)), int(round(gy)), hw)
            if not roi.inside(image.width, image.height):
                raise MarkNotFoundError(idx, "search window leaves the image")
            window = rotated_window(image.counts, -applied, center, roi)
            try:
                fits.append(locate_mark(window, roi, template, cfg))
            except (FitError, DegenerateInputError, ParameterError) as exc:
                raise MarkNotFoundError(idx, str(exc)) from exc
        centers = np.array([[f.minimum_point.x, f.minimum_point.y] for f in fits])
        delta, h_len, v_len = _edge_geometry(centers, roles)
        history.append(delta)
        log.debug("registration pass %d: residual angle %.5f deg", iteration, delta)
        if abs(delta) < cfg.angle_tol:
            break
        applied += delta
        # carry the mark positions into the next corrected frame
        guess = rotate_points(centers, -delta, center)
    else:
        raise ConvergenceError(history)

    mean_spacing = 0.5 * (h_len + v_len)
    warnings = []
    aniso = abs(h_len - v_len) / mean_spacing
    if aniso > 0.005:
        warnings.append(f"pixel anisotropy {100 * aniso:.2f}% exceeds 0.5%")
        log.warning(warnings[-1])
    field_center = centers.mean(axis=0)
    return FieldRegistration(
        mark_centers=tuple(Point2D(float(x), float(y)) for x, y in centers),
        mark_ci68=tuple((f.ci68_x, f.ci68_y) for f in fits),
        rotation_deg=applied,
        pixel_scale=PixelScale(nominal_pitch_nm / mean_spacing),
        field_center=Point2D(float(field_center[0]), float(field_center[1])),
        iterations_used=iteration,
        rotation_center=center,
        angle_history=tuple(history),
        warnings=tuple(warnings),
    )


def corrected_frame(image: Image, reg: FieldRegistration) -> Image:
    """The input image resampled into the registration's corrected frame."""
    return rotate_image(image, -reg.rotation_deg, reg.rotation_center)


__all__ = [
    "BinaryMark",
    "FieldRegistration",
    "QuadraticFit",
    "RegistrationConfig",
    "ResidualMap",
    "Template",
    "corrected_frame",
    "fit_quadratic_minimum",
    "make_cross_template",
    "preprocess_mark_region",
    "register_field",
    "residual_map",
]
