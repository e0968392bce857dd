"""Synthetic fields with known ground truth, plus a brute-force MLE oracle.

Scenes hold four bright crosses (reflected-light alignment marks), a list of
pixel-integrated Gaussian emitters and a flat background.  The expected-count
image is rotated (bilinear) and then Poisson-sampled with a counter-based
generator, so a scene plus seed always renders to the same pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from . import rng
from .errors import ParameterError, RangeError
from .image_model import PGM_MAXVAL, Image, PixelScale, rotate_points, rotated_window
from .mle import (
    SubRoiData,
    ThetaVector,
    crlb_uncertainties,
    fisher_matrix,
    initial_guess,
    neg_log_likelihood_array,
    psf_axis_weights,
)

SCENE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MarkSpec:
    x: float
    y: float
    arm_length: float = 15.0
    arm_width: float = 3.0
    level: float = 3000.0


@dataclass(frozen=True)
class EmitterSpec:
    x: float
    y: float
    sigma2: float = 1.44
    alpha: float = 1e4


@dataclass(frozen=True)
class SceneSpec:
    """Ground-truth description of a synthetic field.

    Positions are pixels in the unrotated scene; :meth:`truth_positions`
    maps them into the rendered (rotated) frame.  ``mark.level`` counts are
    added on top of ``beta`` inside each cross, and ``edge_blur`` is the
    Gaussian sigma (px) that softens the cross edges.
    """

    width: int = 1004
    height: int = 1002
    nanometers_per_pixel: float = 66.7
    marks: tuple[MarkSpec, ...] = ()
    emitters: tuple[EmitterSpec, ...] = ()
    beta: float = 0.0
    rotation_deg: float = 0.0
    rng_seed: int = 0
    edge_blur: float = 0.8
    clamp: bool = False

    def __post_init__(self):
        object.__setattr__(self, "marks", tuple(self.marks))
        object.__setattr__(self, "emitters", tuple(self.emitters))
        if self.width < 1 or self.height < 1:
            raise ParameterError("scene size must be positive")
        PixelScale(self.nanometers_per_pixel)
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ParameterError("beta must be finite and >= 0")
        if self.edge_blur < 0:
            raise ParameterError("edge_blur must be >= 0")
        for m in self.marks:
            if not (0 <= m.x < self.width and 0 <= m.y < self.height):
                raise ParameterError(f"mark at ({m.x}, {m.y}) outside the field")
            if m.level < 0 or m.arm_width <= 0 or m.arm_length < m.arm_width / 2:
                raise ParameterError(f"invalid mark geometry {m}")
        for e in self.emitters:
            if not (0 <= e.x < self.width and 0 <= e.y < self.height):
                raise ParameterError(f"emitter at ({e.x}, {e.y}) outside the field")
            if not (e.sigma2 > 0 and e.alpha >= 0):
                raise ParameterError(f"invalid emitter {e}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    def truth_positions(self, which: str = "emitters") -> np.ndarray:
        items = self.emitters if which == "emitters" else self.marks
        pts = np.array([[it.x, it.y] for it in items], dtype=np.float64).reshape(-1, 2)
        if self.rotation_deg == 0.0:
            return pts
        return rotate_points(pts, self.rotation_deg, self.center)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCENE_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        version = d.pop("schema_version", SCENE_SCHEMA_VERSION)
        if version != SCENE_SCHEMA_VERSION:
            raise ParameterError(f"unsupported scene schema_version {version}")
        try:
            d["marks"] = tuple(MarkSpec(**m) for m in d.get("marks", ()))
            d["emitters"] = tuple(EmitterSpec(**e) for e in d.get("emitters", ()))
            return cls(**d)
        except TypeError as exc:
            raise ParameterError(f"bad scene document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ParameterError(f"scene is not valid JSON: {exc}") from exc


def square_field_marks(scene_w, scene_h, spacing_px, **kw) -> tuple[MarkSpec, ...]:
    """Four marks on a square of side ``spacing_px`` centred in the field."""
    cx, cy = (scene_w - 1) / 2.0, (scene_h - 1) / 2.0
    h = spacing_px / 2.0
    return tuple(
        MarkSpec(cx + sx * h, cy + sy * h, **kw)
        for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))
    )


# Emitter layout of a measured 50 um write field: (x, y) in um from the field
# centre with y upward, and the per-emitter 1-sigma fit uncertainty in nm.
REFERENCE_EMITTERS_UM = (
    (3.34, 14.60), (15.47, 2.56), (-16.16, -5.83), (8.08, 8.56), (-0.41, 10.92),
    (-5.15, -9.35), (9.11, 7.52), (9.89, -3.0), (-22.34, -20.68),
)
REFERENCE_DELTA_MLE_NM = (0.81, 1.06, 1.10, 1.37, 1.60, 1.74, 1.73, 2.22, 2.60)


def alpha_for_crlb(
    target_px: float, sigma2: float = 1.44, beta: float = 100.0, shape=(11, 11), i0: float = 0.0, j0: float = 0.0
) -> float:
    """Signal ``alpha`` whose centre CRLB on an ``shape`` window equals ``target_px``.

    ``(i0, j0)`` is the emitter position in the window's centred frame; the
    bound depends weakly on the pixel phase.
    """
    data = SubRoiData(np.zeros(shape))

    def gap(log_alpha):
        theta = ThetaVector(i0, j0, sigma2, math.exp(log_alpha), beta)
        return crlb_uncertainties(fisher_matrix(theta, data))[0] - target_px

    return math.exp(brentq(gap, math.log(1.0), math.log(1e9), xtol=1e-10))


def reference_field_scene(
    seed: int,
    nanometers_per_pixel: float = 66.7,
    pitch_nm: float = 50_000.0,
    beta: float = 100.0,
    mark_level: float = 3000.0,
    rotation_deg: float = 0.0,
    jitter_px: float = 0.5,
    width: int = 1004,
    height: int = 1002,
) -> SceneSpec:
    """Square write field with nine emitters laid out as in a measured field.

    Each emitter's ``alpha`` is chosen so its centre CRLB matches the
    reference fit uncertainty; positions get a seeded uniform sub-pixel
    jitter so pixel phase varies between seeds.
    """
    spacing = pitch_nm / nanometers_per_pixel
    marks = square_field_marks(width, height, spacing, level=mark_level)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    jitter = np.random.default_rng(seed).uniform(-jitter_px, jitter_px, (len(REFERENCE_EMITTERS_UM), 2))
    emitters = []
    for (x_um, y_um), d_nm, (jx, jy) in zip(REFERENCE_EMITTERS_UM, REFERENCE_DELTA_MLE_NM, jitter):
        alpha = alpha_for_crlb(d_nm / nanometers_per_pixel, beta=beta)
        x = cx + x_um * 1000.0 / nanometers_per_pixel + jx
        y = cy - y_um * 1000.0 / nanometers_per_pixel + jy
        emitters.append(EmitterSpec(x, y, 1.44, alpha))
    return SceneSpec(
        width=width, height=height, nanometers_per_pixel=nanometers_per_pixel, marks=marks,
        emitters=tuple(emitters), beta=beta, rotation_deg=rotation_deg, rng_seed=seed,
    )


def _box_profile(coords: np.ndarray, a: float, b: float, blur: float) -> np.ndarray:
    """Pixel-integrated, Gaussian-blurred indicator of ``[a, b]`` at integer pixel centres."""
    lo, hi = coords - 0.5, coords + 0.5
    if blur <= 0:
        return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)

    def prim(z):
        # antiderivative of the standard normal CDF
        return z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    s = blur
    val = s * (prim((hi - a) / s) - prim((lo - a) / s) - prim((hi - b) / s) + prim((lo - b) / s))
    return np.clip(val, 0.0, 1.0)


def _add_separable(out, x0, y0, fx, fy, scale):
    out[y0:y0 + fy.size, x0:x0 + fx.size] += scale * np.outer(fy, fx)


def _patch(center, radius, n):
    lo = max(int(math.floor(center - radius)), 0)
    hi = min(int(math.ceil(center + radius)) + 1, n)
    return lo, hi


def expected_field(scene: SceneSpec) -> np.ndarray:
    """Noise-free expected counts in the rendered (rotated) frame."""
    lam = np.full((scene.height, scene.width), float(scene.beta))
    for m in scene.marks:
        reach = m.arm_length + 0.5 + 6 * scene.edge_blur + 2
        x0, x1 = _patch(m.x, reach, scene.width)
        y0, y1 = _patch(m.y, reach, scene.height)
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        long_x = _box_profile(xs, m.x - m.arm_length - 0.5, m.x + m.arm_length + 0.5, scene.edge_blur)
        long_y = _box_profile(ys, m.y - m.arm_length - 0.5, m.y + m.arm_length + 0.5, scene.edge_blur)
        thin_x = _box_profile(xs, m.x - m.arm_width / 2, m.x + m.arm_width / 2, scene.edge_blur)
        thin_y = _box_profile(ys, m.y - m.arm_width / 2, m.y + m.arm_width / 2, scene.edge_blur)
        # union of the two bars = horizontal + vertical - central square
        _add_separable(lam, x0, y0, long_x, thin_y, m.level)
        _add_separable(lam, x0, y0, thin_x, long_y, m.level)
        _add_separable(lam, x0, y0, thin_x, thin_y, -m.level)
    for e in scene.emitters:
        if e.alpha == 0:
            continue
        reach = 10 * math.sqrt(e.sigma2) + 2
        x0, x1 = _patch(e.x, reach, scene.width)
        y0, y1 = _patch(e.y, reach, scene.height)
        wx = psf_axis_weights(np.arange(x0, x1, dtype=np.float64), e.x, e.sigma2)
        wy = psf_axis_weights(np.arange(y0, y1, dtype=np.float64), e.y, e.sigma2)
        _add_separable(lam, x0, y0, wx, wy, e.alpha)
    np.maximum(lam, 0.0, out=lam)
    if scene.rotation_deg != 0.0:
        full = rotated_window(lam, scene.rotation_deg, scene.center, Image(lam).full_roi)
        lam = np.maximum(full, 0.0)
    return lam


def render_field(scene: SceneSpec) -> Image:
    """Poisson-sampled rendering of ``scene``; a pure function of the scene and its seed."""
    lam = expected_field(scene)
    if lam.max(initial=0.0) > PGM_MAXVAL and not scene.clamp:
        raise RangeError(f"expected count {lam.max():.1f} exceeds {PGM_MAXVAL}")
    counts = rng.poisson_field(lam, scene.rng_seed)
    if scene.clamp:
        np.minimum(counts, PGM_MAXVAL, out=counts)
    return Image(counts, PixelScale(scene.nanometers_per_pixel))


def render_subroi(theta: ThetaVector, shape=(11, 11), seed: int | None = None, origin=None) -> SubRoiData:
    """Expected (``seed=None``) or Poisson-sampled counts of a single emitter window."""
    data = SubRoiData(np.zeros(shape), origin=origin)
    lam = data.expected(theta)
    if seed is not None:
        lam = rng.poisson_field(lam, seed)
    return SubRoiData(lam, origin=data.origin)


# --- brute-force oracle ----------------------------------------------------

@dataclass(frozen=True)
class GridLevel:
    """Half-widths and steps of one grid; centres in px, the rest in natural log."""

    center_half: float
    center_step: float
    log_half: float
    log_step: float

    @property
    def size(self) -> int:
        nc = 2 * int(round(self.center_half / self.center_step)) + 1
        nl = 2 * int(round(self.log_half / self.log_step)) + 1
        return nc * nc * nl ** 3


DEFAULT_GRID = (
    GridLevel(0.3, 0.06, 0.3, 0.06),
    GridLevel(0.03, 0.006, 0.03, 0.006),
    GridLevel(0.005, 0.001, 0.005, 0.001),
)
MAX_RECENTER = 40


def _axis(center, half, step):
    n = int(round(half / step))
    return center + step * np.arange(-n, n + 1)


def _scan(p, lv, data):
    axes = [
        _axis(p[0], lv.center_half, lv.center_step),
        _axis(p[1], lv.center_half, lv.center_step),
        _axis(p[2], lv.log_half, lv.log_step),
        _axis(p[3], lv.log_half, lv.log_step),
        _axis(p[4], lv.log_half, lv.log_step),
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.column_stack([m.ravel() for m in mesh])
    thetas = np.column_stack([flat[:, 0], flat[:, 1], np.exp(flat[:, 2]), np.exp(flat[:, 3]), np.exp(flat[:, 4])])
    nll = neg_log_likelihood_array(thetas, data)
    k = int(np.argmin(nll))  # first occurrence: lowest linear index wins ties
    on_edge = any(ix in (0, len(ax) - 1) for ix, ax in zip(np.unravel_index(k, mesh[0].shape), axes))
    return flat[k], float(nll[k]), on_edge


def grid_search_mle(
    data: SubRoiData,
    center_window: float | None = None,
    steps=None,
    start: ThetaVector | None = None,
    max_evaluations: int = 10_000_000,
) -> tuple[ThetaVector, list[float]]:
    """Exhaustive coarse-to-fine minimization of the Poisson NLL.

    Each level scans a full 5-D grid (centres in px; sigma2, alpha and
    beta in log space) around the best point so far.  A level whose best
    point lands on the grid boundary is re-centred and rescanned, so the
    result does not depend on the start lying close to the optimum.
    ``center_window`` overrides the first level's centre half-width and
    ``start`` (default: moment-based guess) centres the first grid.

    Returns the best grid point and the best NLL after each level.
    """
    levels = list(steps or DEFAULT_GRID)
    if center_window is not None:
        lv = levels[0]
        levels[0] = GridLevel(center_window, lv.center_step, lv.log_half, lv.log_step)
    total = sum(lv.size for lv in levels)
    if total > max_evaluations:
        raise ParameterError(f"grid needs {total} evaluations, limit {max_evaluations}")

    best = start or initial_guess(data)
    p = np.array([best.i0, best.j0, math.log(best.sigma2), math.log(max(best.alpha, 1e-12)),
                  math.log(max(best.beta, 1e-12))])
    history = []
    for lv in levels:
        for _ in range(MAX_RECENTER):
            p, val, on_edge = _scan(p, lv, data)
            if not on_edge:
                break
        history.append(val)
    theta = ThetaVector(float(p[0]), float(p[1]), math.exp(p[2]), math.exp(p[3]), math.exp(p[4]))
    return theta, history
