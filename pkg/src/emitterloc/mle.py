"""Poisson maximum-likelihood fitting of a pixel-integrated Gaussian PSF.

Parameter vectors are always ordered ``(i0, j0, sigma2, alpha, beta)``:
emitter centre (``i`` along columns, ``j`` along rows), PSF variance in
px^2, total expected signal counts and expected background counts per pixel.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfc

from .errors import DegenerateInputError, NumericalError, ParameterError, SingularInformationError
from .image_model import PixelScale
from .optimize import nelder_mead

PARAM_NAMES = ("i0", "j0", "sigma2", "alpha", "beta")
LAMBDA_FLOOR = 1e-12
MIN_PIXELS = 25
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ThetaVector:
    i0: float
    j0: float
    sigma2: float
    alpha: float
    beta: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ParameterError(f"non-finite parameter vector {vals}")
        if not (self.sigma2 > 0 and self.alpha >= 0 and self.beta >= 0):
            raise ParameterError(f"invalid parameter vector {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.i0, self.j0, self.sigma2, self.alpha, self.beta], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "ThetaVector":
        return cls(*(float(v) for v in a))

    def shifted(self, di: float, dj: float) -> "ThetaVector":
        return ThetaVector(self.i0 + di, self.j0 + dj, self.sigma2, self.alpha, self.beta)


@dataclass(frozen=True, eq=False)
class SubRoiData:
    """Photon counts of one fitting window.

    ``counts[r, c]`` is the pixel at ``i = origin[0] + c``,
    ``j = origin[1] + r``.  The default origin puts ``(0, 0)`` on the
    central pixel.
    """

    counts: np.ndarray
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        y = np.array(self.counts, dtype=np.float64, copy=True)
        if y.ndim != 2:
            raise ParameterError("sub-ROI counts must be 2D")
        if y.size < MIN_PIXELS:
            raise ParameterError(f"sub-ROI needs at least {MIN_PIXELS} pixels, got {y.size}")
        if not np.all(np.isfinite(y)) or np.any(y < 0):
            raise ParameterError("sub-ROI counts must be finite and non-negative")
        y.setflags(write=False)
        object.__setattr__(self, "counts", y)
        if self.origin is None:
            object.__setattr__(self, "origin", (-float(y.shape[1] // 2), -float(y.shape[0] // 2)))
        else:
            object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n(self) -> int:
        return self.counts.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def i_coords(self) -> np.ndarray:
        return self.origin[0] + np.arange(self.counts.shape[1], dtype=np.float64)

    @property
    def j_coords(self) -> np.ndarray:
        return self.origin[1] + np.arange(self.counts.shape[0], dtype=np.float64)

    def expected(self, theta: ThetaVector) -> np.ndarray:
        wx = psf_axis_weights(self.i_coords, theta.i0, theta.sigma2)
        wy = psf_axis_weights(self.j_coords, theta.j0, theta.sigma2)
        return theta.alpha * np.outer(wy, wx) + theta.beta

    def shifted(self, di: float, dj: float) -> "SubRoiData":
        """Same counts with pixel coordinates translated by ``(di, dj)``."""
        return SubRoiData(self.counts, (self.origin[0] + di, self.origin[1] + dj))


@dataclass(frozen=True)
class FisherMatrix:
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (5, 5):
            raise ParameterError(f"Fisher matrix must be 5x5, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NumericalError("non-finite Fisher information")
        object.__setattr__(self, "m", m)


@dataclass(frozen=True)
class OptimizerOptions:
    ftol: float = 1e-9
    xtol: float = 1e-6
    max_iter: int = 2000
    restarts: int = 1
    center_step: float = 0.5
    log_step: float = 0.2

    def __post_init__(self):
        if self.ftol <= 0 or self.xtol <= 0 or self.max_iter < 1 or self.restarts < 0:
            raise ParameterError("optimizer tolerances must be > 0 and max_iter >= 1")


@dataclass(frozen=True)
class LocalizationResult:
    theta_hat: ThetaVector
    crlb_sigma: np.ndarray
    converged: bool
    nll_final: float
    iterations: int
    excess_noise_applied: bool = False


# --- PSF model -------------------------------------------------------------

def psf_axis_weights(coords, center: float, sigma2: float) -> np.ndarray:
    """Fraction of a unit 1D Gaussian falling in each unit pixel centred on ``coords``.

    Uses complementary error functions on whichever tail the pixel sits in,
    so far-tail pixels keep full relative precision instead of cancelling.
    """
    if not sigma2 > 0:
        raise ParameterError("sigma2 must be > 0")
    s = math.sqrt(2.0 * sigma2)
    lo = (np.asarray(coords, dtype=np.float64) - center - 0.5) / s
    hi = lo + 1.0 / s
    right = lo >= 0
    left = hi <= 0
    mid = 0.5 * (erf(hi) - erf(lo))
    out = np.where(right, 0.5 * (erfc(lo) - erfc(hi)), mid)
    out = np.where(left, 0.5 * (erfc(-hi) - erfc(-lo)), out)
    return out


def psf_pixel_integral(i0: float, j0: float, sigma2: float, pixel) -> float:
    i, j = pixel
    wx = psf_axis_weights(np.array([i], dtype=np.float64), i0, sigma2)[0]
    wy = psf_axis_weights(np.array([j], dtype=np.float64), j0, sigma2)[0]
    return float(wx * wy)


def expected_counts(theta: ThetaVector, pixel) -> float:
    return theta.alpha * psf_pixel_integral(theta.i0, theta.j0, theta.sigma2, pixel) + theta.beta


# --- likelihood --------------------------------------------------------------

def neg_log_likelihood(theta: ThetaVector, data: SubRoiData) -> float:
    """Poisson NLL without the constant ``ln(y!)`` terms; lambda floored at 1e-12."""
    with np.errstate(over="ignore", invalid="ignore"):
        lam = np.maximum(data.expected(theta), LAMBDA_FLOOR)
        y = data.counts
        val = float(np.sum(lam) - np.sum(y * np.log(lam)))
    if not math.isfinite(val):
        raise NumericalError(f"non-finite NLL at {theta}")
    return val


def neg_log_likelihood_array(thetas, data: SubRoiData, chunk: int = 8192) -> np.ndarray:
    """NLL for each row of an ``(N, 5)`` parameter array."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    ix, jy = data.i_coords, data.j_coords
    y = data.counts
    out = np.empty(len(thetas))
    for start in range(0, len(thetas), chunk):
        t = thetas[start:start + chunk]
        s = np.sqrt(2.0 * t[:, 2])[:, None]
        ex = erf((ix[None, :] + 0.5 - t[:, 0:1]) / s) - erf((ix[None, :] - 0.5 - t[:, 0:1]) / s)
        ey = erf((jy[None, :] + 0.5 - t[:, 1:2]) / s) - erf((jy[None, :] - 0.5 - t[:, 1:2]) / s)
        lam = (0.25 * t[:, 3])[:, None, None] * ey[:, :, None] * ex[:, None, :] + t[:, 4][:, None, None]
        np.maximum(lam, LAMBDA_FLOOR, out=lam)
        out[start:start + chunk] = lam.sum(axis=(1, 2)) - np.einsum("nij,ij->n", np.log(lam), y)
    return out


def _reparam_objective(data: SubRoiData):
    """Fast NLL in ``(i0, j0, ln sigma2, ln alpha, ln beta)`` coordinates."""
    ix = data.i_coords
    jy = data.j_coords
    edges_x = np.append(ix - 0.5, ix[-1] + 0.5)
    edges_y = np.append(jy - 0.5, jy[-1] + 0.5)
    nx = edges_x.size
    edges = np.concatenate([edges_x, edges_y])
    y = data.counts
    floor = LAMBDA_FLOOR
    exp = math.exp

    def f(p):
        i0, j0, u, v, w = p
        if u > 700 or v > 700 or w > 700:
            return math.inf
        s = math.sqrt(2.0 * exp(u))
        shift = np.empty_like(edges)
        shift[:nx] = edges[:nx] - i0
        shift[nx:] = edges[nx:] - j0
        e = erf(shift / s)
        ex = e[1:nx] - e[:nx - 1]
        ey = e[nx + 1:] - e[nx:-1]
        lam = np.multiply.outer(ey, ex)
        lam *= 0.25 * exp(v)
        lam += exp(w)
        np.maximum(lam, floor, out=lam)
        return float(lam.sum() - np.vdot(y, np.log(lam)))

    return f


# --- estimation --------------------------------------------------------------

def _border(y: np.ndarray) -> np.ndarray:
    return np.concatenate([y[0, :], y[-1, :], y[1:-1, 0], y[1:-1, -1]])


def initial_guess(data: SubRoiData) -> ThetaVector:
    """Moment-based start point: border-median background, centroid, second moments."""
    y = data.counts
    if np.all(y == y.flat[0]):
        raise DegenerateInputError("all sub-ROI pixels are equal")
    beta0 = float(np.median(_border(y)))
    excess = y - beta0
    alpha0 = max(float(excess.sum()), 1.0)
    w = np.clip(excess, 0.0, None)
    total = w.sum()
    ix, jy = data.i_coords, data.j_coords
    if total <= 0:
        w = y - y.min()
        total = w.sum()
    # marginals plus exact summation: a mirror-symmetric spot lands exactly on its centre
    wx, wy = w.sum(axis=0), w.sum(axis=1)
    total = math.fsum(wx)
    i0 = math.fsum(wx * ix) / total
    j0 = math.fsum(wy * jy) / total
    var_i = math.fsum(wx * (ix - i0) ** 2) / total
    var_j = math.fsum(wy * (jy - j0) ** 2) / total
    width = max(y.shape)
    sigma2 = min(max(0.5 * (var_i + var_j), 0.25), float(width) ** 2)
    return ThetaVector(i0, j0, sigma2, alpha0, max(beta0, 0.0))


def _to_search(theta: ThetaVector) -> np.ndarray:
    return np.array([
        theta.i0,
        theta.j0,
        math.log(theta.sigma2),
        math.log(max(theta.alpha, 1.0)),
        math.log(max(theta.beta, 1e-6)),
    ])


def _from_search(p) -> ThetaVector:
    return ThetaVector(float(p[0]), float(p[1]), math.exp(p[2]), math.exp(p[3]), math.exp(p[4]))


def fit_mle(
    data: SubRoiData,
    init: ThetaVector | None = None,
    opts: OptimizerOptions | None = None,
    em_gain_active: bool = False,
) -> LocalizationResult:
    """Nelder-Mead minimization of the Poisson NLL.

    sigma2, alpha and beta are searched in log space so they stay
    positive.  After the first run the simplex is rebuilt around the best
    vertex ``opts.restarts`` times, which guards against premature simplex
    collapse.  Hitting the iteration cap yields ``converged=False`` rather
    than an exception.
    """
    opts = opts or OptimizerOptions()
    # work in the window's own centred frame so the search path does not
    # depend on where the window sits in the parent image
    local = SubRoiData(data.counts)
    di = data.origin[0] - local.origin[0]
    dj = data.origin[1] - local.origin[1]
    if di or dj:
        local_init = None if init is None else init.shifted(-di, -dj)
        res = fit_mle(local, local_init, opts, em_gain_active)
        return dataclasses.replace(res, theta_hat=res.theta_hat.shifted(di, dj))
    init = init or initial_guess(data)
    f = _reparam_objective(data)
    steps = [opts.center_step, opts.center_step, opts.log_step, opts.log_step, opts.log_step]

    p = _to_search(init)
    iterations = 0
    res = None
    for _ in range(opts.restarts + 1):
        budget = opts.max_iter - iterations
        if budget <= 0:
            break
        res = nelder_mead(f, p, steps, ftol=opts.ftol, xtol=opts.xtol, max_iter=budget)
        iterations += res.nit
        p = res.x
        if not res.converged:
            break
    if res is None or not math.isfinite(res.fun):
        raise NumericalError("likelihood search escaped to non-finite values")

    theta = _from_search(p)
    nll = neg_log_likelihood(theta, data)
    crlb = crlb_uncertainties(fisher_matrix(theta, data), em_gain_active)
    return LocalizationResult(theta, crlb, bool(res.converged), nll, iterations, em_gain_active)


# --- Fisher information ----------------------------------------------------

def _axis_terms(coords, center, sigma2):
    """Pixel weights and their derivatives w.r.t. centre and sigma2 along one axis."""
    s = math.sqrt(2.0 * sigma2)
    a_hi = coords - center + 0.5
    a_lo = coords - center - 0.5
    g_hi = np.exp(-(a_hi / s) ** 2)
    g_lo = np.exp(-(a_lo / s) ** 2)
    w = psf_axis_weights(coords, center, sigma2)
    d_center = (g_lo - g_hi) / (math.sqrt(math.pi) * s)
    d_sigma2 = -(a_hi * g_hi - a_lo * g_lo) / (math.sqrt(math.pi) * s ** 3)
    return w, d_center, d_sigma2


def lambda_jacobian(theta: ThetaVector, data: SubRoiData) -> np.ndarray:
    """Analytic d(lambda_k)/d(theta) as a ``(5, rows, cols)`` array."""
    wx, dx_c, dx_s = _axis_terms(data.i_coords, theta.i0, theta.sigma2)
    wy, dy_c, dy_s = _axis_terms(data.j_coords, theta.j0, theta.sigma2)
    a = theta.alpha
    jac = np.empty((5,) + data.shape)
    jac[0] = a * np.outer(wy, dx_c)
    jac[1] = a * np.outer(dy_c, wx)
    jac[2] = a * (np.outer(wy, dx_s) + np.outer(dy_s, wx))
    jac[3] = np.outer(wy, wx)
    jac[4] = 1.0
    return jac


def fisher_matrix(theta: ThetaVector, data: SubRoiData) -> FisherMatrix:
    """Poisson Fisher information, sum over pixels of grad(lambda) grad(lambda)^T / lambda."""
    lam = np.maximum(data.expected(theta), LAMBDA_FLOOR)
    jac = lambda_jacobian(theta, data).reshape(5, -1)
    m = (jac / lam.ravel()) @ jac.T
    m = 0.5 * (m + m.T)
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"non-finite Fisher information at {theta}")
    return FisherMatrix(m)


def crlb_uncertainties(m: FisherMatrix, em_gain_active: bool = False) -> np.ndarray:
    """One-sigma Cramer-Rao bounds, sqrt of the diagonal of the inverse information.

    EMCCD excess noise is folded in as a sqrt(2) inflation.
    """
    mat = m.m if isinstance(m, FisherMatrix) else np.asarray(m, dtype=np.float64)
    # equilibrate before judging conditioning so parameter units do not matter
    d = np.sqrt(np.abs(np.diag(mat)))
    if np.any(d == 0):
        raise SingularInformationError("Fisher matrix has a zero diagonal entry")
    scaled = mat / np.outer(d, d)
    cond = np.linalg.cond(scaled)
    if not math.isfinite(cond) or cond > 1e12:
        raise SingularInformationError(f"Fisher matrix condition number {cond:.3g} too large")
    inv = np.linalg.inv(scaled) / np.outer(d, d)
    var = np.diag(inv)
    if np.any(var < 0):
        raise SingularInformationError("Fisher matrix inverse has negative variances")
    sigma = np.sqrt(var)
    if em_gain_active:
        sigma = sigma * SQRT2
    return sigma


def to_real_units(result: LocalizationResult, scale: PixelScale, origin=(0.0, 0.0)):
    """``(x, y, dx_mle, dy_mle)`` in nanometres, positions measured from ``origin`` (px)."""
    s = scale.nanometers_per_pixel
    t = result.theta_hat
    return (
        (t.i0 - origin[0]) * s,
        (t.j0 - origin[1]) * s,
        float(result.crlb_sigma[0]) * s,
        float(result.crlb_sigma[1]) * s,
    )
