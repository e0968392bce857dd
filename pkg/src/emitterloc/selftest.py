"""Fast oracle checks bundled with the package (``emitterloc selftest``).

Each check compares a production code path against an independent
computation and returns ``(name, passed, detail)``.  The full statistical
suite lives in the test tree; these take a few seconds in total.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from .image_model import Image, load_pgm, save_pgm
from .mle import (
    SubRoiData,
    ThetaVector,
    crlb_uncertainties,
    expected_counts,
    fisher_matrix,
    fit_mle,
    lambda_jacobian,
    neg_log_likelihood,
    psf_pixel_integral,
)
from .registration import register_field
from .rng import poisson_field
from .synthesis import SceneSpec, grid_search_mle, render_field, render_subroi, square_field_marks


def check_psf_integral():
    got = psf_pixel_integral(0.0, 0.0, 1.0, (0, 0))
    want = math.erf(0.5 / math.sqrt(2.0)) ** 2
    lam = expected_counts(ThetaVector(0, 0, 1, 100, 2), (0, 0))
    ok = abs(got - want) < 1e-15 and abs(lam - (100 * want + 2)) < 1e-12
    return "psf pixel integral", ok, f"p={got:.6f} lambda={lam:.4f}"


def check_nll_naive():
    rs = np.random.default_rng(7)
    theta = ThetaVector(0.3, -0.4, 1.3, 2500.0, 7.0)
    y = rs.poisson(8.0, (11, 11)).astype(float)
    data = SubRoiData(y)
    total = 0.0
    for r in range(11):
        for c in range(11):
            lam = expected_counts(theta, (c - 5, r - 5))
            total += lam - y[r, c] * math.log(lam)
    got = neg_log_likelihood(theta, data)
    rel = abs(got - total) / abs(total)
    return "nll vs naive sum", rel <= 1e-12, f"rel={rel:.2e}"


def check_fisher_partials():
    theta = ThetaVector(0.2, -0.1, 1.5, 3000.0, 4.0)
    data = SubRoiData(np.zeros((11, 11)))
    jac = lambda_jacobian(theta, data)
    base = theta.as_array()
    worst = 0.0
    for d in range(5):
        h = 1e-6 * max(1.0, abs(base[d]))
        up, dn = base.copy(), base.copy()
        up[d] += h
        dn[d] -= h
        fd = (data.expected(ThetaVector.from_array(up)) - data.expected(ThetaVector.from_array(dn))) / (2 * h)
        scale = max(np.max(np.abs(fd)), 1e-300)
        worst = max(worst, float(np.max(np.abs(jac[d] - fd)) / scale))
    return "fisher partials vs finite differences", worst <= 1e-6, f"max rel={worst:.2e}"


def check_crlb_diag():
    got = crlb_uncertainties(np.diag([4.0, 4.0, 1.0, 1.0, 1.0]))
    em = crlb_uncertainties(np.diag([4.0, 4.0, 1.0, 1.0, 1.0]), em_gain_active=True)
    ok = np.allclose(got, [0.5, 0.5, 1, 1, 1], rtol=0, atol=1e-15) and np.allclose(em / got, math.sqrt(2), rtol=1e-15)
    return "crlb diagonal and em factor", bool(ok), f"{got}"


def check_fit_vs_grid():
    truth = ThetaVector(0.21, -0.33, 1.44, 1e4, 5.0)
    data = render_subroi(truth, seed=3)
    fit = fit_mle(data)
    grid, _ = grid_search_mle(data)
    d = max(abs(fit.theta_hat.i0 - grid.i0), abs(fit.theta_hat.j0 - grid.j0))
    ok = fit.converged and d <= 1e-3
    return "fit_mle vs grid search", ok, f"|d|={d:.2e} px"


def check_fit_noiseless():
    truth = ThetaVector(0.4, -0.25, 1.44, 1e4, 5.0)
    res = fit_mle(render_subroi(truth))
    d = max(abs(res.theta_hat.i0 - truth.i0), abs(res.theta_hat.j0 - truth.j0))
    return "noiseless fit recovery", d <= 1e-4, f"|d|={d:.2e} px"


def check_poisson_rng():
    lam = np.full((200, 200), 10.0)
    a = poisson_field(lam, 11)
    b = poisson_field(lam, 11)
    disp = a.var() / a.mean()
    ok = np.array_equal(a, b) and abs(a.mean() - 10) < 0.1 and 0.9 <= disp <= 1.1
    return "poisson stream", bool(ok), f"mean={a.mean():.3f} dispersion={disp:.3f}"


def check_pgm_roundtrip():
    rs = np.random.default_rng(1)
    img = Image(rs.integers(0, 65536, (17, 23)).astype(float))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "rt.pgm"
        save_pgm(img, path)
        back = load_pgm(path)
    return "pgm round trip", back == img, f"{img.width}x{img.height}"


def check_registration():
    marks = square_field_marks(241, 239, 160.0)
    shift = (0.31, -0.17)
    marks = tuple(type(m)(m.x + shift[0], m.y + shift[1]) for m in marks)
    scene = SceneSpec(width=241, height=239, marks=marks, beta=500.0, rng_seed=5)
    reg = register_field(render_field(scene), [(round(m.x), round(m.y)) for m in marks], 160 * 66.7)
    err = max(math.hypot(p.x - m.x, p.y - m.y) for p, m in zip(reg.mark_centers, marks))
    return "mark registration", err <= 0.05, f"max err={err:.4f} px"


CHECKS = (
    check_psf_integral,
    check_nll_naive,
    check_fisher_partials,
    check_crlb_diag,
    check_fit_noiseless,
    check_fit_vs_grid,
    check_poisson_rng,
    check_pgm_roundtrip,
    check_registration,
)


def run_selftest(stream=None) -> bool:
    """Run every check, print one line each, return True when all pass."""
    all_ok = True
    for check in CHECKS:
        try:
            name, ok, detail = check()
        except Exception as exc:  # report, do not abort the remaining checks
            name, ok, detail = check.__name__, False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line, file=stream)
    return all_ok
