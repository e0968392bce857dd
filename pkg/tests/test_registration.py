import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal

from emitterloc.errors import (
    ConvergenceError,
    DegenerateInputError,
    FitError,
    MarkNotFoundError,
    ParameterError,
    SaddlePointError,
)
from emitterloc.image_model import Image, RegionOfInterest, rotate_points
from emitterloc.registration import (
    BinaryMark,
    RegistrationConfig,
    ResidualMap,
    Template,
    corrected_frame,
    fit_quadratic_minimum,
    make_cross_template,
    preprocess_mark_region,
    register_field,
    residual_map,
)
from emitterloc.synthesis import MarkSpec, SceneSpec, render_field, square_field_marks

PITCH_NM = 50_000.0


def place(template, shape, cx, cy):
    out = np.zeros(shape)
    th, tw = template.shape
    out[cy - th // 2: cy + th // 2 + 1, cx - tw // 2: cx + tw // 2 + 1] = template.pattern
    return out


def mark(pattern):
    h, w = pattern.shape
    return BinaryMark(pattern, RegionOfInterest(0, 0, w, h))


# --- template -------------------------------------------------------------

def test_smallest_cross():
    t = make_cross_template(1, 1)
    np.testing.assert_array_equal(t.pattern, [[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def test_plus_of_nine():
    t = make_cross_template(2, 1)
    assert t.shape == (5, 5)
    assert t.pattern.sum() == 9


@pytest.mark.parametrize("width", [2, 4, 0])
def test_even_or_zero_width_rejected(width):
    with pytest.raises(ParameterError):
        make_cross_template(5, width)


def test_arm_shorter_than_width_rejected():
    with pytest.raises(ParameterError):
        make_cross_template(2, 3)


@given(st.integers(1, 10).flatmap(lambda w: st.tuples(st.just(2 * w - 1), st.integers(2 * w - 1, 30))))
def test_template_fourfold_symmetric(args):
    width, length = args
    t = make_cross_template(length, width)
    assert t.shape == (2 * length + 1, 2 * length + 1)
    np.testing.assert_array_equal(np.rot90(t.pattern), t.pattern)


def test_template_validation():
    with pytest.raises(ParameterError):
        Template(np.ones((2, 3)), 1, 1)
    with pytest.raises(ParameterError):
        Template(np.zeros((3, 3)), 1, 1)
    with pytest.raises(ParameterError):
        Template(np.full((3, 3), 0.5), 1, 1)


# --- preprocessing ----------------------------------------------------------

def test_binary_input_unchanged():
    rs = np.random.default_rng(3)
    pattern = (rs.random((21, 21)) > 0.6).astype(float)
    img = Image(100.0 * pattern)
    out = preprocess_mark_region(img, img.full_roi, flatten_sigma=0.0, threshold_quantile=0.5)
    np.testing.assert_array_equal(out.pattern, pattern)
    assert out.source_roi == img.full_roi


def test_flatten_removes_ramp():
    n = 41
    t = make_cross_template(15, 3)
    ideal = place(t, (n, n), 20, 20)
    ramp = np.broadcast_to(np.linspace(1.0, 2.0, n)[None, :], (n, n))
    img = Image((100.0 * ideal + 10.0) * ramp)
    out = preprocess_mark_region(img, img.full_roi, flatten_sigma=n, threshold_quantile=0.5)
    np.testing.assert_array_equal(out.pattern, ideal)


def test_ramp_defeats_unflattened_threshold():
    # sanity check that the ramp test above is not trivially passable
    n = 41
    ideal = place(make_cross_template(15, 3), (n, n), 20, 20)
    ramp = np.broadcast_to(np.linspace(1.0, 6.0, n)[None, :], (n, n))
    img = Image((100.0 * ideal + 150.0) * ramp)
    out = preprocess_mark_region(img, img.full_roi, flatten_sigma=0.0)
    assert not np.array_equal(out.pattern, ideal)


def test_zero_region_degenerate():
    img = Image(np.zeros((15, 15)))
    with pytest.raises(DegenerateInputError):
        preprocess_mark_region(img, img.full_roi)
    with pytest.raises(DegenerateInputError):
        preprocess_mark_region(img, img.full_roi, flatten_sigma=3.0)


def test_soft_threshold_is_graded():
    img = Image(np.linspace(0, 100, 101)[None, :].repeat(5, axis=0))
    out = preprocess_mark_region(img, img.full_roi, softness=1.0)
    assert out.pattern.min() >= 0 and out.pattern.max() <= 1
    assert np.all(np.diff(out.pattern[0]) >= 0)
    assert len(np.unique(out.pattern)) > 10


# --- residual map -------------------------------------------------------------

def direct_residual(cm, template, cx, cy):
    """RMS of K*CM - K*T_placed over the full canvas, by direct convolution."""
    k = template.pattern
    placed = place(template, cm.shape, cx, cy)
    g = signal.convolve2d(cm, k, mode="full")
    a = signal.convolve2d(placed, k, mode="full")
    return math.sqrt(np.mean((g - a) ** 2))


def test_perfect_match_zero_at_center():
    t = make_cross_template(5, 1)
    cm = place(t, (31, 31), 15, 15)
    rm = residual_map(mark(cm), t)
    r, c = np.unravel_index(np.argmin(rm.values), rm.values.shape)
    assert (rm.origin[0] + c, rm.origin[1] + r) == (15, 15)
    assert rm.values.min() == pytest.approx(0.0, abs=1e-6)
    assert np.all(rm.values >= 0)


def test_integer_shift_oracle():
    t = make_cross_template(5, 1)
    cm = place(t, (31, 31), 15 + 3, 15 + 2)
    rm = residual_map(mark(cm), t)
    r, c = np.unravel_index(np.argmin(rm.values), rm.values.shape)
    assert (rm.origin[0] + c - 15, rm.origin[1] + r - 15) == (3, 2)


def test_complement_does_not_match():
    t = make_cross_template(5, 1)
    cm = 1.0 - place(t, (31, 31), 18, 17)
    rm = residual_map(mark(cm), t)
    r, c = np.unravel_index(np.argmin(rm.values), rm.values.shape)
    assert (rm.origin[0] + c, rm.origin[1] + r) != (18, 17)
    assert rm.values.min() > 0.1


def test_template_larger_than_mark():
    t = make_cross_template(5, 1)
    with pytest.raises(ParameterError):
        residual_map(mark(np.ones((9, 15))), t)


def test_map_matches_direct_oracle():
    rs = np.random.default_rng(11)
    t = make_cross_template(4, 3)
    cm = np.clip(place(t, (25, 27), 13, 11) + 0.3 * rs.random((25, 27)), 0, 1)
    rm = residual_map(mark(cm), t)
    h, w = rm.values.shape
    for r, c in [(0, 0), (h - 1, w - 1), (h // 2, w // 3), (3, w - 2)]:
        want = direct_residual(cm, t, rm.origin[0] + c, rm.origin[1] + r)
        assert rm.values[r, c] == pytest.approx(want, rel=1e-9, abs=1e-9)


@given(st.integers(-6, 6), st.integers(-6, 6))
def test_translation_equivariance(dx, dy):
    t = make_cross_template(4, 1)
    base = residual_map(mark(place(t, (33, 33), 16, 16)), t)
    moved = residual_map(mark(place(t, (33, 33), 16 + dx, 16 + dy)), t)
    r0, c0 = np.unravel_index(np.argmin(base.values), base.values.shape)
    r1, c1 = np.unravel_index(np.argmin(moved.values), moved.values.shape)
    assert (c1 - c0, r1 - r0) == (dx, dy)


# --- quadratic fit --------------------------------------------------------------

def grid(half=7):
    yy, xx = np.mgrid[-half: half + 1, -half: half + 1].astype(float)
    return xx, yy


def test_exact_quadratic():
    xx, yy = grid()
    fit = fit_quadratic_minimum(ResidualMap((xx - 0.3) ** 2 + (yy + 0.2) ** 2, (-7, -7)), 3)
    assert fit.minimum_point.x == pytest.approx(0.3, abs=1e-12)
    assert fit.minimum_point.y == pytest.approx(-0.2, abs=1e-12)
    assert fit.residual_rms == pytest.approx(0.0, abs=1e-12)
    assert fit.ci68_x == pytest.approx(0.0, abs=1e-9)
    assert fit.ci68_y == pytest.approx(0.0, abs=1e-9)


def test_saddle_rejected():
    xx, yy = grid()
    # x*y surface, offset to stay non-negative, with the discrete argmin at the centre
    v = 50.0 + xx * yy
    v[7, 7] = 0.0
    with pytest.raises(SaddlePointError):
        fit_quadratic_minimum(ResidualMap(v, (-7, -7)), 3)


def test_window_outside_map():
    xx, yy = grid(3)
    with pytest.raises(FitError):
        fit_quadratic_minimum(ResidualMap((xx - 3) ** 2 + yy ** 2, (-3, -3)), 3)


@given(
    st.floats(-0.5, 0.5), st.floats(-0.5, 0.5),
    st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(-0.9, 0.9),
)
def test_noiseless_quadratic_recovered(mx, my, a, b, rho):
    xx, yy = grid()
    c = rho * math.sqrt(a * b) * 2
    v = 2.0 + a * (xx - mx) ** 2 + b * (yy - my) ** 2 + c * (xx - mx) * (yy - my)
    fit = fit_quadratic_minimum(ResidualMap(v, (-7, -7)), 3)
    assert abs(fit.minimum_point.x - mx) <= 1e-9
    assert abs(fit.minimum_point.y - my) <= 1e-9


def test_ci_coverage_monte_carlo():
    rs = np.random.default_rng(0)
    xx, yy = grid()
    n = 1000
    hit_x = hit_y = 0
    for _ in range(n):
        mx, my = rs.uniform(-0.5, 0.5, 2)
        v = 1.0 + (xx - mx) ** 2 + 0.7 * (yy - my) ** 2 + 0.2 * (xx - mx) * (yy - my)
        v = v + rs.normal(0.0, 0.3, v.shape)
        fit = fit_quadratic_minimum(ResidualMap(v, (-7, -7)), 3)
        hit_x += abs(fit.minimum_point.x - mx) <= 3 * fit.ci68_x
        hit_y += abs(fit.minimum_point.y - my) <= 3 * fit.ci68_y
    assert hit_x / n >= 0.99
    assert hit_y / n >= 0.99


# --- whole field --------------------------------------------------------------

def field(rotation=0.0, seed=1, marks=None, **kw):
    marks = marks or square_field_marks(1004, 1002, 750.0)
    scene = SceneSpec(marks=marks, beta=500.0, rotation_deg=rotation, rng_seed=seed, **kw)
    return scene, render_field(scene)


def nominal(scene):
    return [(m.x, m.y) for m in scene.marks]


def test_field_zero_rotation():
    scene, img = field()
    reg = register_field(img, nominal(scene), PITCH_NM)
    assert reg.pixel_scale.nanometers_per_pixel == pytest.approx(66.6667, abs=5e-3)
    assert reg.rotation_deg == 0.0
    assert reg.iterations_used == 1
    truth = scene.truth_positions("marks")
    got = np.array([[p.x, p.y] for p in reg.mark_centers])
    assert np.max(np.hypot(*(got - truth).T)) <= 0.05
    assert reg.warnings == ()


def test_field_center_is_mark_mean():
    scene, img = field(seed=4)
    reg = register_field(img, nominal(scene), PITCH_NM)
    pts = np.array([[p.x, p.y] for p in reg.mark_centers])
    assert abs(reg.field_center.x - pts[:, 0].mean()) <= 1e-12
    assert abs(reg.field_center.y - pts[:, 1].mean()) <= 1e-12


def test_field_one_degree():
    scene, img = field(rotation=1.0, seed=2)
    reg = register_field(img, nominal(scene), PITCH_NM)
    assert abs(reg.rotation_deg - 1.0) <= 0.01
    assert reg.iterations_used >= 2
    # truth moved into the corrected frame
    truth = rotate_points(scene.truth_positions("marks"), -reg.rotation_deg, reg.rotation_center)
    got = np.array([[p.x, p.y] for p in reg.mark_centers])
    assert np.max(np.hypot(*(got - truth).T)) <= 0.05


def test_fixed_point():
    scene, img = field(rotation=1.0, seed=3)
    cfg = RegistrationConfig()
    reg = register_field(img, nominal(scene), PITCH_NM, cfg)
    again = register_field(corrected_frame(img, reg), [(p.x, p.y) for p in reg.mark_centers], PITCH_NM, cfg)
    assert abs(again.angle_history[0]) < cfg.angle_tol
    assert again.rotation_deg == 0.0


def test_missing_mark():
    marks = square_field_marks(1004, 1002, 750.0)
    erased = marks[:3] + (MarkSpec(marks[3].x, marks[3].y, level=0.0),)
    scene, img = field(marks=erased)
    with pytest.raises(MarkNotFoundError) as info:
        register_field(img, [(m.x, m.y) for m in marks], PITCH_NM)
    assert info.value.index == 3


def test_no_convergence():
    scene, img = field(rotation=1.0)
    with pytest.raises(ConvergenceError) as info:
        register_field(img, nominal(scene), PITCH_NM, RegistrationConfig(max_iter=1))
    assert len(info.value.angles) == 1


def test_anisotropy_warning():
    cx, cy = 501.5, 500.5
    marks = tuple(
        MarkSpec(cx + sx * 375.0 * 1.01, cy + sy * 375.0)
        for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))
    )
    scene, img = field(marks=marks)
    reg = register_field(img, nominal(scene), PITCH_NM)
    assert any("anisotropy" in w for w in reg.warnings)


def test_nominal_marks_validated():
    scene, img = field()
    with pytest.raises(ParameterError):
        register_field(img, nominal(scene)[:3], PITCH_NM)
    with pytest.raises(ParameterError):
        register_field(img, nominal(scene), 0.0)


@pytest.mark.parametrize(
    "kw", [dict(arm_width=2), dict(roi_halfwidth=10), dict(threshold_quantile=1.0), dict(angle_tol=0.0)]
)
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        RegistrationConfig(**kw)
