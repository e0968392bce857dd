import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emitterloc.errors import ParameterError, RangeError
from emitterloc.image_model import save_pgm
from emitterloc.mle import SubRoiData, ThetaVector, crlb_uncertainties, fisher_matrix, fit_mle, neg_log_likelihood
from emitterloc.rng import poisson_field
from emitterloc.synthesis import (
    DEFAULT_GRID,
    REFERENCE_DELTA_MLE_NM,
    EmitterSpec,
    GridLevel,
    MarkSpec,
    SceneSpec,
    alpha_for_crlb,
    expected_field,
    grid_search_mle,
    reference_field_scene,
    render_field,
    render_subroi,
    square_field_marks,
)

SMALL = SceneSpec(
    width=24, height=24, beta=3.0,
    marks=(MarkSpec(8, 8, arm_length=5, arm_width=3, level=40.0),),
    emitters=(EmitterSpec(15.3, 14.6, 1.44, 2000.0),),
)


def test_dark_scene_is_zero():
    scene = SceneSpec(width=30, height=20, emitters=(EmitterSpec(10, 10, 1.44, 0.0),), beta=0.0)
    for seed in (0, 1, 2**63 + 5):
        img = render_field(dataclasses.replace(scene, rng_seed=seed))
        assert not img.counts.any()


def test_render_is_deterministic(tmp_path):
    scene = dataclasses.replace(SMALL, rng_seed=42)
    save_pgm(render_field(scene), tmp_path / "a.pgm")
    save_pgm(render_field(scene), tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
    other = render_field(dataclasses.replace(SMALL, rng_seed=43))
    assert other != render_field(scene)


def test_render_is_poisson_of_expected():
    scene = dataclasses.replace(SMALL, rng_seed=7)
    np.testing.assert_array_equal(render_field(scene).counts, poisson_field(expected_field(scene), 7))


def test_sample_mean_over_seeds():
    lam = expected_field(SMALL)
    n = 10_000
    total = np.zeros_like(lam)
    for seed in range(n):
        total += render_field(dataclasses.replace(SMALL, rng_seed=seed)).counts
    mean = total / n
    ok = np.abs(mean - lam) <= 3 * np.sqrt(lam / n)
    assert ok.mean() >= 0.99


def test_expected_field_contents():
    lam = expected_field(SMALL)
    assert lam.min() == pytest.approx(3.0, abs=1e-6)
    # without blur the mark centre carries the full level
    assert expected_field(dataclasses.replace(SMALL, edge_blur=0.0))[8, 8] == pytest.approx(43.0, abs=1e-9)
    assert 3.0 < lam[8, 8] < 43.0
    emitter = expected_field(dataclasses.replace(SMALL, marks=())) - 3.0
    assert emitter.sum() == pytest.approx(2000.0, rel=1e-6)


def test_cross_area_matches_geometry():
    scene = SceneSpec(width=61, height=61, marks=(MarkSpec(30.0, 30.0, 15.0, 3.0, 1.0),), edge_blur=0.0)
    lam = expected_field(scene)
    # two 31x3 bars minus their shared 3x3 square
    assert lam.sum() == pytest.approx(2 * 31 * 3 - 9, abs=1e-9)


def test_blur_preserves_mark_mass():
    sharp = SceneSpec(width=61, height=61, marks=(MarkSpec(30.2, 29.7, 15.0, 3.0, 1.0),), edge_blur=0.0)
    soft = dataclasses.replace(sharp, edge_blur=0.8)
    assert expected_field(soft).sum() == pytest.approx(expected_field(sharp).sum(), rel=1e-9)


def test_range_error_and_clamp():
    scene = SceneSpec(width=20, height=20, emitters=(EmitterSpec(10, 10, 0.3, 1e6),))
    with pytest.raises(RangeError):
        render_field(scene)
    img = render_field(dataclasses.replace(scene, clamp=True))
    assert img.counts.max() == 65535


def test_rotated_truth():
    marks = square_field_marks(101, 101, 60.0)
    scene = SceneSpec(width=101, height=101, marks=marks, rotation_deg=90.0)
    got = scene.truth_positions("marks")
    # +90 deg takes top-left to top-right (y down)
    np.testing.assert_allclose(got[0], [marks[1].x, marks[1].y], atol=1e-9)


def test_scene_validation():
    with pytest.raises(ParameterError):
        SceneSpec(width=10, height=10, emitters=(EmitterSpec(12, 3),))
    with pytest.raises(ParameterError):
        SceneSpec(width=10, height=10, emitters=(EmitterSpec(2, 3, sigma2=0.0),))
    with pytest.raises(ParameterError):
        SceneSpec(width=10, height=10, beta=-1.0)
    with pytest.raises(ParameterError):
        SceneSpec(width=10, height=10, nanometers_per_pixel=0.0)


def test_scene_json_round_trip():
    scene = reference_field_scene(5, rotation_deg=0.3)
    back = SceneSpec.from_json(scene.to_json())
    assert back == scene
    with pytest.raises(ParameterError):
        SceneSpec.from_json("{not json")
    with pytest.raises(ParameterError):
        SceneSpec.from_dict({"schema_version": 99})
    with pytest.raises(ParameterError):
        SceneSpec.from_dict({"bogus": 1})


def test_reference_scene_alphas():
    scene = reference_field_scene(0)
    data = SubRoiData(np.zeros((11, 11)))
    for e, want in zip(scene.emitters, REFERENCE_DELTA_MLE_NM):
        d = crlb_uncertainties(fisher_matrix(ThetaVector(0, 0, e.sigma2, e.alpha, scene.beta), data))[0]
        assert d * 66.7 == pytest.approx(want, rel=1e-6)


def test_alpha_for_crlb_monotone():
    assert alpha_for_crlb(0.01) > alpha_for_crlb(0.02) > alpha_for_crlb(0.04)


# --- grid oracle ----------------------------------------------------------------

def test_grid_level_size():
    assert DEFAULT_GRID[0].size == 11 ** 5
    assert GridLevel(0.1, 0.1, 0.0, 1.0).size == 9


def test_grid_exact_on_grid():
    truth = ThetaVector(0.3, -0.2, 1.44, 1e4, 5.0)
    data = render_subroi(truth)
    step = DEFAULT_GRID[0].center_step
    start = truth.shifted(2 * step, -1 * step)
    start = dataclasses.replace(start, sigma2=truth.sigma2 * math.exp(DEFAULT_GRID[0].log_step))
    got, _ = grid_search_mle(data, start=start)
    assert got.i0 == pytest.approx(truth.i0, abs=1e-12)
    assert got.j0 == pytest.approx(truth.j0, abs=1e-12)
    for name in ("sigma2", "alpha", "beta"):
        assert getattr(got, name) == pytest.approx(getattr(truth, name), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grid_agrees_with_fit(seed):
    data = render_subroi(ThetaVector(0.17, -0.28, 1.44, 1e4, 5.0), seed=seed)
    fit = fit_mle(data)
    grid, history = grid_search_mle(data)
    assert abs(fit.theta_hat.i0 - grid.i0) <= 1e-3
    assert abs(fit.theta_hat.j0 - grid.j0) <= 1e-3
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert history[-1] == pytest.approx(neg_log_likelihood(grid, data), rel=1e-12)


def test_grid_recovers_from_far_start():
    data = render_subroi(ThetaVector(0.17, -0.28, 1.44, 1e4, 5.0), seed=4)
    far = ThetaVector(1.5, 1.5, 4.0, 2e3, 20.0)
    a, _ = grid_search_mle(data)
    b, _ = grid_search_mle(data, start=far)
    assert abs(a.i0 - b.i0) <= 1e-3 and abs(a.j0 - b.j0) <= 1e-3


def test_grid_guard():
    data = render_subroi(ThetaVector(0, 0, 1.44, 1e4, 5.0))
    with pytest.raises(ParameterError):
        grid_search_mle(data, steps=[GridLevel(1.0, 0.01, 1.0, 0.01)])
    with pytest.raises(ParameterError):
        grid_search_mle(data, max_evaluations=1000)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.integers(0, 2**32))
def test_render_subroi_shape_and_mean(i0, j0, seed):
    theta = ThetaVector(i0, j0, 1.44, 500.0, 2.0)
    data = render_subroi(theta, shape=(9, 13), seed=seed)
    assert data.shape == (9, 13)
    assert np.all(data.counts == np.round(data.counts))
