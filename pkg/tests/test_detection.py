import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emitterloc.detection import detect_candidates, dog_bandpass
from emitterloc.errors import BoundsError, ParameterError
from emitterloc.image_model import Image, RegionOfInterest
from emitterloc.synthesis import EmitterSpec, SceneSpec, expected_field, render_field


def spots(points, size=64, beta=5.0, alpha=1e4, seed=None):
    scene = SceneSpec(
        width=size, height=size, emitters=tuple(EmitterSpec(x, y, 1.44, alpha) for x, y in points),
        beta=beta, rng_seed=seed or 0,
    )
    counts = expected_field(scene) if seed is None else render_field(scene).counts
    return Image(counts)


def sampled_kernel(sigma):
    # ndimage.gaussian_filter samples exp(-k^2 / 2 s^2) out to 4 sigma and normalizes
    r = int(4.0 * sigma + 0.5)
    k = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (k / sigma) ** 2)
    return g / g.sum(), r


def test_constant_rejected():
    out = dog_bandpass(Image(np.full((40, 50), 123.0)))
    assert np.max(np.abs(out.counts)) < 1e-9


def test_impulse_gives_kernel():
    n = 81
    img = np.zeros((n, n))
    img[40, 40] = 1.0
    out = dog_bandpass(Image(img), 1.0, 8.0).counts
    g1, r1 = sampled_kernel(1.0)
    g8, r8 = sampled_kernel(8.0)
    want = np.zeros((n, n))
    want[40 - r8: 40 + r8 + 1, 40 - r8: 40 + r8 + 1] -= np.outer(g8, g8)
    want[40 - r1: 40 + r1 + 1, 40 - r1: 40 + r1 + 1] += np.outer(g1, g1)
    np.testing.assert_allclose(out, want, atol=1e-15)
    assert out[40, 40] > 0
    assert out[40, 40 + 6] < 0


def test_ramp_interior_zero():
    yy, xx = np.mgrid[0:120, 0:140].astype(float)
    ramp = 3.0 * xx + 2.0 * yy + 10.0
    out = dog_bandpass(Image(ramp)).counts
    interior = out[40:-40, 40:-40]
    assert np.max(np.abs(interior)) < 1e-6 * (ramp.max() - ramp.min())


def test_output_is_signed_image():
    out = dog_bandpass(spots([(30.0, 30.0)]))
    assert out.signed
    assert out.counts.min() < 0


@pytest.mark.parametrize("lo,hi", [(2.0, 2.0), (3.0, 1.0), (0.0, 1.0)])
def test_bad_sigmas(lo, hi):
    with pytest.raises(ParameterError):
        dog_bandpass(Image(np.zeros((8, 8))), lo, hi)


def test_single_spot():
    img = spots([(30.3, 31.7)])
    c = detect_candidates(dog_bandpass(img), img.full_roi)
    assert len(c) == 1
    assert math.hypot(c[0].centroid.x - 30.3, c[0].centroid.y - 31.7) < 0.5
    assert c[0].subroi == RegionOfInterest(25, 27, 11, 11)
    assert c[0].subroi.contains_point(c[0].centroid.x, c[0].centroid.y)


def test_single_noisy_spot():
    img = spots([(20.6, 40.2)], seed=9)
    c = detect_candidates(dog_bandpass(img), img.full_roi)
    assert len(c) == 1
    assert math.hypot(c[0].centroid.x - 20.6, c[0].centroid.y - 40.2) < 0.5


def test_blank_field():
    img = Image(np.full((64, 64), 7.0))
    assert detect_candidates(dog_bandpass(img), img.full_roi) == []


def test_two_spots_merge_or_split():
    # a narrow low-pass keeps the saddle between spots 3 px apart
    img = spots([(30.0, 32.0), (33.0, 32.0)])
    f = dog_bandpass(img, 0.5, 8.0)
    merged = detect_candidates(f, img.full_roi, min_separation=6)
    split = detect_candidates(f, img.full_roi, min_separation=2)
    assert len(merged) == 1
    assert merged[0].centroid.x == pytest.approx(31.5, abs=0.05)
    assert len(split) == 2
    xs = sorted(c.centroid.x for c in split)
    assert xs[0] == pytest.approx(30.0, abs=0.3)
    assert xs[1] == pytest.approx(33.0, abs=0.3)


def test_ordering_by_peak():
    scene = SceneSpec(
        width=80, height=80, beta=5.0,
        emitters=(EmitterSpec(20, 20, 1.44, 3e3), EmitterSpec(60, 20, 1.44, 2e4), EmitterSpec(40, 60, 1.44, 8e3)),
    )
    img = Image(expected_field(scene))
    c = detect_candidates(dog_bandpass(img), img.full_roi)
    assert [round(x.centroid.x) for x in c] == [60, 40, 20]
    peaks = [x.peak_filtered_value for x in c]
    assert peaks == sorted(peaks, reverse=True)


def test_roi_restricts_search():
    img = spots([(15.0, 15.0), (45.0, 45.0)])
    roi = RegionOfInterest(30, 30, 30, 30)
    c = detect_candidates(dog_bandpass(img), roi)
    assert len(c) == 1
    assert c[0].centroid.x == pytest.approx(45.0, abs=0.1)


def test_bad_arguments():
    img = dog_bandpass(spots([(30.0, 30.0)]))
    with pytest.raises(BoundsError):
        detect_candidates(img, RegionOfInterest(40, 40, 40, 40))
    with pytest.raises(ParameterError):
        detect_candidates(img, img.full_roi, threshold_sigma=0)
    with pytest.raises(ParameterError):
        detect_candidates(img, img.full_roi, subroi_halfwidth=1)


positions = st.tuples(st.floats(1.0, 62.0), st.floats(1.0, 62.0))


@given(st.lists(positions, min_size=1, max_size=4), st.integers(2, 7))
def test_subroi_inside_roi(points, half):
    img = spots(points)
    roi = RegionOfInterest(4, 6, 52, 50)
    for c in detect_candidates(dog_bandpass(img), roi, subroi_halfwidth=half):
        assert roi.contains(c.subroi)
        assert c.subroi.width <= 2 * half + 1 and c.subroi.height <= 2 * half + 1


@given(st.lists(positions, min_size=1, max_size=3), st.floats(0.0, 5000.0))
def test_dc_offset_invariant(points, offset):
    img = spots(points, seed=2)
    shifted = Image(img.counts + offset)
    a = detect_candidates(dog_bandpass(img), img.full_roi)
    b = detect_candidates(dog_bandpass(shifted), img.full_roi)
    assert len(a) == len(b)
    for ca, cb in zip(a, b):
        assert ca.subroi == cb.subroi
        assert ca.centroid.x == pytest.approx(cb.centroid.x, abs=1e-6)
        assert ca.centroid.y == pytest.approx(cb.centroid.y, abs=1e-6)


def test_deterministic():
    img = spots([(12.2, 50.1), (40.7, 22.9), (52.0, 52.0)], seed=4)
    f = dog_bandpass(img)
    assert detect_candidates(f, img.full_roi) == detect_candidates(f, img.full_roi)


def test_label_order_independent():
    # mirroring the image changes the internal component labelling only
    img = spots([(12.2, 50.1), (40.7, 22.9), (52.0, 52.0)], seed=4)
    a = detect_candidates(dog_bandpass(img), img.full_roi)
    flipped = Image(img.counts[:, ::-1].copy())
    b = detect_candidates(dog_bandpass(flipped), flipped.full_roi)
    assert len(a) == len(b)
    for ca, cb in zip(a, b):
        assert ca.peak_filtered_value == pytest.approx(cb.peak_filtered_value, rel=1e-9)
        assert ca.centroid.x == pytest.approx(63 - cb.centroid.x, abs=1e-6)
        assert ca.centroid.y == pytest.approx(cb.centroid.y, abs=1e-6)
