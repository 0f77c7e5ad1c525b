import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from focuslab.metrics import tenengrad
from focuslab.optics import (DegenerateGeometryError, LensConfig, ObjectPose, apply_defocus,
                             auto_kernel_size, coc_radius, coc_radius_px, image_distance, psf_kernel)
from focuslab.scenes import make_scene


def coc_via_conjugate(D, L, f, p):
    q = f * p / (p - f)
    return D / q * abs(L - q)


def test_image_distance_examples():
    assert image_distance(1.0, 2.0) == pytest.approx(2.0, rel=1e-15)
    q = image_distance(0.05, 3.0)
    assert q == pytest.approx(0.05084745762711865, rel=1e-14)
    assert 1 / 0.05 == pytest.approx(1 / q + 1 / 3.0, rel=1e-14)


def test_image_distance_degenerate():
    with pytest.raises(DegenerateGeometryError):
        image_distance(0.05, 0.05)
    with pytest.raises(DegenerateGeometryError):
        image_distance(0.05, 0.05 + 5e-10)
    with pytest.raises(ValueError):
        image_distance(-1.0, 2.0)


def test_coc_hand_value():
    lens = LensConfig(aperture_radius_D=0.01, image_plane_L=0.1)
    assert coc_radius(lens, 0.09, 2.0) == pytest.approx(0.01 * abs(0.2 - 0.189) / 0.18, rel=1e-12)
    assert coc_radius(lens, 0.09, 2.0) == pytest.approx(6.1111e-4, rel=1e-4)


def test_coc_zero_at_conjugate():
    L, p = 0.1, 0.7
    lens = LensConfig(image_plane_L=L)
    assert coc_radius(lens, L * p / (L + p), p) == pytest.approx(0.0, abs=1e-18)


def test_coc_dual_route_random_tuples():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        D, L = rng.uniform(1e-3, 0.05), rng.uniform(0.01, 0.5)
        p = rng.uniform(0.05, 10.0)
        f = rng.uniform(0.005, 0.5)
        if abs(p - f) < 1e-3:
            continue
        lens = LensConfig(aperture_radius_D=D, image_plane_L=L)
        a, b = coc_radius(lens, f, p), coc_via_conjugate(D, L, f, p)
        if b == 0:
            assert a == 0
        else:
            worst = max(worst, abs(a - b) / b)
    assert worst <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.01, 0.5), st.booleans())
def test_coc_strictly_increasing_away_from_focus(p, shift, below):
    shift = -shift if below else shift
    lens = LensConfig()
    f0 = lens.image_plane_L * p / (lens.image_plane_L + p)
    r = [coc_radius(lens, f0 * (1 + s * shift), p) for s in (0.0, 0.01, 0.02)]
    assert r[0] < r[1] < r[2]


def test_lens_power_model_round_trip():
    lens = LensConfig()
    # the bottom of the range focuses at infinity with the default base power
    with pytest.raises(ValueError):
        lens.distance_for_focus(lens.focus_min_dpt)
    for f in np.linspace(lens.focus_min_dpt + 0.1, lens.focus_max_dpt, 11):
        p = lens.distance_for_focus(f)
        assert coc_radius_px(lens, f, p) == pytest.approx(0.0, abs=1e-9)
        assert lens.in_focus_dpt(p) == pytest.approx(f, abs=1e-12)
    # blur grows linearly with the diopter error
    p = lens.distance_for_focus(0.0)
    assert coc_radius_px(lens, 1.0, p) == pytest.approx(lens.blur_px_per_dpt(), rel=1e-9)
    assert coc_radius_px(lens, -1.0, p) == pytest.approx(lens.blur_px_per_dpt(), rel=1e-9)


def test_lens_config_validation():
    with pytest.raises(ValueError):
        LensConfig(aperture_radius_D=0)
    with pytest.raises(ValueError):
        LensConfig(focus_min_dpt=3, focus_max_dpt=-2)
    with pytest.raises(ValueError):
        ObjectPose(0.0)
    assert LensConfig().clamp(10) == 3.0 and LensConfig().clamp(-10) == -2.0


def test_psf_delta_and_hand_value():
    k = psf_kernel(0.0, 3)
    assert k.taps[1, 1] == 1.0 and k.taps.sum() == 1.0
    k = psf_kernel(2.0, 13)
    brute = 1.0 / sum(math.exp(-(i * i + j * j) / 4.0) for i in range(-6, 7) for j in range(-6, 7))
    assert k.taps[6, 6] == pytest.approx(brute, rel=1e-12)
    assert k.taps[6, 6] == pytest.approx(0.07957791147082943, rel=1e-12)


def test_psf_even_size_rejected():
    with pytest.raises(ValueError):
        psf_kernel(1.0, 4)
    with pytest.raises(ValueError):
        psf_kernel(-1.0)


@settings(max_examples=150, deadline=None)
@given(st.floats(0.0, 32.0), st.integers(0, 20))
def test_psf_normalized_and_symmetric(radius, half):
    k = psf_kernel(radius) if half == 0 else psf_kernel(radius, 2 * half + 1)
    assert abs(k.taps.sum() - 1.0) <= 1e-6
    assert np.all(k.taps >= 0)
    assert np.allclose(k.taps, k.taps.T) and np.allclose(k.taps, k.taps[::-1, ::-1])
    assert np.allclose(k.taps, k.taps[::-1, :])
    if half == 0:
        assert k.size == auto_kernel_size(radius) and k.size >= 6 * radius + 1


def test_defocus_identity_and_constant():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(20, 17))
    assert np.array_equal(apply_defocus(img, psf_kernel(0.0, 5)), img)
    const = np.full((9, 9), 0.3)
    np.testing.assert_allclose(apply_defocus(const, psf_kernel(3.0)), const, atol=1e-15)
    with pytest.raises(ValueError):
        apply_defocus(np.zeros((0, 4)), psf_kernel(1.0))


def test_defocus_matches_direct_convolution():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 12))
    k = psf_kernel(1.7)
    r = k.size // 2
    pad = np.pad(img, r, mode="edge")
    ref = np.zeros_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            ref[i, j] = np.sum(pad[i:i + k.size, j:j + k.size] * k.taps[::-1, ::-1])
    np.testing.assert_allclose(apply_defocus(img, k), ref, rtol=1e-12, atol=1e-14)


def test_tenengrad_decreases_over_radius_sweep():
    img, mask = make_scene(64, 3)
    vals = [tenengrad(apply_defocus(img, psf_kernel(r)), mask) for r in (0, 1, 2, 4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 6.0), st.floats(0.0, 6.0))
def test_blur_contractive_and_monotone(seed, r1, r2):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(24, 24))
    a, b = sorted((r1, r2))
    ia, ib = apply_defocus(img, psf_kernel(a)), apply_defocus(img, psf_kernel(b))
    assert ia.max() <= img.max() and ia.min() >= img.min()
    if b - a > 1e-3:
        assert tenengrad(ia) >= tenengrad(ib) - 1e-12
