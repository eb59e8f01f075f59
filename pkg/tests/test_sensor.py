import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexicup.scene import Pose, flat_scene, generate_board
from flexicup.sensor import (LED_ELEVATION_DEG, LED_WEIGHTS, TACTILE_AMBIENT, CameraIntrinsics, Modality,
                             ProjectionError, fisheye_project, fisheye_unproject, render_frame, synth_tactile_shading,
                             tactile_density)
from flexicup.state import DeviceState

SMALL = CameraIntrinsics().scaled(4)
FAR_TARGET = flat_scene(target=(0.0, 0.0))


def analytic_bump_shading(x, y, amp, sigma, weights, ambient=TACTILE_AMBIENT, elev=LED_ELEVATION_DEG):
    """Exact normals of h = amp * exp(-r^2 / 2 sigma^2), lit by four side lights."""
    h = amp * np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2))
    gx, gy = -x / sigma ** 2 * h, -y / sigma ** 2 * h
    n = np.sqrt(gx ** 2 + gy ** 2 + 1)
    ce, se = math.cos(math.radians(elev)), math.sin(math.radians(elev))
    out = np.full_like(h, ambient)
    for (lx, ly), w in zip(((ce, 0), (-ce, 0), (0, ce), (0, -ce)), weights):
        out += w * np.maximum(0, (-gx * lx - gy * ly + se) / n)
    return h, out


def bump(spacing=0.02, half=4.0, amp=1.0, sigma=1.0, weights=LED_WEIGHTS):
    o = np.arange(-half, half + spacing / 2, spacing)
    x, y = np.meshgrid(o, o)
    h, oracle = analytic_bump_shading(x, y, amp, sigma, weights)
    return h, oracle, synth_tactile_shading(h, spacing, contact_mask=np.ones_like(h, bool), weights=weights)


def test_projection_examples():
    intr = CameraIntrinsics()
    assert fisheye_project(0, 1.3, intr) == (512, 384)
    x, y = fisheye_project(math.pi / 2, 0, intr)
    assert (x - 512, y) == pytest.approx((380, 384))
    assert fisheye_project(math.pi / 4, 0, intr)[0] == pytest.approx(512 + 190)
    assert intr.f_px_per_rad * math.pi / 2 == pytest.approx(intr.peripheral_outer_px)
    with pytest.raises(ProjectionError):
        fisheye_project(2.0, 0, intr)


@given(st.floats(0, math.pi / 2), st.floats(-math.pi + 1e-6, math.pi))
def test_project_unproject_roundtrip(theta, phi):
    t, p = fisheye_unproject(*fisheye_project(theta, phi, SMALL), SMALL)
    assert t == pytest.approx(theta, abs=1e-9)
    if theta > 1e-6:
        assert math.cos(p - phi) == pytest.approx(1.0, abs=1e-9)


def test_zero_deformation_is_ambient():
    img = synth_tactile_shading(np.zeros((21, 21)), 0.1)
    assert np.all(img == TACTILE_AMBIENT)


def test_gaussian_bump_matches_analytic_normals():
    h, oracle, img = bump()
    inner = np.s_[5:-5, 5:-5]
    assert np.max(np.abs(img[inner] - oracle[inner])) < 0.05
    c = h.shape[0] // 2
    # +x light is strongest, so the flank facing +x (negative slope along x) is brighter
    assert img[c, c + 50] > img[c, c - 50]


def test_bump_symmetric_under_axis_swap_with_relabeled_leds():
    a, b, c, d = LED_WEIGHTS
    _, _, img = bump(spacing=0.05, weights=(a, b, c, d))
    _, _, swapped = bump(spacing=0.05, weights=(c, d, a, b))
    assert np.allclose(img.T, swapped, atol=1e-9)


def test_plateau_unchanged_under_scaling():
    h = np.zeros((81, 81))
    h[20:61, 20:61] = 0.5
    s1 = synth_tactile_shading(h, 0.1)
    s2 = synth_tactile_shading(2 * h, 0.1)
    plateau = np.s_[22:59, 22:59]
    assert np.array_equal(s1[plateau], s2[plateau])
    assert not np.array_equal(s1, s2)


def test_vision_empty_board_central_uniform():
    pose = Pose(10, 10, 0.5)
    f = render_frame(FAR_TARGET, pose, DeviceState(), SMALL)
    assert f.modality is Modality.VISION
    assert np.all(f.pixels[f.central_mask()] == 200)
    bright = render_frame(FAR_TARGET, pose, DeviceState(), CameraIntrinsics(exposure_gain=1.5).scaled(4))
    assert np.all(bright.pixels[bright.central_mask()] == 255)


def test_tactile_zero_contact_is_unlit_membrane():
    f = render_frame(FAR_TARGET, Pose(10, 10, 3.0), DeviceState(led_on=True), SMALL)
    assert f.modality is Modality.TACTILE
    assert np.all(f.pixels[f.central_mask()] == 30)


def test_tactile_flush_contact_uniform_interior_and_edge_ring():
    s = FAR_TARGET
    f = render_frame(s, Pose(10, 10, 0.0), DeviceState(led_on=True), SMALL)
    r = f.radius_map()
    rc = f.central_radius_px
    interior = f.pixels[r < 0.5 * rc]
    flat_value = round(TACTILE_AMBIENT + sum(LED_WEIGHTS) * math.sin(math.radians(LED_ELEVATION_DEG)))
    assert np.all(interior == flat_value)
    ring = f.pixels[(r > 0.85 * rc) & (r <= rc)]
    assert ring.min() < flat_value or ring.max() > flat_value


def test_outside_lens_black_and_led_only_changes_lens_pixels():
    s = generate_board(0.25, seed=2)
    pose = Pose(10, 10, 0.2)
    off = render_frame(s, pose, DeviceState(), SMALL)
    on = render_frame(s, pose, DeviceState(led_on=True), SMALL)
    outside = ~off.lens_mask()
    assert not off.pixels[outside].any() and not on.pixels[outside].any()
    changed = off.pixels != on.pixels
    assert changed.any() and not (changed & outside).any()


@given(st.integers(0, 100), st.booleans(), st.floats(3, 17), st.floats(0, 2))
@settings(max_examples=10, deadline=None)
def test_render_deterministic_and_flag_matches_led(seed, led, x, z):
    s = generate_board(0.5, seed=seed)
    a = render_frame(s, Pose(x, 10, z), DeviceState(led_on=led), SMALL, seq=5, timestamp_us=9)
    b = render_frame(s, Pose(x, 10, z), DeviceState(led_on=led), SMALL, seq=5, timestamp_us=9)
    assert np.array_equal(a.pixels, b.pixels)
    assert (a.modality is Modality.TACTILE) == led


def test_tactile_density_near_reference():
    assert tactile_density() == pytest.approx(60_248, rel=0.05)
