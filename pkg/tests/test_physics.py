import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexicup.physics import (ContactResult, CupFootprint, SuctionConfig, attach_update, contact_state, cup_config,
                              holding_force, load_registry)
from flexicup.scene import OBSTACLE_HEIGHT_MM, Pose, Scene, flat_scene, generate_board
from flexicup.state import DeviceState

R = 60  # coarse tactile raster keeps the tests fast


def flush(scene, x=10.0, y=10.0, tilt=None):
    tilt = scene.incline_deg if tilt is None else tilt
    return Pose(x, y, float(scene.plane_height_mm(x)) / 10.0, tilt)


def fake_contact(seal=1.0, gap=0.0, flat=True):
    z = np.zeros((3, 3))
    return ContactResult(z > 0, z, seal, seal, gap, 1.0, flat_support=flat)


def test_registry():
    reg = load_registry()
    assert reg["I"].f_max_newton == 34.3 and reg["I"].provenance == "paper"
    assert {reg[c].provenance for c in ("II", "III", "IV")} == {"assumed"}
    assert [reg[c].f_max_newton for c in ("II", "III", "IV")] == [10.0, 5.0, 0.8]
    with pytest.raises(ValueError):
        cup_config("V")
    with pytest.raises(ValueError):
        CupFootprint(2.0, 1.0, 1.5)


def test_flush_flat_full_seal():
    c = contact_state(flat_scene(), flush(flat_scene()), radius_px=R)
    assert c.seal_quality == 1.0 and c.gap_mm == 0.0
    d = c.deformation_mm[c.disk_mask]
    inner = c.deformation_mm[R - R // 2:R + R // 2, R - R // 2:R + R // 2]
    assert d.min() >= 0
    # uniform away from the edge, where the smoothing kernel is not clipped
    assert inner.mean() == pytest.approx(SuctionConfig().protrusion_mm, rel=0.02)
    assert np.ptp(inner) < 0.02 * inner.mean()


def test_obstacle_under_rim_breaks_seal():
    h = np.zeros((20, 20))
    h[10, 11] = OBSTACLE_HEIGHT_MM  # cell [11,12] x [10,11], inside the rim disk at (10, 10)
    s = Scene(20, 20, h, target=(10, 10))
    assert contact_state(s, flush(s), radius_px=R).seal_quality == 0.0


def test_tilt_matched_incline_seals():
    s = flat_scene(incline_deg=10.0)
    assert contact_state(s, flush(s, tilt=10.0), radius_px=R).seal_quality == 1.0


def rim_fraction_oracle(rim_in_mm, rim_out_mm, incline_deg, tol_mm, n=400_000, seed=0):
    """Monte-Carlo over the annulus area: a level rim touching the slope at its centre."""
    rng = np.random.default_rng(seed)
    r = np.sqrt(rng.uniform(rim_in_mm ** 2, rim_out_mm ** 2, n))
    a = rng.uniform(0, 2 * math.pi, n)
    u = r * np.cos(a)
    gap = np.maximum(-u * math.tan(math.radians(incline_deg)), 0.0)
    return float(np.mean(gap <= tol_mm))


def test_level_cup_on_incline_rim_fraction():
    s = flat_scene(incline_deg=10.0)
    cfg = SuctionConfig(cup=CupFootprint(1.14, 1.2, 2.0))
    c = contact_state(s, flush(s, tilt=0.0), cfg, radius_px=R)
    oracle = rim_fraction_oracle(12.0, 20.0, 10.0, cfg.seal_gap_tolerance_mm)
    assert c.rim_contact_fraction == pytest.approx(oracle, abs=0.01)
    assert c.rim_contact_fraction < cfg.seal_threshold


def test_force_examples():
    cfg = SuctionConfig.for_config("I")
    assert holding_force(fake_contact(1.0), cfg, True) == pytest.approx(34.3)
    assert holding_force(fake_contact(0.5), cfg, True) == pytest.approx(17.15)
    for cid in ("I", "II", "III", "IV"):
        assert holding_force(fake_contact(1.0), SuctionConfig.for_config(cid), False) == 0.0


def test_bernoulli_law():
    cfg = SuctionConfig.for_config("III")
    assert holding_force(fake_contact(gap=0.0), cfg) == pytest.approx(min(5.0, 2.5 / 0.5))
    assert holding_force(fake_contact(gap=2.0), cfg) == pytest.approx(1.0)
    assert holding_force(fake_contact(gap=0.0, flat=False), cfg) == 0.0


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 20), st.floats(0, 20), st.sampled_from(["I", "II", "III", "IV"]))
def test_force_bounds_and_monotonicity(s1, s2, g1, g2, cid):
    cfg = SuctionConfig.for_config(cid)
    lo, hi = sorted((s1, s2))
    glo, ghi = sorted((g1, g2))
    f = [holding_force(fake_contact(v, g), cfg) for v, g in ((lo, ghi), (hi, glo))]
    assert all(0 <= x <= cfg.cup.f_max_newton + 1e-12 for x in f)
    assert f[0] <= f[1]


def test_attach_weights():
    cfg = SuctionConfig.for_config("I")
    st_open = DeviceState(valve_open=True)
    for mass, expect in ((1.0, True), (4.0, False)):
        s = flat_scene(object_mass_kg=mass)
        assert attach_update(s, st_open, fake_contact(1.0), cfg).attached is expect
    assert attach_update(flat_scene(object_mass_kg=0.1), DeviceState(valve_open=False),
                         fake_contact(1.0), cfg).attached is False


@given(st.integers(0, 500), st.floats(2, 18), st.floats(2, 18), st.floats(0, 0.6), st.floats(-5, 5))
@settings(max_examples=25, deadline=None)
def test_contact_invariants_and_determinism(seed, x, y, z, tilt):
    s = generate_board(0.25, seed=seed, incline_deg=5.0)
    p = Pose(x, y, z + float(s.plane_height_mm(x)) / 10.0, tilt)
    a = contact_state(s, p, radius_px=20)
    b = contact_state(s, p, radius_px=20)
    assert 0.0 <= a.seal_quality <= 1.0 and 0.0 <= a.rim_contact_fraction <= 1.0
    assert (a.deformation_mm >= 0).all() and a.gap_mm >= 0
    if a.gap_mm > SuctionConfig().seal_gap_tolerance_mm:
        assert a.seal_quality == 0.0
    assert a.seal_quality == b.seal_quality and np.array_equal(a.deformation_mm, b.deformation_mm)
    st_ = DeviceState(valve_open=True)
    assert attach_update(s, st_, a).attached == attach_update(s, st_, b).attached


def test_lifted_cup_has_no_contact():
    s = flat_scene()
    c = contact_state(s, Pose(10, 10, 3.0), radius_px=R)
    assert not c.contact_mask.any() and c.seal_quality == 0.0
