import math

import numpy as np
import pytest

from flexicup.bench import bench_classification
from flexicup.objects import default_library
from flexicup.perception import (Fusion, ModalityError, classify_object, detect_target, edge_step_hint,
                                 segment_contact)
from flexicup.physics import SuctionConfig, contact_state
from flexicup.scene import OBSTACLE_HEIGHT_MM, Pose, Scene, flat_scene, generate_board
from flexicup.sensor import CameraIntrinsics, render_frame
from flexicup.state import DeviceState

HALF = CameraIntrinsics().scaled(2)
VISION, TACTILE = DeviceState(), DeviceState(led_on=True)


def flush_pose(scene, x, y, press_cm=0.0):
    return Pose(x, y, float(scene.plane_height_mm(x)) / 10.0 - press_cm, scene.incline_deg)


@pytest.fixture(scope="module")
def classification():
    return bench_classification(seed=0)


def test_marker_absent():
    s = flat_scene(target=(0.5, 0.5))
    assert not detect_target(render_frame(s, Pose(15, 15, 0.5), VISION, HALF)).found


@pytest.mark.parametrize("k", range(36))
def test_marker_bearing_loop_closure(k):
    phi = 2 * math.pi * k / 36
    s = flat_scene(target=(10 + 6.5 * math.cos(phi), 10 + 6.5 * math.sin(phi)))
    det = detect_target(render_frame(s, Pose(10, 10, 0.5), VISION, HALF))
    assert det.found
    err = math.atan2(math.sin(det.bearing_rad - phi), math.cos(det.bearing_rad - phi))
    assert abs(err) <= 0.05


def test_zero_contact_coverage():
    f = render_frame(flat_scene(), Pose(10, 10, 2.0), TACTILE, HALF)
    seg = segment_contact(f)
    assert seg.coverage == 0.0 and not seg.mask.any()


def test_flush_full_contact():
    s = flat_scene()
    seg = segment_contact(render_frame(s, flush_pose(s, 10, 10), TACTILE, HALF))
    assert seg.coverage >= 0.95 and seg.flatness >= 0.9


def test_half_disk_at_board_edge():
    s = flat_scene()
    seg = segment_contact(render_frame(s, flush_pose(s, 20.0, 10), TACTILE, HALF))
    assert seg.coverage == pytest.approx(0.5, abs=0.05)


def iou(a, b):
    return (a & b).sum() / max(1, (a | b).sum())


def test_segmentation_iou_random_flush_contacts():
    rng = np.random.default_rng(0)
    rc = HALF.central_radius_px
    scores = []
    for i in range(100):
        s = flat_scene(incline_deg=float(rng.uniform(0, 15)))
        x, y = rng.uniform(3, 17, size=2)
        pose = flush_pose(s, x, y, press_cm=float(rng.uniform(0, 0.1)))
        truth = contact_state(s, pose, SuctionConfig(), radius_px=rc).contact_mask
        seg = segment_contact(render_frame(s, pose, TACTILE, HALF))
        scores.append(iou(seg.mask, truth))
    assert min(scores) >= 0.9


def test_edge_hint_points_away_from_obstacles():
    h = np.zeros((20, 20))
    h[:, :10] = OBSTACLE_HEIGHT_MM
    s = Scene(20, 20, h, target=(19, 19))
    f = render_frame(s, Pose(10, 10, 0.5), VISION, HALF)
    assert edge_step_hint(f, default="-y") == "+x"
    h2 = np.zeros((20, 20))
    h2[:10, :] = OBSTACLE_HEIGHT_MM
    f2 = render_frame(Scene(20, 20, h2, target=(19, 19)), Pose(10, 10, 0.5), VISION, HALF)
    assert edge_step_hint(f2) == "+y"


@pytest.mark.parametrize("coverage", [0.0, 1.0])
def test_edge_hint_uniform_falls_back(coverage):
    s = generate_board(coverage, seed=0, target=(19.5, 19.5))
    f = render_frame(s, Pose(10, 10, 0.3), VISION, HALF)
    assert edge_step_hint(f, default="-x") == "-x"


def test_modality_gating():
    s = flat_scene()
    vis = render_frame(s, Pose(10, 10, 1.0), VISION, HALF)
    tac = render_frame(s, Pose(10, 10, 1.0), TACTILE, HALF)
    with pytest.raises(ModalityError):
        detect_target(tac)
    with pytest.raises(ModalityError):
        edge_step_hint(tac)
    with pytest.raises(ModalityError):
        segment_contact(vis)
    with pytest.raises(ModalityError):
        classify_object(tac, tac, Fusion.FUSED)
    with pytest.raises(ModalityError):
        classify_object(vis, vis, Fusion.TACTILE_ONLY)


def test_library_fixture():
    lib = default_library()
    assert len(lib.labels) == 13
    with pytest.raises(ValueError):
        lib.render("unicorn")
    vis, tac = lib.render("apple", 3, seed=1)
    again = lib.render("apple", 3, seed=1)
    assert np.array_equal(vis.pixels, again[0].pixels) and np.array_equal(tac.pixels, again[1].pixels)


def test_classification_structure(classification):
    r = classification
    for mode, mat in r.confusion.items():
        assert all(sum(row) == r.variations for row in mat)
    acc = r.accuracy
    assert acc["fused"] >= acc["vision"] and acc["fused"] >= acc["tactile"]
    assert acc["vision"] < 1.0 and acc["tactile"] < 1.0
    assert r.misclassified["vision"] and r.misclassified["tactile"]
    # some archetypes are separable in both modalities: their rows are diagonal everywhere
    separable = [lab for i, lab in enumerate(r.labels)
                 if all(r.confusion[m][i][i] == r.variations for m in r.confusion)]
    assert separable


def test_classification_is_deterministic(classification):
    assert bench_classification(seed=0).to_json() == classification.to_json()
