from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orientgate import perception as pc
from orientgate import sim


def test_blue_cube_at_origin_centered():
    s = sim.reset(0, 0, 0)
    om = pc.object_mask(s)
    rows, cols = np.nonzero(om)
    assert rows.mean() == pytest.approx(31.5)
    assert cols.mean() == pytest.approx(31.5)


def test_cube_mask_area():
    r = np.random.default_rng(0)
    expected = (0.04 / 0.9 * 64) ** 2
    for _ in range(50):
        s = replace(sim.reset(0, 0, 0), blue=r.uniform(-0.2, 0.2, 2))
        assert abs(pc.object_mask(s).sum() - expected) <= 4


def test_robot_mask_theta_zero_on_right_midline():
    s = sim.reset(0, 0, 0)
    u, v = pc.centroid(pc.robot_mask(s))
    assert u > 0
    assert abs(v) <= 1 / 64


def test_render_levels_and_shapes():
    scene, om, rm = pc.render(sim.reset(45, 0.01, 3))
    assert scene.shape == om.shape == rm.shape == (64, 64)
    assert scene.dtype == np.float32
    assert set(np.unique(om)) <= {0, 1} and set(np.unique(rm)) <= {0, 1}
    assert scene.min() == 0.0 and scene.max() == pytest.approx(1.0)
    np.testing.assert_array_equal(np.round(scene * 255), scene * 255)
    assert np.any(np.abs(scene - pc.BLUE_LEVEL) <= 1 / 255) and np.any(np.abs(scene - pc.YELLOW_LEVEL) <= 1 / 255)


def test_mask_empty_outside_frustum():
    s = replace(sim.reset(0, 0, 0), blue=np.array([5.0, 5.0]))
    assert pc.object_mask(s).sum() == 0
    with pytest.raises(pc.EmptyMaskError):
        pc.spatial_softmax(pc.object_mask(s))


def test_spatial_softmax_single_pixel():
    m = np.zeros((64, 64), np.uint8)
    m[16, 48] = 1
    # exact point mass in the low-temperature limit
    kp = pc.spatial_softmax(m, tau=0.01)
    assert kp == pytest.approx([(48 + 0.5) / 32 - 1, 1 - (16 + 0.5) / 32], abs=1e-6)
    assert kp == pytest.approx([0.515625, 0.484375], abs=1e-6)
    # at the default temperature zero pixels keep weight e^-20 each
    kp = pc.spatial_softmax(m, tau=0.05)
    assert kp == pytest.approx([0.5156, 0.4844], abs=1e-4)


def test_spatial_softmax_all_ones():
    assert pc.spatial_softmax(np.ones((64, 64))) == pytest.approx([0, 0], abs=1e-12)


def test_spatial_softmax_symmetric_pair():
    m = np.zeros((64, 64))
    m[10, 20] = m[53, 43] = 1
    assert pc.spatial_softmax(m) == pytest.approx([0, 0], abs=1e-12)


def test_spatial_softmax_rejects_bad_tau():
    with pytest.raises(ValueError):
        pc.spatial_softmax(np.ones((64, 64)), tau=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 0.9))
def test_spatial_softmax_matches_centroid(seed, density):
    m = (np.random.default_rng(seed).random((64, 64)) < density).astype(np.uint8)
    if not m.any():
        m[0, 0] = 1
    kp = pc.spatial_softmax(m, 0.05)
    assert np.all(np.abs(kp - pc.centroid(m)) <= 1 / 64)
    rows, cols = np.nonzero(m)
    u = (cols + 0.5) / 32 - 1
    v = 1 - (rows + 0.5) / 32
    # inside the bounding box of the 1-pixels (weaker than the convex hull, cheap to check)
    assert u.min() - 1e-4 <= kp[0] <= u.max() + 1e-4 and v.min() - 1e-4 <= kp[1] <= v.max() + 1e-4


def test_high_temperature_drifts_to_center():
    m = np.zeros((64, 64))
    m[2:6, 2:6] = 1
    assert np.linalg.norm(pc.spatial_softmax(m, tau=1e4)) < 1e-3


def test_render_recovers_blue_position():
    r = np.random.default_rng(5)
    px = 0.9 / 64
    for _ in range(50):
        blue = r.uniform(-0.3, 0.3, 2)
        s = replace(sim.reset(0, 0, 0), blue=blue)
        est = pc.uv_to_world(pc.spatial_softmax(pc.object_mask(s)))
        assert np.linalg.norm(est - blue) <= 1.5 * px


def test_orient_vector_theta_zero():
    s = sim.reset(0, 0, 0)
    v = pc.state_vector(s)
    assert v == pytest.approx([-0.30 / 0.45, 0.0], abs=1 / 64)


def test_orient_vector_identity_and_antisymmetry():
    a, b = np.array([0.2, -0.3]), np.array([-0.5, 0.1])
    assert pc.orient_vector(a, a) == pytest.approx([0, 0])
    np.testing.assert_allclose(pc.orient_vector(a, b), -pc.orient_vector(b, a))


def test_orient_vector_differs_between_trained_angles():
    v0 = pc.state_vector(sim.reset(0, 0, 0))
    v45 = pc.state_vector(sim.reset(45, 0, 0))
    assert np.linalg.norm(v0 - v45) > 0.3


def test_orient_vector_bounded():
    for theta in np.linspace(0, 359, 37):
        assert np.linalg.norm(pc.state_vector(sim.reset(theta, 0.01, 1))) <= 2 * np.sqrt(2)


def test_temporal_average_constant():
    v = np.tile([0.3, -0.2], (10, 1))
    assert pc.temporal_average(v, 9) == pytest.approx([0.3, -0.2])


def test_temporal_average_alternating():
    v = np.array([[1.0, 2.0], [-1.0, -2.0]] * 5)
    assert pc.temporal_average(v, 9) == pytest.approx([0, 0])


def test_temporal_average_freezes():
    v = np.stack([np.arange(1, 13, dtype=float), np.zeros(12)], axis=1)
    assert pc.temporal_average(v, 9)[0] == pytest.approx(5.5)
    assert pc.temporal_average(v, 12)[0] == pytest.approx(5.5)
    assert pc.temporal_average(v, 2)[0] == pytest.approx(2.0)


def test_temporal_average_errors():
    with pytest.raises(ValueError):
        pc.temporal_average([], 0)
    with pytest.raises(ValueError):
        pc.FrozenVector(0)


def test_frozen_vector_ignores_later_pushes():
    fv = pc.FrozenVector(3)
    for x in (1.0, 2.0, 3.0):
        fv.push([x, 0])
    assert fv.frozen
    assert fv.push([100.0, 100.0]) == pytest.approx([2.0, 0.0])


def test_keypoint_tracker_fallback():
    tr = pc.KeypointTracker()
    m = np.zeros((64, 64))
    with pytest.raises(pc.EmptyMaskError):
        tr(m)
    m[5, 5] = 1
    first = tr(m)
    assert tr(np.zeros((64, 64))) is first


def test_pgm_pbm_writers(tmp_path):
    scene, om, _ = pc.render(sim.reset(0, 0, 0))
    pc.write_pgm(tmp_path / "s.pgm", scene)
    pc.write_pbm(tmp_path / "m.pbm", om)
    raw = (tmp_path / "s.pgm").read_bytes()
    assert raw.startswith(b"P5\n64 64\n255\n") and len(raw) == len(b"P5\n64 64\n255\n") + 4096
    assert len((tmp_path / "m.pbm").read_bytes()) == len(b"P4\n64 64\n") + 512
