import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from support import smooth_heightfield
from vtsplat.camera import look_at
from vtsplat.tactile import (MIN_LABELS, BallPress, CalibrationModel, GradientMap, ReflectanceModel, SensorSpec,
                             TactileFrame, border_mask, calibrate, default_calibration, extract_contact,
                             gradients_to_normals, poisson_integrate, process_frame, sphere_cap,
                             sphere_gradients, to_world)

SPEC = SensorSpec()


@pytest.fixture(scope="module")
def model():
    return default_calibration(SPEC)


def test_calibration_fits_the_simulated_sensor(model):
    assert model.rmse < 1e-3
    assert model.n_labels >= MIN_LABELS
    flat = ReflectanceModel().flat(SPEC)
    gm = model.predict(flat)
    assert np.abs(gm.gx).max() < 1e-4 and np.abs(gm.gy).max() < 1e-4


def test_calibration_roundtrip_file(model, tmp_path):
    model.save(tmp_path / "c.json")
    back = CalibrationModel.load(tmp_path / "c.json")
    assert np.array_equal(back.coef, model.coef) and back.spec == model.spec


def test_calibration_rejects_too_few_labels():
    spec = SPEC
    c = (160, 120)
    f = sphere_cap(spec, c, 0.004, 0.00002)     # tiny contact disc
    a_px = np.sqrt(2 * 0.004 * 0.00002) / spec.pitch
    frame = TactileFrame(ReflectanceModel().render_height(f, spec), spec=spec)
    with pytest.raises(ValueError, match="insufficient labels"):
        calibrate([BallPress(frame, c, 0.004, a_px)])


def test_poisson_recovers_quadratic_bowl():
    spec = SPEC
    x, y = spec.pixel_coords()
    f = 40.0 * (x**2 + y**2)
    out = poisson_integrate(GradientMap.from_height(f, spec.pitch), spec.pitch)
    ref = f - f[border_mask(f.shape)].mean()
    assert np.sqrt(np.mean((out - ref) ** 2)) < 0.01 * np.ptp(f)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_roundtrip_random_heightfield(model, seed):
    f = smooth_heightfield(np.random.default_rng(seed))
    rgb = ReflectanceModel().render_height(f, SPEC)
    gm = model.predict(rgb)
    out = poisson_integrate(gm, SPEC.pitch)
    ref = f - f[border_mask(f.shape)].mean()
    assert np.sqrt(np.mean((out - ref) ** 2)) < 0.01 * np.ptp(f)


def test_sphere_press_normals_and_contact(model):
    R, depth = 0.005, 0.0006
    c = (150.0, 110.0)
    f = sphere_cap(SPEC, c, R, depth)
    frame = TactileFrame(ReflectanceModel().render_height(f, SPEC, noise=0.002,
                                                         rng=np.random.default_rng(0)), spec=SPEC)
    patch = process_frame(frame, model)
    assert patch.in_contact
    a_px = np.sqrt(2 * R * depth - depth**2) / SPEC.pitch
    gx, gy, _ = sphere_gradients(SPEC, c, R, a_px)
    truth = gradients_to_normals(GradientMap(gx, gy))
    cos = np.clip(np.sum(patch.normals[patch.mask] * truth[patch.mask], axis=-1), -1, 1)
    assert np.degrees(np.arccos(cos)).mean() < 2.0
    # contact disc: where the ball lies deeper than the threshold
    thr = 1e-4
    r_expect = np.sqrt(R**2 - (R - depth + thr) ** 2) / SPEC.pitch
    r_meas = np.sqrt(patch.mask.sum() / np.pi)
    assert r_meas == pytest.approx(r_expect, rel=0.05)


def test_no_contact_gives_empty_patch(model):
    frame = TactileFrame(ReflectanceModel().flat(SPEC), spec=SPEC)
    p = process_frame(frame, model)
    assert not p.in_contact and len(p.points_world) == 0


def test_extract_contact_points_are_metric():
    f = np.zeros((SPEC.height, SPEC.width))
    f[100:110, 150:170] = 3e-4
    mask, pts = extract_contact(f, 1e-4, SPEC)
    assert mask.sum() == 200 and len(pts) == 200
    assert np.allclose(pts[:, 2], 3e-4)
    assert np.ptp(pts[:, 0]) == pytest.approx(19 * SPEC.pitch)


def test_to_world_inverts_pose():
    pose = look_at([0.1, 0.2, 0.3], [0, 0, 0])
    pts = np.array([[0.001, 0.002, 0.0005]])
    nrm = np.array([[0, 0, -1.0]])
    f = np.zeros((SPEC.height, SPEC.width))
    from vtsplat.tactile import TactilePatch
    p = to_world(TactilePatch(np.zeros(f.shape + (3,)), f, f > 0, pts, nrm), pose)
    assert np.allclose(pose.apply(p.points_world), pts)
    assert np.allclose(pose.rotate(p.point_normals_world), nrm)


def test_frame_shape_validated():
    with pytest.raises(ValueError):
        TactileFrame(np.zeros((10, 10, 3)))
