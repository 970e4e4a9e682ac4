import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vtsplat.camera import CameraView, Pose, look_at
from vtsplat.gaussians import GaussianPrimitive, GaussianScene
from vtsplat.render import (ALPHA_MAX, blend_alpha, composite_pixel_reference, project_gaussian, project_scene,
                            render)
from support import front_camera, random_render_scene, gradcheck_frame, gradient_errors, random_gradcheck_scene


def test_empty_scene_renders_background():
    cam = front_camera(16)
    out = render(GaussianScene.empty(), cam, background=(0.2, 0.3, 0.4))
    assert np.allclose(out.color, [0.2, 0.3, 0.4])
    assert np.all(out.transmittance == 1.0)


def test_two_gaussian_closed_form():
    # both splats are centered on the probed pixel, so each blends with its full opacity 0.5
    cam = CameraView(Pose.identity(), 100.0, 100.0, 8.0, 8.0, 17, 17)
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    scene = GaussianScene([[0, 0, 1.0], [0, 0, 2.0]], [[1, 0, 0, 0]] * 2, [[0.05] * 3, [0.1] * 3],
                          [0.5, 0.5], [c1, c2])
    out = render(scene, cam)
    assert np.allclose(out.color[8, 8], 0.5 * c1 + 0.25 * c2, atol=1e-6)
    assert out.transmittance[8, 8] == pytest.approx(0.25, abs=1e-6)


def test_front_to_back_order_independent_of_storage():
    cam = front_camera(24)
    scene = random_render_scene(np.random.default_rng(3))
    perm = np.random.default_rng(4).permutation(len(scene))
    a = render(scene, cam)
    b = render(scene.subset(perm), cam)
    assert np.allclose(a.color, b.color, atol=1e-12)
    assert np.allclose(a.depth, b.depth, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_transmittance_monotone_and_reference_match(seed):
    rng = np.random.default_rng(seed)
    cam = front_camera(16)
    scene = random_render_scene(rng, 8)
    out = render(scene, cam, background=(0.1, 0.2, 0.3))
    for px in [(3, 4), (8, 8), (12, 2)]:
        acc, trace = composite_pixel_reference(scene, cam, px, (0.1, 0.2, 0.3))
        assert np.all(np.diff(trace) <= 0)
        assert np.allclose(acc[:3], out.color[px[1], px[0]], atol=1e-10)
        assert trace[-1] == pytest.approx(out.transmittance[px[1], px[0]], abs=1e-10)


def test_alpha_is_clamped():
    cam = CameraView(Pose.identity(), 100.0, 100.0, 4.0, 4.0, 9, 9)
    scene = GaussianScene([[0, 0, 1.0]], [[1, 0, 0, 0]], [[0.2] * 3], [1.0], [[1, 1, 1]])
    out = render(scene, cam)
    assert out.transmittance[4, 4] == pytest.approx(1 - ALPHA_MAX)


def test_blend_alpha_matches_render_single_splat():
    cam = front_camera(20)
    g = GaussianPrimitive([0.05, -0.02, 1.2], scale=[0.03, 0.05, 0.02], opacity=0.6)
    splat = project_gaussian(g, cam)
    out = render(GaussianScene.from_primitives([g]), cam)
    for px in [(10, 10), (12, 9)]:
        assert 1 - out.transmittance[px[1], px[0]] == pytest.approx(blend_alpha(splat, px), rel=1e-10)


def test_behind_camera_and_far_outside_frustum_are_culled():
    cam = front_camera(16)
    assert project_gaussian(GaussianPrimitive([0, 0, -1.0]), cam) is None
    # a large splat beside the camera would otherwise blanket the image
    assert project_gaussian(GaussianPrimitive([2.0, 0, 0.1], scale=[0.5] * 3), cam) is None


def test_depth_and_normal_channels():
    cam = front_camera(16)
    # a flat disc facing the camera: its normal axis is z, rendered toward the viewer
    scene = GaussianScene([[0, 0, 1.5]], [[1, 0, 0, 0]], [[0.3, 0.3, 0.001]], [0.99], [[1, 1, 1]])
    out = render(scene, cam)
    a = 1 - out.transmittance[8, 8]
    assert out.depth[8, 8] == pytest.approx(1.5 * a)
    assert np.allclose(out.normal[8, 8] / a, [0, 0, -1], atol=1e-9)


def test_projection_sorted_by_depth():
    proj = project_scene(random_render_scene(np.random.default_rng(9), 30), front_camera(32))
    assert np.all(np.diff(proj.depths) >= 0)


def test_gradients_single_scene():
    rng = np.random.default_rng(123)
    scene = random_gradcheck_scene(rng)
    cam = front_camera()
    errs = gradient_errors(scene, gradcheck_frame(scene, cam, rng))
    assert max(errs.values()) < 1e-3, errs


def test_oblique_camera_gradients():
    rng = np.random.default_rng(5)
    scene = random_gradcheck_scene(rng)
    pose = look_at([0.6, -0.4, 0.2], [0, 0, 1.1])
    cam = CameraView.from_fov(pose, 24, 24, 60.0)
    errs = gradient_errors(scene, gradcheck_frame(scene, cam, rng))
    assert max(errs.values()) < 1e-3, errs
