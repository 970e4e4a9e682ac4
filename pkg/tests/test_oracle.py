import numpy as np
import pytest
from scipy import ndimage

from vtsplat import io
from vtsplat.camera import CameraView, look_at
from vtsplat.oracle import (MATERIALS, OracleSpec, approach_point, build_bvh, bunny_mesh, gt_point_cloud,
                            hemisphere_rig, make_scene, make_shape, mesh_distance, monocular_depth,
                            point_triangle_distance, raycast, render_oracle, sensor_frame, simulate_touch,
                            sphere_mesh, write_dataset)
from vtsplat.tactile import SensorSpec


@pytest.mark.parametrize("shape", ["sphere", "box", "cylinder", "bunny"])
def test_shapes_are_watertight(shape):
    m = make_shape(shape)
    assert m.is_watertight()
    assert np.all(m.areas() > 0)


def test_bunny_size_and_parts():
    m = bunny_mesh()
    lo, hi = m.bounds()
    assert 0.08 < np.max(hi - lo) < 0.16
    scene = make_scene("bunny")
    labels = set(scene.part_labels(gt_point_cloud(scene.mesh, 5000)))
    assert labels == {"ears", "head", "body", "base"}


def test_gt_cloud_lies_on_surface():
    m = sphere_mesh(0.05)
    pts = gt_point_cloud(m, 2000, seed=0)
    r = np.linalg.norm(pts, axis=1)
    assert np.all(r <= 0.05 + 1e-12) and np.all(r > 0.049)
    assert np.allclose(mesh_distance(m, pts[:50]), 0.0, atol=1e-12)


def test_point_triangle_distance_regions():
    tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], float)
    assert point_triangle_distance(np.array([0.2, 0.2, 0.5]), tri)[0] == pytest.approx(0.5)
    assert point_triangle_distance(np.array([-1.0, 0, 0]), tri)[0] == pytest.approx(1.0)
    assert point_triangle_distance(np.array([1.0, 1.0, 0]), tri)[0] == pytest.approx(np.sqrt(0.5))


def test_raycast_matches_bruteforce():
    m = bunny_mesh(3)
    bvh = build_bvh(m)
    rng = np.random.default_rng(0)
    o = rng.normal(0, 0.3, (200, 3))
    d = -o + rng.normal(0, 0.02, (200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, f = raycast(bvh, o, d)
    tris = m.triangles
    v0, e1, e2 = tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    for i in range(200):
        p = np.cross(d[i], e2)
        det = np.einsum("ij,ij->i", e1, p)
        s = o[i] - v0
        u = np.einsum("ij,ij->i", s, p) / det
        q = np.cross(s, e1)
        v = (q @ d[i]) / det
        tt = np.einsum("ij,ij->i", e2, q) / det
        ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (tt > 0)
        ref = tt[ok].min() if ok.any() else np.inf
        assert t[i] == pytest.approx(ref, rel=1e-9) if np.isfinite(ref) else not np.isfinite(t[i])


def test_render_sphere_silhouette_radius():
    c = np.array([0.0, 0.0, 0.25])
    scene = make_scene("sphere", "lambertian", c)
    cam = CameraView.from_fov(look_at(c + [0.4, 0, 0], c), 128, 128, 45.0)
    v = render_oracle(scene, cam)
    r_px = np.sqrt(v.mask.sum() / np.pi)
    # apparent angular radius asin(r / d), projected with the pinhole model
    expect = cam.fx * np.tan(np.arcsin(0.05 / 0.4))
    assert r_px == pytest.approx(expect, rel=0.02)
    assert np.min(v.depth[v.mask]) == pytest.approx(0.35, abs=0.002)
    assert np.all(v.normal[v.mask][:, 2] <= 0)


@pytest.mark.parametrize("material", sorted(MATERIALS))
def test_materials_render(material):
    scene = make_scene("sphere", material)
    cam = hemisphere_rig(scene.center, 1, 0.4, 32, 32)[0]
    v = render_oracle(scene, cam, view_seed=3)
    assert v.color.shape == (32, 32, 3) and v.mask.any()
    assert v.color.min() >= 0 and v.color.max() <= 1


def test_dark_material_is_dark():
    scene = make_scene("sphere", "dark")
    v = render_oracle(scene, hemisphere_rig(scene.center, 1, 0.4, 64, 64)[0])
    assert v.color[v.mask].mean() < 0.15


def test_monocular_prior_smears_silhouettes():
    scene = make_scene("sphere", "lambertian")
    v = render_oracle(scene, hemisphere_rig(scene.center, 1, 0.4, 64, 64)[0])
    prior = monocular_depth(v, np.random.default_rng(0), scale_err=0.0, warp=0.0)
    edge = v.mask ^ ndimage.binary_erosion(v.mask)
    interior = ndimage.binary_erosion(v.mask, iterations=6)
    assert np.allclose(prior[interior], v.depth[interior])
    # rim depths are pulled toward the background, leaving points in free space
    assert np.all(prior[edge] > v.depth[edge])
    assert np.allclose(monocular_depth(v, np.random.default_rng(0), 0.0, 0.0, edge_blur=0.0), v.depth)


def test_sensor_frame_is_rotation():
    for n in ([0, 0, 1.0], [1.0, 0, 0], [0.3, -0.2, 0.9]):
        R = sensor_frame(n)
        assert np.allclose(R.T @ R, np.eye(3)) and np.linalg.det(R) == pytest.approx(1.0)
        assert np.allclose(R[:, 2], np.asarray(n) / np.linalg.norm(n))


def test_simulated_touch_on_sphere():
    c = np.array([0.0, 0.0, 0.25])
    scene = make_scene("sphere", "lambertian", c)
    n = np.array([0.0, 0.0, 1.0])
    p, _ = approach_point(scene, c + 0.06 * n, n)
    assert np.linalg.norm(p - c) == pytest.approx(0.05, abs=1e-3)
    spec = SensorSpec()
    res = simulate_touch(scene, p, n, spec, press_depth=0.0005)
    R = 0.05
    a = np.sqrt(2 * R * 0.0005) / spec.pitch
    assert np.sqrt(res.gt.mask.sum() / np.pi) == pytest.approx(a, rel=0.05)
    # contact points sit on the sphere, normals point into the object
    assert np.allclose(np.linalg.norm(res.gt.points_world - c, axis=1), R, atol=2e-4)
    radial = (res.gt.points_world - c) / R
    assert np.all(np.sum(res.gt.point_normals_world * radial, axis=1) < -0.99)
    assert np.allclose(res.frame.pose.apply(res.gt.points_world), res.gt.points)
    with pytest.raises(ValueError, match="off the surface"):
        simulate_touch(scene, c + 0.06 * n, n, spec)
    with pytest.raises(ValueError, match="press depth"):
        simulate_touch(scene, p, n, spec, press_depth=0.002)


def test_write_dataset_loads(tmp_path):
    spec = OracleSpec(shape="box", material="lambertian", n_views=3, n_test_views=1, width=32, height=32,
                      gt_points=500)
    man = io.load_manifest(write_dataset(tmp_path, spec))
    assert [f.split for f in man.frames] == ["train"] * 3 + ["test"]
    imgs = io.load_frame_images(man.frames[0])
    assert set(imgs) >= {"color", "depth", "depth_prior", "normal", "mask"}
    pts, d = io.import_points(man.labeled_cloud)
    assert len(pts) == 500 and set(d["part"]) <= set(range(len(man.part_names)))
    assert man.extra["oracle"]["shape"] == "box"
