import json

import numpy as np
import pytest

from carsplat.asset import CarAsset, canonicalize, save_asset
from carsplat.geom import (Camera, OrientedBox3, PointCloud, RigidSim3, axis_angle_quat, compose as tf_compose,
                           dump_cameras_and_tracks, quat_conj, quat_mul, rotation_angle)
from carsplat.insertion import (MissingTrackFrameError, PlacedAsset, SceneGraph, align_box, compose,
                                fit_env_scale, icp_refine, load_scene_manifest, make_shadow, place_asset,
                                save_scene_manifest)
from carsplat.imageio import write_pfm
from carsplat.raster import SplatSet, render, save_splats
from carsplat.shading import EnvironmentMap, prefilter
from carsplat.synthetic import car_splats

from conftest import random_transform


@pytest.fixture(scope="module")
def asset():
    return canonicalize(car_splats(150, 2), front_hint="+x", metadata={"color": "red"})


def ground_plane(size=6.0, n=15, z=0.0):
    g = np.linspace(-size / 2, size / 2, n)
    xy = np.array([(x, y) for x in g for y in g])
    k = len(xy)
    # a regular grid has exactly tied view depths, which makes the sort order rounding-dependent
    xy = xy + np.random.default_rng(0).uniform(-0.01, 0.01, xy.shape) * size / n
    return SplatSet(np.column_stack([xy, np.full(k, z)]), np.tile([1.0, 0, 0, 0], (k, 1)),
                    np.full((k, 2), size / n), np.full(k, 4.0), np.full((k, 3), 0.6), np.full(k, 0.9), np.zeros(k))


def test_align_identity(asset):
    assert align_box(asset, asset.canonical_box).almost_equal(RigidSim3.identity(), 1e-9)


def test_align_scaled(asset):
    b = asset.canonical_box
    tf = align_box(asset, OrientedBox3(b.center * 2, b.half_extents * 2))
    assert tf.scale == pytest.approx(2.0)
    assert np.allclose(tf.translation, 0, atol=1e-12)


def test_align_rotated_quarter_turn(asset):
    b = asset.canonical_box
    q = axis_angle_quat([0, 0, 1], np.pi / 2)
    tf = align_box(asset, OrientedBox3(b.center, b.half_extents, q))
    assert np.allclose(tf.rotation, [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)], atol=1e-6)
    assert np.allclose(tf.apply(b.center), b.center)


def test_align_geometric_mean_scale(asset):
    b = asset.canonical_box
    target = OrientedBox3([5, 2, 0.5], b.half_extents * [1.0, 2.0, 4.0])
    assert align_box(asset, target).scale == pytest.approx(2.0)


def test_align_degenerate(asset):
    bad = CarAsset(asset.splats, OrientedBox3.__new__(OrientedBox3), 0.0)
    object.__setattr__(bad.canonical_box, "center", np.zeros(3))
    object.__setattr__(bad.canonical_box, "half_extents", np.array([1.0, 0.0, 1.0]))
    object.__setattr__(bad.canonical_box, "rotation", np.array([1.0, 0, 0, 0]))
    with pytest.raises(ValueError):
        align_box(bad, asset.canonical_box)


def test_icp_identity(asset):
    pts = asset.splats.mu
    est = icp_refine(PointCloud(pts), PointCloud(pts), RigidSim3.identity())
    assert est.almost_equal(RigidSim3.identity(), 1e-6)


def test_icp_single_point_translation_only():
    res = icp_refine(PointCloud(np.array([[0.0, 0, 0]])), PointCloud(np.array([[1.0, 2, 3]])),
                     RigidSim3(scale=1.5), return_info=True)
    assert np.allclose(res.transform.translation, [1, 2, 3])
    assert res.transform.scale == 1.5 and res.converged


def test_icp_recovers_similarity():
    pts = car_splats(800, 0).mu
    pts = pts - pts.mean(0)
    rad = np.sqrt((pts**2).sum(1).mean())
    for seed in range(5):
        rng = np.random.default_rng(seed)
        axis = rng.normal(size=3)
        d = rng.normal(size=3)
        true = RigidSim3(axis_angle_quat(axis, np.radians(10)), 0.3 * d / np.linalg.norm(d), 1.1)
        lidar = true.apply(pts) + rng.normal(0, 0.01 * rad, pts.shape)
        init = RigidSim3(translation=lidar.mean(0), scale=1.0)
        est = icp_refine(PointCloud(pts), PointCloud(lidar), init)
        assert np.degrees(rotation_angle(quat_mul(est.rotation, quat_conj(true.rotation)))) < 0.5
        assert np.linalg.norm(est.translation - true.translation) < 0.02
        assert abs(est.scale / true.scale - 1) < 0.01


def test_icp_rms_never_increases(rng):
    pts = rng.normal(size=(300, 3)) * [2, 1, 0.5]
    lidar = random_transform(rng, 0.3, (0.9, 1.1)).apply(pts) + rng.normal(0, 0.05, pts.shape)
    prev = np.inf
    for iters in range(1, 12):
        res = icp_refine(PointCloud(pts), PointCloud(lidar), RigidSim3.identity(), max_iters=iters,
                         return_info=True)
        assert res.rms <= prev + 1e-12
        prev = res.rms


def test_icp_nonconvergence_flag(rng, caplog):
    pts = rng.normal(size=(200, 3))
    lidar = random_transform(rng, 0.5).apply(pts)
    res = icp_refine(PointCloud(pts), PointCloud(lidar), RigidSim3.identity(), max_iters=1, tol=0.0,
                     return_info=True)
    assert not res.converged and res.iterations == 1
    with pytest.raises(ValueError):
        icp_refine(PointCloud(np.zeros((0, 3))), PointCloud(pts), RigidSim3.identity())


def test_env_scale_examples(rng):
    r = rng.random((8, 8, 3))
    assert fit_env_scale(r, 2 * r) == 2.0
    assert fit_env_scale(r, r) == 1.0
    with pytest.raises(ValueError):
        fit_env_scale(np.zeros((4, 4, 3)), r[:4, :4])
    mask = np.zeros((8, 8))
    with pytest.raises(ValueError):
        fit_env_scale(r, r, mask)


def test_env_scale_matches_grid_search(rng):
    for _ in range(5):
        r, ref = rng.random((10, 10, 3)), rng.random((10, 10, 3)) * rng.uniform(0.1, 10)
        mask = rng.random((10, 10)) > 0.3
        grid = np.exp(np.linspace(np.log(0.01), np.log(100), 200_001))
        w = mask[..., None]
        # expand the quadratic so the whole grid is scored at once
        a, b, c = np.sum(w * r * r), np.sum(w * r * ref), np.sum(w * ref * ref)
        best = grid[np.argmin(a * grid**2 - 2 * b * grid + c)]
        assert fit_env_scale(r, ref, mask) == pytest.approx(best, rel=1e-3)


def test_shadow_geometry(asset):
    place = RigidSim3(axis_angle_quat([0, 0, 1], 0.7), [3.0, -2.0, 0.1], 1.3)
    sh = make_shadow(asset, place, 0.6, 0.1)
    assert len(sh) > 0
    wheel = place.apply([0, 0, asset.wheel_line_z])[2]
    assert np.all(sh.mu[:, 2] <= wheel + 1e-9)
    assert np.allclose(sh.normals, [0, 0, 1], atol=1e-9)
    assert np.all(sh.albedo == 0) and np.all(sh.roughness == 1) and np.all(sh.metallic == 0)
    assert np.allclose(sh.alpha, 0.6)
    centroid = place.apply(asset.canonical_box.center)
    assert np.allclose(sh.mu[:, :2].mean(0), centroid[:2], atol=0.05)
    # covers the footprint grown by the margin
    corners = place.inverse().apply(sh.mu)[:, :2] - asset.canonical_box.center[:2]
    half = asset.canonical_box.half_extents[:2] + 0.1 / 1.3
    assert np.all(np.abs(corners).max(0) >= half * 0.9)


def test_shadow_opacity_zero_invisible(asset):
    ground = ground_plane()
    cam = Camera.look_at([6, 3, 4], [0, 0, 0], 32, 32)
    pre = prefilter(EnvironmentMap.constant(1.0, 8), 6, 64)
    base = render(ground, cam, pre)
    with_shadow = render(SplatSet.concat([ground, make_shadow(asset, RigidSim3(), opacity=0.0)]), cam, pre)
    assert np.array_equal(base.rgb, with_shadow.rgb)


def test_shadow_darkens_by_opacity():
    from carsplat.raster import WEIGHT_CUTOFF, ray_splat_intersect
    flat = CarAsset(ground_plane(1.0, 3), OrientedBox3([0, 0, 0.5], [0.3, 0.3, 0.5]), 0.05)
    sh = make_shadow(flat, RigidSim3(), 0.6, 0.0)
    cam = Camera(40, 40, 16, 16, 32, 32, RigidSim3(axis_angle_quat([1, 0, 0], np.pi), [0, 0, 5.0]))
    pre = prefilter(EnvironmentMap.constant(1.0, 8), 6, 64)
    ground = ground_plane(8.0, 40)
    base = render(ground, cam, pre).rgb
    both = render(SplatSet.concat([ground, sh]), cam, pre).rgb
    # hand compositing: black shadow splats in front scale the ground by prod(1 - opacity * w)
    rays = cam.pixel_rays()
    expected = np.ones((32, 32))
    for i in range(32):
        for j in range(32):
            for k in range(len(sh)):
                hit = ray_splat_intersect(sh[k], cam.center, rays[i, j])
                if hit is not None:
                    w = max(0.0, (hit[3] - WEIGHT_CUTOFF) / (1 - WEIGHT_CUTOFF))
                    expected[i, j] *= 1 - 0.6 * w
    alone = render(sh, cam, pre)
    assert np.allclose(1 - alone.acc_opacity, expected, atol=1e-12)
    # the ground is dimmed by the shadow's transmittance; the shadow adds only its
    # weak dielectric specular (F0 = 0.04), since its albedo is zero
    assert np.allclose(both, alone.rgb + base * expected[..., None], atol=1e-9)
    assert alone.rgb.max() < 0.05 and expected.min() < 0.5


def _scene(asset, placements, background=None):
    shadow = make_shadow(asset)
    pa = PlacedAsset(asset, placements, shadow)
    return SceneGraph(background if background is not None else ground_plane(),
                      [pa], EnvironmentMap.constant([0.9, 0.8, 0.7], 8), 1.0)


def test_compose_zero_assets():
    bg = ground_plane()
    cam = Camera.look_at([6, 3, 4], [0, 0, 0], 24, 24)
    scene = SceneGraph(bg, [], EnvironmentMap.constant(1.0, 8), 1.5)
    assert np.array_equal(compose(scene, 0, cam).rgb, render(bg, cam, scene.prefiltered(), env_scale=1.5).rgb)


def test_compose_identity_placement(asset):
    scene = _scene(asset, {0: RigidSim3()})
    cam = Camera.look_at([6, 3, 4], [0, 0, 0.5], 24, 24)
    direct = SplatSet.concat([scene.background, asset.splats, scene.assets[0].shadow])
    assert np.allclose(compose(scene, 0, cam).rgb, render(direct, cam, scene.prefiltered()).rgb, atol=1e-12)


def test_compose_out_of_frustum(asset):
    cam = Camera.look_at([6, 3, 4], [0, 0, 0], 24, 24)
    scene = _scene(asset, {0: RigidSim3(translation=[-200.0, 0, 0])})
    bg_only = render(scene.background, cam, scene.prefiltered())
    assert np.allclose(compose(scene, 0, cam).rgb, bg_only.rgb, atol=1e-6)


def test_compose_missing_frame(asset):
    scene = _scene(asset, {0: RigidSim3()})
    with pytest.raises(MissingTrackFrameError):
        compose(scene, 5, Camera.look_at([6, 3, 4], [0, 0, 0], 8, 8))


def test_compose_equivariant(asset):
    cam = Camera.look_at([6, 3, 4], [0, 0, 0.5], 24, 24)
    place = RigidSim3(axis_angle_quat([0, 0, 1], 0.4), [0.5, 0.2, 0.0], 0.9)
    g = RigidSim3(axis_angle_quat([0, 0, 1], 1.2), [3.0, -1.0, 0.0])  # about z keeps the env lighting
    a = _scene(asset, {0: place})
    b = _scene(asset, {0: tf_compose(g, place)}, ground_plane().transformed(g))
    ra = compose(a, 0, cam).rgb
    rb = compose(b, 0, cam.transformed(g)).rgb
    assert np.allclose(ra, rb, atol=1e-5)


def test_place_asset_follows_track(asset):
    b = asset.canonical_box
    track = [OrientedBox3(b.center + [t, 0, 0], b.half_extents * 1.2, track_id=1, timestamp=t) for t in range(3)]
    pa = place_asset(asset, track)
    assert sorted(pa.placements) == [0, 1, 2]
    assert pa.at(2).scale == pytest.approx(1.2)
    with pytest.raises(MissingTrackFrameError):
        pa.at(3)


def test_scene_manifest_round_trip(tmp_path, asset):
    save_asset(tmp_path / "car.rasset", asset)
    save_splats(tmp_path / "bg.rspl", ground_plane())
    write_pfm(tmp_path / "env.pfm", EnvironmentMap.constant(0.5, 8).pixels)
    cam = Camera.look_at([6, 3, 4], [0, 0, 0], 16, 16, id="c0")
    b = asset.canonical_box
    tracks = {4: [OrientedBox3(b.center, b.half_extents, track_id=4, timestamp=t) for t in range(2)]}
    (tmp_path / "tracks.json").write_text(json.dumps(dump_cameras_and_tracks([cam], tracks)))
    override = RigidSim3(translation=[0.1, 0, 0])
    save_scene_manifest(tmp_path / "scene.json", "bg.rspl",
                        [{"path": "car.rasset", "track_id": 4, "placements": {"1": override.to_dict()}}],
                        "tracks.json", "env.pfm", 1.7)
    scene = load_scene_manifest(tmp_path / "scene.json")
    assert scene.env_scale == 1.7 and "c0" in scene.cameras
    assert scene.assets[0].at(0).almost_equal(RigidSim3.identity(), 1e-6)
    assert scene.assets[0].at(1).almost_equal(override)
    save_scene_manifest(tmp_path / "bad.json", "bg.rspl", [{"path": "car.rasset", "track_id": 9}],
                        "tracks.json", "env.pfm", 1.0)
    with pytest.raises(MissingTrackFrameError):
        load_scene_manifest(tmp_path / "bad.json")
    with pytest.raises(ValueError):
        SceneGraph(SplatSet.empty(), env_scale=0.0)
