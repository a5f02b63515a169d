import numpy as np
import pytest

from carsplat.geom import Camera, RigidSim3, axis_angle_quat
from carsplat.raster import (CUTOFF_RADIUS, SceneMismatchError, Splat2D, SplatSet, backward, load_splats,
                             ray_splat_intersect, read_rspl, render, save_splats)
from carsplat.shading import EnvironmentMap, Material, prefilter

from conftest import small_scene, smooth_env
from gradcheck import compare, random_upstream

CAM = Camera(20, 20, 8, 8, 16, 16)


def one_splat(z=3.0, logit=0.0, albedo=(0.4, 0.5, 0.6), scale=1.0, quat=(1, 0, 0, 0), xy=(0.0, 0.0)):
    return SplatSet([[xy[0], xy[1], z]], [quat], [[scale, scale]], [logit], [albedo], [0.5], [0.0])


def test_intersect_center_hit():
    s = Splat2D(np.array([0.0, 0.0, 2.0]), np.array([1.0, 0, 0, 0]), 0.5, 0.5, 0.0, Material([0.5] * 3, 0.5, 0))
    u, v, t, w = ray_splat_intersect(s, [0, 0, 0], [0, 0, 1])
    assert (u, v, t, w) == (0.0, 0.0, 2.0, 1.0)


def test_intersect_parallel_and_behind():
    s = Splat2D(np.array([0.0, 0.0, 2.0]), np.array([1.0, 0, 0, 0]), 0.5, 0.5, 0.0, Material([0.5] * 3, 0.5, 0))
    assert ray_splat_intersect(s, [0, 0, 0], [1, 0, 0]) is None
    assert ray_splat_intersect(s, [0, 0, 0], [0, 0, -1]) is None


def test_intersect_one_sigma_offset():
    q = axis_angle_quat([0, 0, 1], 0.7)
    s = Splat2D(np.array([1.0, -2.0, 2.0]), q, 0.3, 0.8, 0.0, Material([0.5] * 3, 0.5, 0))
    tangent = s.axes[:, 0]
    u, v, t, w = ray_splat_intersect(s, s.mu + 0.3 * tangent - [0, 0, 2.0], [0, 0, 1])
    assert np.isclose(u, 1.0) and np.isclose(v, 0.0, atol=1e-12)
    assert np.isclose(w, np.exp(-0.5))


def test_empty_scene_black():
    fb = render(SplatSet.empty(), CAM, None)
    assert not fb.rgb.any() and not fb.acc_opacity.any()


def test_env_lookup_background_is_nearest_texel(rng):
    env = smooth_env(rng, 16)
    cam = Camera.look_at([0, 0, 0], [1, 0.3, 0.2], 16, 12)
    fb = render(SplatSet.empty(), cam, prefilter(env, 4, 16), background="env_lookup")
    assert np.array_equal(fb.rgb, env.lookup_nearest(cam.pixel_rays()))


def test_single_splat_zero_env():
    pre = prefilter(EnvironmentMap.constant(0.0, 8), 4, 16)
    # a splat centered on a pixel center; alpha = sigmoid(1)
    cam = Camera(20, 20, 8.5, 8.5, 17, 17)
    fb = render(one_splat(logit=1.0), cam, pre)
    assert not fb.rgb.any()
    assert fb.acc_opacity[8, 8] == pytest.approx(1 / (1 + np.exp(-1.0)), abs=1e-12)
    assert fb.depth[8, 8] == pytest.approx(3.0)
    assert np.allclose(fb.normal[8, 8], [0, 0, -fb.acc_opacity[8, 8]])


def test_two_stacked_splats_compose():
    cam = Camera(20, 20, 8.5, 8.5, 17, 17)
    s = SplatSet.concat([one_splat(z=3.0, logit=0.3), one_splat(z=4.0, logit=-0.5)])
    a1, a2 = 1 / (1 + np.exp(-0.3)), 1 / (1 + np.exp(0.5))
    fb = render(s, cam, None)
    assert fb.acc_opacity[8, 8] == pytest.approx(1 - (1 - a1) * (1 - a2), abs=1e-12)
    # without an environment the splat albedo is composited directly
    c = np.array([0.4, 0.5, 0.6])
    assert np.allclose(fb.rgb[8, 8], (a1 + (1 - a1) * a2) * c)


def test_non_finite_rejected():
    s = one_splat()
    s.mu[0, 0] = np.nan
    with pytest.raises(ValueError):
        render(s, CAM, None)


def test_permutation_invariance(rng):
    splats, cam = small_scene(rng, 8, 24)
    pre = prefilter(smooth_env(rng, 16), 4, 16)
    a = render(splats, cam, pre)
    b = render(splats.subset(rng.permutation(len(splats))), cam, pre)
    for k in ("rgb", "acc_opacity", "normal", "depth"):
        assert np.allclose(getattr(a, k), getattr(b, k), atol=1e-6)


def test_acc_opacity_monotone(rng):
    splats, cam = small_scene(rng, 10, 24)
    prev = np.zeros((24, 24))
    for k in range(1, len(splats) + 1):
        acc = render(splats.subset(slice(0, k)), cam, None).acc_opacity
        assert np.all(acc >= prev - 1e-12)  # log-space sums may round differently
        assert acc.min() >= 0 and acc.max() <= 1
        prev = acc


def test_normals_bounded_and_buffers_finite(rng):
    splats, cam = small_scene(rng, 10, 24)
    fb = render(splats, cam, prefilter(smooth_env(rng, 16), 4, 16))
    assert np.all(np.linalg.norm(fb.normal, axis=-1) <= 1 + 1e-12)
    assert all(np.isfinite(getattr(fb, k)).all() for k in ("rgb", "normal", "depth"))


def test_tile_size_does_not_change_output(rng):
    splats, cam = small_scene(rng, 8, 30)
    pre = prefilter(smooth_env(rng, 16), 4, 16)
    a, b = render(splats, cam, pre, tile=7), render(splats, cam, pre, tile=32)
    assert np.allclose(a.rgb, b.rgb, atol=1e-14)


def test_splat_beyond_cutoff_invisible():
    # center far outside the frustum, footprint smaller than the cutoff radius from the image
    s = one_splat(z=3.0, scale=0.05, xy=(3.0 + CUTOFF_RADIUS * 0.05 * 1.01, 0.0))
    assert not render(s, CAM, None).acc_opacity.any()


def test_render_deterministic(rng):
    splats, cam = small_scene(rng, 10, 24)
    pre = prefilter(smooth_env(rng, 16), 4, 16)
    a, b = render(splats, cam, pre), render(splats, cam, pre)
    assert a.rgb.tobytes() == b.rgb.tobytes() and a.fingerprint == b.fingerprint


def test_backward_zero_upstream(rng):
    splats, cam = small_scene(rng, 4, 16)
    up = {k: np.zeros_like(v) for k, v in random_upstream(rng, cam).items()}
    g = backward(splats, cam, prefilter(smooth_env(rng, 16), 4, 16), up)
    for k in ("mu", "rot", "sx", "sy", "opacity_logit", "albedo", "roughness", "metallic"):
        assert not np.any(getattr(g, k))


def test_backward_uncovered_splat_has_zero_gradient(rng):
    splats, cam = small_scene(rng, 3, 16)
    hidden = one_splat(z=-5.0)
    both = SplatSet.concat([splats, hidden])
    g = backward(both, cam, prefilter(smooth_env(rng, 16), 4, 16), random_upstream(rng, cam))
    assert not g.mu[-1].any() and g.opacity_logit[-1] == 0 and not g.albedo[-1].any()


def test_backward_single_splat_albedo_mean_rgb():
    cam = Camera(20, 20, 8, 8, 16, 16)
    s = one_splat()
    pre = prefilter(EnvironmentMap.constant(0.7, 8), 4, 16)
    up = {"rgb": np.full((16, 16, 3), 1.0 / (16 * 16 * 3))}
    g = backward(s, cam, pre, up)
    h = 1e-5
    for c in range(3):
        p, m = s.copy(), s.copy()
        p.albedo[0, c] += h
        m.albedo[0, c] -= h
        fd = (render(p, cam, pre).rgb.mean() - render(m, cam, pre).rgb.mean()) / (2 * h)
        assert g.albedo[0, c] == pytest.approx(fd, rel=1e-6)


def test_backward_detects_changed_scene(rng):
    splats, cam = small_scene(rng, 3, 16)
    pre = prefilter(smooth_env(rng, 16), 4, 16)
    fb = render(splats, cam, pre)
    up = random_upstream(rng, cam)
    backward(splats, cam, pre, up, forward=fb)  # same scene is fine
    moved = splats.copy()
    moved.mu[0, 0] += 1e-3
    with pytest.raises(SceneMismatchError):
        backward(moved, cam, pre, up, forward=fb)


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    splats, cam = small_scene(rng, int(rng.integers(1, 6)), 16)
    pre = prefilter(smooth_env(rng, 16), 4, 16)
    up = random_upstream(rng, cam, render(splats, cam, pre).acc_opacity > 0.05)
    assert compare(splats, cam, pre, up, env_scale=1.3) < 1e-2


def test_rspl_round_trip(tmp_path, rng):
    splats, _ = small_scene(rng, 7)
    path = tmp_path / "s.rspl"
    save_splats(path, splats)
    data = path.read_bytes()
    assert data[:4] == b"RSPL" and len(data) == 16 + 7 * 15 * 4
    back = load_splats(path)
    assert np.array_equal(back.to_rows(), splats.to_rows())
    assert back.to_bytes() == data
    assert SplatSet.from_bytes(SplatSet.empty().to_bytes()).__len__() == 0


def test_rspl_corrupt(rng):
    splats, _ = small_scene(rng, 3)
    data = splats.to_bytes()
    with pytest.raises(ValueError):
        SplatSet.from_bytes(data[:-1])
    with pytest.raises(ValueError):
        SplatSet.from_bytes(b"XSPL" + data[4:])
    with pytest.raises(ValueError):
        SplatSet.from_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(ValueError):
        SplatSet.from_bytes(data + b"\0")
    s, end = read_rspl(data + b"tail")
    assert end == len(data) and len(s) == 3


def test_transformed_matches_camera_motion(rng):
    splats, cam = small_scene(rng, 6, 20)
    tf = RigidSim3(axis_angle_quat([0.2, 1, 0.1], 0.4), [0.3, -0.2, 1.0])
    a = render(splats, cam, None)
    b = render(splats.transformed(tf), cam.transformed(tf), None)
    assert np.allclose(a.acc_opacity, b.acc_opacity, atol=1e-9)
    assert np.allclose(a.depth, b.depth, atol=1e-9)
