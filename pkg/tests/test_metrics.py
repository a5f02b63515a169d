import numpy as np
import pytest
import scipy.linalg

from carsplat.metrics import (
    REPORT_KEYS, Detection, DetectionSet, FeatureStats, MetricError, box_iou, color_distances,
    detection_iou, fid, idf1, kid, mask_iou, match_frames, mean_instance_iou, mota, motp,
    motp_center, report, rgb_to_cielab, sliced_wasserstein, wasserstein_1d,
)


def track(boxes_per_frame):
    """``{frame: {id: box}}`` -> DetectionSet."""
    return DetectionSet({f: [Detection(i, b) for i, b in dets.items()]
                         for f, dets in boxes_per_frame.items()})


def two_objects(frames=10):
    return {f: {1: (10 + f, 10, 20, 20), 2: (100 + f, 60, 20, 20)} for f in range(frames)}


# --- matching -------------------------------------------------------------------

def test_identical_sets_match_perfectly():
    gt = track(two_objects())
    res = match_frames(gt, gt)
    assert (res.misses, res.false_positives, res.switches) == (0, 0, 0)
    assert len(res.matches) == 20
    assert all(m.gt_id == m.pred_id for m in res.matches)
    assert mota(res) == 1.0
    assert motp(res) == 0.0
    assert motp_center(res) == 0.0
    assert idf1(gt, gt) == 1.0


def test_misses_and_false_positive_hand_count():
    gt = track({f: {1: (10, 10, 20, 20)} for f in range(10)})
    pred_frames = {f: {7: (11, 10, 20, 20)} for f in range(10) if f not in (3, 6)}
    pred_frames[8] = {7: (11, 10, 20, 20), 8: (200, 200, 10, 10)}
    res = match_frames(gt, track(pred_frames))
    assert (res.misses, res.false_positives, res.switches) == (2, 1, 0)
    assert mota(res) == pytest.approx(0.7, abs=1e-12)


def test_swapped_ids_count_two_switches():
    frames = two_objects()
    pred = {f: ({10: b[1], 20: b[2]} if f < 5 else {20: b[1], 10: b[2]}) for f, b in frames.items()}
    res = match_frames(track(frames), track(pred))
    assert res.switches == 2
    assert res.misses == res.false_positives == 0
    assert idf1(track(frames), track(pred)) == pytest.approx(0.5)


def test_motp_at_threshold():
    # (0,0,10,10) vs (0,0,10,5) overlap 50 over union 100
    gt = track({f: {1: (0, 0, 10, 10)} for f in range(4)})
    pred = track({f: {1: (0, 0, 10, 5)} for f in range(4)})
    res = match_frames(gt, pred, 0.5)
    assert len(res.matches) == 4
    assert motp(res) == pytest.approx(0.5, abs=1e-12)


def test_carry_over_keeps_previous_pairing():
    # frame 1: gt 1 overlaps pred 10 at 0.6 (carried) and pred 20 at 0.9
    gt = track({0: {1: (0, 0, 10, 10)}, 1: {1: (0, 0, 10, 10)}})
    pred = track({0: {10: (0, 0, 10, 10)}, 1: {10: (0, 0, 10, 6), 20: (0, 0, 10, 9)}})
    res = match_frames(gt, pred)
    assert [m.pred_id for m in res.matches] == [10, 10]
    assert res.switches == 0 and res.false_positives == 1


def test_tiny_threshold_gives_identity():
    rng = np.random.default_rng(0)
    frames = {f: {i: tuple(rng.uniform(0, 100, 2)) + (15.0, 15.0) for i in range(5)} for f in range(3)}
    res = match_frames(track(frames), track(frames), 1e-9)
    assert all(m.gt_id == m.pred_id for m in res.matches)


def test_threshold_validation_and_mota_error():
    gt = track(two_objects(2))
    for t in (0.0, 1.0, -0.1):
        with pytest.raises(MetricError):
            match_frames(gt, gt, t)
    with pytest.raises(MetricError):
        mota(match_frames(DetectionSet(), gt))


def test_duplicate_ids_rejected():
    with pytest.raises(MetricError):
        DetectionSet({0: [Detection(1, (0, 0, 1, 1)), Detection(1, (5, 5, 1, 1))]})


def test_bounds_and_permutation_invariance():
    rng = np.random.default_rng(3)
    gt_frames = {f: {i: (20 * i + f, 5.0, 12.0, 12.0) for i in range(6)} for f in range(8)}
    pred_frames = {}
    for f, dets in gt_frames.items():
        keep = {i + 100 * (f > 4 and i == 2): (b[0] + rng.normal(0, 2), b[1], b[2], b[3])
                for i, b in dets.items() if rng.uniform() > 0.2}
        keep[50] = (500.0, 500.0, 5.0, 5.0)
        pred_frames[f] = keep
    gt, pred = track(gt_frames), track(pred_frames)
    res = match_frames(gt, pred)
    base = (mota(res), motp(res), idf1(gt, pred))
    assert base[0] <= 1 and 0 <= base[1] <= 1 and 0 <= base[2] <= 1

    shuffled_gt = DetectionSet({f: [gt[f][k] for k in rng.permutation(len(gt[f]))] for f in gt})
    shuffled_pred = DetectionSet({f: [pred[f][k] for k in rng.permutation(len(pred[f]))]
                                  for f in reversed(sorted(pred))})
    res2 = match_frames(shuffled_gt, shuffled_pred)
    assert (mota(res2), motp(res2), idf1(shuffled_gt, shuffled_pred)) == pytest.approx(base, abs=1e-12)


def test_jsonl_round_trip(tmp_path):
    gt = track(two_objects(3))
    gt.to_jsonl(tmp_path / "d.jsonl")
    back = DetectionSet.from_jsonl(tmp_path / "d.jsonl")
    assert sorted(back) == sorted(gt)
    for f in gt:
        for a, b in zip(sorted(gt[f], key=lambda d: d.id), sorted(back[f], key=lambda d: d.id)):
            assert a.id == b.id and np.array_equal(a.bbox, b.bbox)


# --- IoU --------------------------------------------------------------------------

def rect_mask(x0, y0, x1, y1, shape=(40, 40)):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_mask_iou_examples():
    a = rect_mask(0, 0, 20, 10)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, rect_mask(25, 25, 30, 30)) == 0.0
    assert mask_iou(a, rect_mask(10, 0, 30, 10)) == pytest.approx(1 / 3)
    assert mask_iou(a, np.zeros_like(a)) == 0.0
    assert mask_iou(np.zeros_like(a), np.zeros_like(a)) is None
    with pytest.raises(MetricError):
        mask_iou(a, np.zeros((10, 10), bool))


def test_box_iou_examples():
    assert box_iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert box_iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0
    assert box_iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3)


def test_mixed_detection_kinds():
    with pytest.raises(MetricError):
        detection_iou(Detection(1, mask=rect_mask(0, 0, 5, 5)), Detection(1, (0, 0, 5, 5)))


def test_mean_instance_iou_skips_double_empty():
    gt = DetectionSet({0: [Detection(1, (0, 0, 20, 10), rect_mask(0, 0, 20, 10))],
                       1: [Detection(1, (0, 0, 20, 10), rect_mask(0, 0, 20, 10))]})
    pred = DetectionSet({0: [Detection(1, (0, 0, 20, 10), rect_mask(10, 0, 30, 10))],
                         1: [Detection(1, (0, 0, 20, 10), rect_mask(0, 0, 20, 10))]})
    res = match_frames(gt, pred, 0.2)
    assert mean_instance_iou(res, gt, pred) == pytest.approx((1 / 3 + 1) / 2)


def test_mask_directory(tmp_path):
    from carsplat.imageio import write_mask
    write_mask(tmp_path / "0_3.png", rect_mask(0, 0, 10, 10))
    write_mask(tmp_path / "1_3.png", rect_mask(2, 0, 12, 10))
    ds = DetectionSet.from_mask_dir(tmp_path)
    assert sorted(ds) == [0, 1] and ds[1][0].id == 3
    assert np.array_equal(ds[0][0].mask, rect_mask(0, 0, 10, 10))


# --- color ------------------------------------------------------------------------

def test_cielab_examples():
    np.testing.assert_allclose(rgb_to_cielab([1.0, 1.0, 1.0]), [100, 0, 0], atol=0.05)
    np.testing.assert_allclose(rgb_to_cielab([0.0, 0.0, 0.0]), [0, 0, 0], atol=1e-12)
    assert rgb_to_cielab([0.18] * 3)[0] == pytest.approx(49.5, abs=0.5)


def test_cielab_linear_segment_is_continuous():
    t = (6 / 29) ** 3
    lo, hi = rgb_to_cielab([t * (1 - 1e-9)] * 3), rgb_to_cielab([t * (1 + 1e-9)] * 3)
    np.testing.assert_allclose(lo, hi, atol=1e-6)


def test_wasserstein_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(300, 3))
    assert sliced_wasserstein(a, a) == 0.0
    x = rng.normal(size=500)
    assert sliced_wasserstein(x, x + 0.37) == pytest.approx(0.37, abs=1e-12)
    assert wasserstein_1d(x, x - 2.0) == pytest.approx(2.0, abs=1e-12)
    for bad in (np.zeros((0, 3)),):
        with pytest.raises(MetricError):
            sliced_wasserstein(bad, a)
    with pytest.raises(MetricError):
        sliced_wasserstein(a, a, n_proj=0)


def test_sliced_wasserstein_against_dense_projections():
    rng = np.random.default_rng(1)
    for _ in range(3):
        a = rng.normal(size=(400, 3))
        b = rng.normal(size=(350, 3)) * [1.0, 1.5, 0.7] + rng.normal(size=3)
        dense = sliced_wasserstein(a, b, n_proj=10_000, seed=99)
        assert sliced_wasserstein(a, b) == pytest.approx(dense, rel=0.02)


def test_sliced_wasserstein_triangle_inequality():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b, c = (rng.normal(size=(200, 3)) + rng.normal(size=3) for _ in range(3))
        ab, bc, ac = sliced_wasserstein(a, b), sliced_wasserstein(b, c), sliced_wasserstein(a, c)
        assert ac <= 1.05 * (ab + bc)


def test_sliced_wasserstein_permutation_invariant():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(80, 3))
    assert sliced_wasserstein(a[rng.permutation(100)], b[rng.permutation(80)]) == \
        pytest.approx(sliced_wasserstein(a, b), abs=1e-12)


def test_color_distances_keys():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(20, 20, 3)), rng.uniform(size=(30, 3))
    d = color_distances(a, b)
    assert set(d) == {"W1", "W1_L", "W1_ab"} and all(v >= 0 for v in d.values())
    assert color_distances(a, a)["W1"] == 0.0


# --- features ---------------------------------------------------------------------

def test_fid_examples():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(200, 8))
    s = FeatureStats.from_features(f)
    assert fid(s, s) == pytest.approx(0.0, abs=1e-9)
    delta = rng.normal(size=8)
    shifted = FeatureStats(s.mean + delta, s.covariance, s.n)
    assert fid(s, shifted) == pytest.approx(delta @ delta, rel=1e-9)


def test_fid_against_dense_sqrtm():
    rng = np.random.default_rng(7)
    for _ in range(3):
        a = FeatureStats.from_features(rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6)))
        b = FeatureStats.from_features(rng.normal(size=(250, 6)) @ rng.normal(size=(6, 6)) + 1)
        root = scipy.linalg.sqrtm(a.covariance @ b.covariance).real
        d = a.mean - b.mean
        oracle = d @ d + np.trace(a.covariance + b.covariance - 2 * root)
        assert fid(a, b) == pytest.approx(oracle, rel=1e-6, abs=1e-6)
        assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-6)


def test_fid_rejects_non_psd():
    s = FeatureStats(np.zeros(2), np.eye(2), 10)
    bad = FeatureStats(np.zeros(2), np.diag([1.0, -0.5]), 10)
    with pytest.raises(MetricError):
        fid(s, bad)
    with pytest.raises(MetricError):
        FeatureStats(np.zeros(2), [[1, 0.5], [0, 1]], 10)
    with pytest.raises(MetricError):
        FeatureStats(np.zeros(2), np.eye(2), 1)


def test_kid_same_distribution_near_zero():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(400, 16)), rng.normal(size=(400, 16))
    assert abs(kid(x, y)) < 0.02
    assert kid(x, y + 1.0) > 10 * abs(kid(x, y))
    assert kid(x, y) == pytest.approx(kid(x[rng.permutation(400)], y), abs=1e-12)


def test_report_keys():
    r = report({"MOTA": 0.5, "FID": 3})
    assert tuple(r) == REPORT_KEYS
    assert r["MOTA"] == 0.5 and r["IoU"] is None
    with pytest.raises(MetricError):
        report({"mota": 1})
