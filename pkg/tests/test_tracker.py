import itertools
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rgbde.errors import Degenerate, EmptyCrop, LengthMismatch, UnsupportedRate
from rgbde.evsim.events import EventStream
from rgbde.evsim.mesh import make_blob_mesh
from rgbde.geom import (PoseDelta, RigidTransform, apply_delta, delta_transform, rotation_error,
                        rotvec_to_matrix, sample_rotation, sample_sphere_direction, translation_error)
from rgbde.tracker.cascade import (BlurredFrameOracle, EventQuery, OraclePredictor, ZeroPredictor, event_step,
                                   frame_refine, track_sequence)
from rgbde.tracker.evaluate import (binned_errors, count_failures, frame_motion, make_report, per_frame_errors,
                                    sequence_report)
from rgbde.tracker.icp import ICPConfig, crop_depth_points, icp_annotate, icp_register, rigid_align
from rgbde.tracker.sequence import (downsample_sequence, load_sequence, make_synthetic_sequence, save_sequence,
                                    tracking_rig)


class ConstantPredictor:
    needs_tensor = False

    def __init__(self, t, R):
        self.t, self.R = np.asarray(t, dtype=float), np.asarray(R, dtype=float)

    def __call__(self, *args):
        return self.t, self.R


def random_transform(rng, scale=0.1):
    return RigidTransform(sample_rotation(rng), rng.normal(scale=scale, size=3))


def oracle_sequence(seed, n=20, rig=None, **kw):
    rng = np.random.default_rng(seed)
    mesh = make_blob_mesh(np.random.default_rng(seed + 100), n_lat=8, n_lon=16)
    return make_synthetic_sequence(rng, n, mesh=mesh, rig=rig, render_frames=False, with_events=False, **kw)


def errors_between(a, b):
    return translation_error(a.translation, b.translation), rotation_error(a.rotation, b.rotation)


# ---------------------------------------------------------------------------
# cascade


def test_event_step_identity_and_true_delta():
    rng = np.random.default_rng(0)
    com = np.array([0.01, -0.02, 0.0])
    prev = RigidTransform(sample_rotation(rng), [0.02, 0.01, 0.6])
    truth = apply_delta(PoseDelta([1, 0, 0], 0.02, [0, 1, 0], 0.3), prev, com)
    ev = EventStream.empty(346, 260)
    I = RigidTransform.identity()
    K = tracking_rig().event
    assert event_step(prev, ev, 0, I, K, ZeroPredictor(), com).allclose(prev, 1e-15)
    oracle = OraclePredictor([prev, truth])
    out = event_step(prev, ev, 0, I, K, oracle, com, frame_index=1)
    assert out.allclose(truth, 1e-12)


def test_event_step_matches_hand_composed_chain():
    rng = np.random.default_rng(1)
    com = np.array([0.0, 0.01, 0.02])
    T = random_transform(rng)
    prev = RigidTransform(sample_rotation(rng), [0.0, 0.0, 0.6])
    t = np.array([0.01, -0.005, 0.02])
    R = rotvec_to_matrix([0.1, -0.2, 0.05])
    out = event_step(prev, EventStream.empty(346, 260), 0, T, tracking_rig().event, ConstantPredictor(t, R), com)
    # delta about the center of mass as seen in the event camera, written out as a 4x4 matrix
    c = (T.matrix @ prev.matrix @ np.append(com, 1.0))[:3]
    D = np.eye(4)
    D[:3, :3] = R
    D[:3, 3] = c - R @ c + t
    expected = np.linalg.inv(T.matrix) @ D @ T.matrix @ prev.matrix
    np.testing.assert_allclose(out.matrix, expected, atol=1e-12)


def test_event_step_oracle_with_extrinsics():
    rng = np.random.default_rng(2)
    com = np.zeros(3)
    T = random_transform(rng)
    prev = RigidTransform(sample_rotation(rng), [0.0, 0.0, 0.6])
    truth = apply_delta(PoseDelta([0, 0, 1], 0.03, [1, 0, 0], 0.4), prev, com)
    oracle = OraclePredictor([T @ prev, T @ truth])
    out = event_step(prev, EventStream.empty(346, 260), 0, T, tracking_rig().event, oracle, com, frame_index=1)
    assert out.allclose(truth, 1e-12)


def test_frame_refine_cases():
    rng = np.random.default_rng(3)
    com = np.array([0.01, 0.0, 0.0])
    truth = RigidTransform(sample_rotation(rng), [0.0, 0.0, 0.6])
    start = apply_delta(PoseDelta([1, 1, 0], 0.02, [0, 0, 1], 0.3), truth, com)
    gt = [None, truth]
    one = frame_refine(start, None, OraclePredictor(gt), com, iterations=1, frame_index=1)
    three = frame_refine(start, None, OraclePredictor(gt), com, iterations=3, frame_index=1)
    assert one.allclose(truth, 1e-12)
    assert three.allclose(one, 1e-12)
    assert frame_refine(start, None, ZeroPredictor(), com, frame_index=1).allclose(start, 0)
    e0 = errors_between(start, truth)
    half = frame_refine(start, None, OraclePredictor(gt, gain=0.5), com, iterations=3, frame_index=1)
    e3 = errors_between(half, truth)
    assert e3[0] <= e0[0] / 4 and e3[1] <= e0[1] / 4


def test_cascade_closure_random_extrinsics():
    rng = np.random.default_rng(4)
    rig = tracking_rig(random_transform(rng))
    seq = oracle_sequence(5, 25, rig=rig)
    T = rig.T_rgb_event
    ev = OraclePredictor([T @ p for p in seq.poses])
    res = track_sequence(seq, ev, ZeroPredictor(), "rgbde")
    assert res.num_failures == 0
    for p, g in zip(res.poses, seq.poses):
        assert p.allclose(g, 1e-9)
    res = track_sequence(seq, ZeroPredictor(), OraclePredictor(seq.poses), "rgbd")
    assert all(p.allclose(g, 1e-9) for p, g in zip(res.poses, seq.poses))


def test_track_static_and_mode_equivalence():
    seq = oracle_sequence(6, 10)
    static = [seq.poses[0]] * seq.num_frames
    seq.poses = static
    res = track_sequence(seq, OraclePredictor(static), OraclePredictor(static))
    assert np.all(per_frame_errors(res.poses, static) == 0)
    seq = oracle_sequence(7, 15)
    blur = BlurredFrameOracle(seq.poses, seq.mesh.center_of_mass)
    a = track_sequence(seq, ZeroPredictor(), blur, "rgbde")
    b = track_sequence(seq, ZeroPredictor(), blur, "rgbd")
    c = track_sequence(seq, ZeroPredictor(), blur, "rgbd")
    assert a.failures == b.failures
    assert all(p.allclose(q, 1e-12) for p, q in zip(a.poses, b.poses))
    assert all(np.array_equal(p.matrix, q.matrix) for p, q in zip(b.poses, c.poses))
    with pytest.raises(ValueError):
        track_sequence(seq, ZeroPredictor(), blur, "events")


def test_track_resets_after_failure():
    seq = oracle_sequence(8, 12, max_translation=0.06)
    res = track_sequence(seq, ZeroPredictor(), ZeroPredictor(), "rgbd")
    assert res.failures
    # with no correction the tracker holds its pose, restarting from ground truth after each failure
    start = seq.poses[0]
    for i in range(1, 12):
        assert res.poses[i].allclose(start, 1e-15)
        start = seq.poses[i] if i in res.failures else res.poses[i]
    none = track_sequence(seq, ZeroPredictor(), ZeroPredictor(), "rgbd", reset="none")
    assert all(p.allclose(seq.poses[0], 1e-15) for p in none.poses)
    seq.poses = seq.poses[:-1]
    with pytest.raises(LengthMismatch):
        track_sequence(seq, ZeroPredictor(), ZeroPredictor())


def test_blurred_oracle_capture_shrinks_with_speed():
    seq = oracle_sequence(9, 10)
    blur = BlurredFrameOracle(seq.poses, seq.mesh.center_of_mass)
    assert blur.capture_range(0) == (0.02, math.radians(10))
    motion = frame_motion(seq.poses, seq.mesh.center_of_mass)
    for i in range(1, 10):
        t, r = blur.capture_range(i)
        assert t == pytest.approx(0.02 / (1 + motion[i, 0] / 10.0), rel=1e-9)
        assert r == pytest.approx(math.radians(10) / (1 + motion[i, 1] / 10.0), rel=1e-9)


# ---------------------------------------------------------------------------
# evaluation


def test_per_frame_errors_cases():
    I = RigidTransform.identity()
    assert np.all(per_frame_errors([I, I], [I, I]) == 0)
    off = RigidTransform(np.eye(3), [0.005, 0, 0])
    np.testing.assert_allclose(per_frame_errors([I, off, I], [I, I, I]), [[0, 0], [5, 0], [0, 0]], atol=1e-12)
    rng = np.random.default_rng(10)
    a = [random_transform(rng) for _ in range(50)]
    b = [random_transform(rng) for _ in range(50)]
    err = per_frame_errors(a, b)
    for (p, g), (dt, dr) in zip(zip(a, b), err):
        assert dt == pytest.approx(1000 * math.dist(p.translation, g.translation), abs=1e-9)
        oracle = Rotation.from_matrix(g.rotation.T @ p.rotation).magnitude()
        assert dr == pytest.approx(math.degrees(oracle), abs=1e-6)
    with pytest.raises(LengthMismatch):
        per_frame_errors(a, b[:-1])


def _offsets(mm=(), deg=()):
    return [RigidTransform(rotvec_to_matrix([0, 0, math.radians(r)]), [m / 1000, 0, 0]) for m, r in zip(mm, deg)]


def test_count_failures_cases():
    n = 6
    gt = [RigidTransform.identity()] * n
    assert count_failures(_offsets([0, 31, 0, 0, 0, 0], [0] * n), gt) == 1
    assert count_failures(_offsets([29] * n, [19] * n), gt) == 0
    assert count_failures(_offsets([0] * n, [0, 21, 0, 0, 21, 0]), gt) == 2
    with pytest.raises(LengthMismatch):
        count_failures(gt[:-1], gt)


def test_count_failures_monotone_in_thresholds():
    rng = np.random.default_rng(11)
    gt = [RigidTransform.identity()] * 40
    trace = _offsets(rng.uniform(0, 50, 40), rng.uniform(0, 35, 40))
    counts = [[count_failures(trace, gt, t, math.radians(r)) for r in (10, 15, 20, 25, 30)]
              for t in (0.01, 0.02, 0.03, 0.04)]
    counts = np.array(counts)
    assert np.all(np.diff(counts, axis=0) <= 0) and np.all(np.diff(counts, axis=1) <= 0)


def test_reports():
    seq = oracle_sequence(12, 8)
    blur = BlurredFrameOracle(seq.poses, seq.mesh.center_of_mass)
    res = track_sequence(seq, ZeroPredictor(), blur, "rgbd")
    rep = sequence_report("s", res.poses, seq.poses, seq.mesh.center_of_mass)
    assert rep["failures"] == res.num_failures and rep["frames"] == 8
    assert sum(r["count"] for r in rep["binned"]["translation_mm"]) <= 8
    full = make_report([rep, rep])
    assert full["schema_version"] == 1
    assert full["total_failures"] == 2 * res.num_failures and full["total_frames"] == 16
    b = binned_errors(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 5.0], [15.0, 25.0]]))
    assert b["translation_mm"][0]["mean"] == 1.0 and b["translation_mm"][1]["mean"] == 3.0
    assert b["rotation_deg"][2]["mean"] == 4.0 and b["rotation_deg"][1]["count"] == 0


# ---------------------------------------------------------------------------
# sequences


def test_downsample_cases():
    seq = oracle_sequence(13, 9)
    assert downsample_sequence(seq, 30).num_frames == 9
    ten = downsample_sequence(seq, 10)
    assert ten.num_frames == 3
    assert [p.matrix.tolist() for p in ten.poses] == [seq.poses[i].matrix.tolist() for i in (0, 3, 6)]
    assert ten.window_us == 33000
    fifteen = downsample_sequence(seq, 15)
    assert fifteen.num_frames == 5
    assert list(fifteen.frame_times_us) == list(seq.frame_times_us[::2])
    with pytest.raises(UnsupportedRate):
        downsample_sequence(seq, 20)
    with pytest.raises(UnsupportedRate):
        downsample_sequence(ten, 10)


def test_event_windows_trail_each_frame():
    rng = np.random.default_rng(14)
    mesh = make_blob_mesh(np.random.default_rng(15), n_lat=8, n_lon=16)
    seq = make_synthetic_sequence(rng, 7, mesh=mesh, render_frames=False)
    assert seq.events.is_valid()
    for i in range(1, 7):
        w = seq.events_in_window(i)
        end = int(seq.frame_times_us[i])
        assert len(w) > 0
        assert np.all((w.t >= end - 33000) & (w.t < end))
    ten = downsample_sequence(seq, 10)
    w = ten.events_in_window(2)
    assert np.all(w.t >= ten.frame_times_us[2] - 33000)


def test_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    mesh = make_blob_mesh(np.random.default_rng(17), n_lat=8, n_lon=16)
    seq = make_synthetic_sequence(rng, 3, mesh=mesh)
    save_sequence(tmp_path / "s", seq)
    back = load_sequence(tmp_path / "s")
    assert back.num_frames == 3
    assert np.array_equal(back.events.records, seq.events.records)
    assert all(np.array_equal(a.matrix, b.matrix) for a, b in zip(back.poses, seq.poses))
    np.testing.assert_allclose(back.rgb[1], seq.rgb[1], atol=0.5 / 255 + 1e-12)
    np.testing.assert_allclose(back.depth[2], seq.depth[2], atol=0.0005 + 1e-12)
    assert back.rig.T_rgb_event.allclose(seq.rig.T_rgb_event, 1e-12)


# ---------------------------------------------------------------------------
# ICP


def test_rigid_align_cases():
    rng = np.random.default_rng(18)
    src = rng.normal(size=(30, 3))
    assert rigid_align(src, src).allclose(RigidTransform.identity(), 1e-12)
    T = random_transform(rng, 1.0)
    assert rigid_align(src, T.apply(src)).allclose(T, 1e-12)
    # a mirrored target must still give a proper rotation
    R = rigid_align(src, src * [-1, 1, 1]).rotation
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(Degenerate):
        rigid_align(np.outer(np.arange(5.0), [1, 2, 3]), rng.normal(size=(5, 3)))
    with pytest.raises(Degenerate):
        rigid_align(src[:2], src[:2])


def test_rigid_align_matches_brute_force_search():
    rng = np.random.default_rng(19)
    src = np.array([[0.1, 0.0, 0.0], [0.0, 0.12, 0.0], [0.0, 0.0, 0.09]])
    R_true = rotvec_to_matrix([0.01, -0.015, 0.02])
    dst = src @ R_true.T + [0.01, 0.02, -0.01] + rng.normal(scale=0.002, size=(3, 3))

    def cost(R):
        t = dst.mean(axis=0) - R @ src.mean(axis=0)
        return float(np.sum((src @ R.T + t - dst) ** 2))

    grid = np.linspace(-0.05, 0.05, 41)
    best = min(itertools.product(grid, grid, grid), key=lambda rv: cost(rotvec_to_matrix(rv)))
    fit = rigid_align(src, dst)
    assert cost(fit.rotation) <= cost(rotvec_to_matrix(best)) + 1e-15
    assert rotation_error(fit.rotation, rotvec_to_matrix(best)) < 0.0025 * math.sqrt(3)


@pytest.fixture(scope="module")
def depth_sequence():
    rng = np.random.default_rng(20)
    mesh = make_blob_mesh(np.random.default_rng(5), n_lat=24, n_lon=48, bumpiness=0.35)
    seq = make_synthetic_sequence(rng, 4, mesh=mesh, with_events=False, max_translation=0.005,
                                  max_rotation=math.radians(5))
    return seq


def _perturb(pose, com, rng, mm=5.0, deg=5.0):
    d = PoseDelta(sample_sphere_direction(rng), mm / 1000, sample_sphere_direction(rng), math.radians(deg))
    return apply_delta(d, pose, com)


def test_icp_annotate_recovers_sequence(depth_sequence):
    seq = depth_sequence
    com = seq.mesh.center_of_mass
    init = _perturb(seq.poses[0], com, np.random.default_rng(21))
    depth_mm = [d * 1000 for d in seq.depth]
    ann = icp_annotate(depth_mm, seq.rig.rgb, seq.mesh, init)
    assert ann.flagged == []
    for p, g in zip(ann.poses, seq.poses):
        dt, dr = errors_between(p, g)
        assert dt < 0.001 and math.degrees(dr) < 0.5
    assert max(ann.iterations) <= 10


def test_icp_from_truth_converges_after_one_iteration(depth_sequence):
    seq = depth_sequence
    K = seq.rig.rgb
    pts = crop_depth_points(seq.depth[0] * 1000, K, seq.poses[0].apply(seq.mesh.center_of_mass))
    res = icp_register(pts, seq.mesh, seq.poses[0], K)
    # the first update is already far below the convergence threshold
    assert res.rotation_changes[0] < 0.1 and res.converged
    dt, dr = errors_between(res.pose, seq.poses[0])
    assert dt < 0.001 and math.degrees(dr) < 0.5


def test_icp_iteration_cap_and_flagging(depth_sequence):
    seq = depth_sequence
    K = seq.rig.rgb
    com = seq.mesh.center_of_mass
    pts = crop_depth_points(seq.depth[0] * 1000, K, seq.poses[0].apply(com))
    init = _perturb(seq.poses[0], com, np.random.default_rng(22))
    capped = icp_register(pts, seq.mesh, init, K, config=ICPConfig(max_iterations=2))
    assert capped.iterations == 2 and len(capped.rotation_changes) == 2
    strict = ICPConfig(convergence_deg=1e-9, max_iterations=3, tolerance=0.0)
    ann = icp_annotate([seq.depth[0] * 1000], K, seq.mesh, init, strict)
    assert ann.flagged == [0] and ann.iterations == [3]
    with pytest.raises(ValueError):
        icp_register(pts, seq.mesh, init, K, config=ICPConfig(alignment="plane"))


def test_icp_world_rigid_invariance(depth_sequence):
    seq = depth_sequence
    K = seq.rig.rgb
    com = seq.mesh.center_of_mass
    pts = crop_depth_points(seq.depth[1] * 1000, K, seq.poses[1].apply(com))
    init = _perturb(seq.poses[1], com, np.random.default_rng(23))
    G = RigidTransform(rotvec_to_matrix([0.3, -0.2, 1.0]), [0.5, -1.0, 2.0])
    a = icp_register(pts, seq.mesh, init, K)
    b = icp_register(G.apply(pts), seq.mesh, G @ init, K, camera_pose=G)
    assert (G @ a.pose).allclose(b.pose, 1e-6)


def test_icp_empty_crop(depth_sequence):
    seq = depth_sequence
    with pytest.raises(EmptyCrop):
        crop_depth_points(np.zeros((240, 320)), seq.rig.rgb, [0, 0, 0.6])
    far = RigidTransform(np.eye(3), [0.0, 0.0, 5.0])
    with pytest.raises(EmptyCrop):
        icp_annotate([seq.depth[0] * 1000], seq.rig.rgb, seq.mesh, far)
