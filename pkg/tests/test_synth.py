import json

import numpy as np
import pytest

from posefusion.errors import InvalidArgumentError, RenderError
from posefusion.geometry import Pose, Quaternion
from posefusion.handgraph import contact_count
from posefusion.synth import (
    ContactModel,
    OccluderState,
    SceneAssets,
    SceneConfig,
    generate_dataset,
    generate_sequence,
    generate_trajectory,
    render_frame,
    synth_tactile,
)


@pytest.fixture(scope="module")
def assets():
    return SceneAssets.build(SceneConfig(seed=5))


class TestTrajectory:
    def test_deterministic(self):
        cfg = SceneConfig(seed=9)
        a = generate_trajectory(cfg, 50)
        b = generate_trajectory(cfg, 50)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.translation, pb.translation)
            np.testing.assert_array_equal(pa.orientation.as_array(),
                                          pb.orientation.as_array())

    def test_stays_within_bounds(self):
        cfg = SceneConfig(seed=10)
        poses = generate_trajectory(cfg, 2000)
        t = np.stack([p.translation for p in poses])
        center = np.asarray(cfg.center)
        slack = 0.01  # one reflection step of slack
        assert np.all(np.abs(t[:, 0] - center[0]) <= cfg.wander_xy + slack)
        assert np.all(np.abs(t[:, 1] - center[1]) <= cfg.wander_xy + slack)
        assert np.all(np.abs(t[:, 2] - center[2]) <= cfg.wander_z + slack)

    def test_step_scale(self):
        # smoothed-walk increments should be on the order of the step std
        cfg = SceneConfig(seed=11)
        poses = generate_trajectory(cfg, 10000)
        t = np.stack([p.translation for p in poses])
        steps = np.diff(t, axis=0)
        measured = steps.std()
        assert 0.1 * cfg.trans_step_std < measured < 10 * cfg.trans_step_std

    def test_unit_quaternions(self):
        poses = generate_trajectory(SceneConfig(seed=12), 100)
        for p in poses:
            assert abs(np.linalg.norm(p.orientation.as_array()) - 1) < 1e-9

    def test_zero_frames_rejected(self):
        with pytest.raises(InvalidArgumentError):
            generate_trajectory(SceneConfig(seed=0), 0)


class TestRenderFrame:
    def test_shapes_and_dtypes(self, assets):
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.identity())
        rgb, depth, full, vis = render_frame(pose, None, assets)
        assert rgb.shape == (480, 640, 3) and rgb.dtype == np.uint8
        assert depth.shape == (480, 640) and depth.dtype == np.uint16
        assert full.dtype == bool and vis.dtype == bool

    def test_visible_subset_of_full(self, assets):
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.identity())
        occ = OccluderState(center=(320, 240), size=(80, 80))
        _, _, full, vis = render_frame(pose, occ, assets)
        assert not np.any(vis & ~full)
        assert vis.sum() < full.sum()

    def test_depth_near_object_distance(self, assets):
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.identity())
        _, depth, full, _ = render_frame(pose, None, assets)
        d = depth[full].astype(float) / 1000.0
        d = d[d > 0]
        assert abs(np.median(d) - 0.55) < 0.05

    def test_silhouette_shrinks_with_depth(self, assets):
        # projected area scales roughly with 1/z^2
        near = Pose(np.array([0, 0, 0.45]), Quaternion.identity())
        far = Pose(np.array([0, 0, 0.90]), Quaternion.identity())
        _, _, m_near, _ = render_frame(near, None, assets)
        _, _, m_far, _ = render_frame(far, None, assets)
        ratio = m_near.sum() / m_far.sum()
        assert 4.0 * 0.7 < ratio < 4.0 * 1.3

    def test_behind_camera_raises(self, assets):
        pose = Pose(np.array([0, 0, -0.55]), Quaternion.identity())
        with pytest.raises(RenderError):
            render_frame(pose, None, assets)

    def test_occluder_writes_pixels(self, assets):
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.identity())
        occ = OccluderState(center=(320, 240), size=(60, 60), gray=200)
        rgb, depth, _, _ = render_frame(pose, occ, assets)
        assert (rgb[240, 320] == 200).all()
        assert depth[240, 320] == 350

    def test_deterministic_without_rng(self, assets):
        pose = Pose(np.array([0.01, -0.02, 0.6]),
                    Quaternion.from_axis_angle([1, 1, 0], 0.7))
        a = render_frame(pose, None, assets)
        b = render_frame(pose, None, assets)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestSynthTactile:
    def test_no_fingers_near_object_no_contact(self, assets):
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.identity())
        tips = [Pose(np.array([1.0, 1.0, 1.0]), Quaternion.identity())] * 5
        t = synth_tactile(pose, tips, assets, assets.contact_model, 0.006,
                          np.random.default_rng(0))
        assert t.contact_count == 0
        assert np.max(np.abs(t.electrodes - t.baseline)) < 6 * assets.config.tactile_noise

    def test_tip_on_surface_contacts(self, assets):
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.identity())
        surf = pose.apply(assets.model.points[assets.anchor_indices[2]][None])[0]
        tips = [Pose(np.array([1.0, 1.0, 1.0]), Quaternion.identity())] * 5
        tips[2] = Pose(surf, Quaternion.identity())
        t = synth_tactile(pose, tips, assets, assets.contact_model, 0.006,
                          np.random.default_rng(0))
        assert t.contact_flags[2]
        assert t.contact_count == 1

    def test_linear_response_formula(self, assets):
        # direct oracle: electrodes - baseline == W @ [normal; pen/eps] (noise off)
        cm = ContactModel(W=assets.contact_model.W,
                          baseline=assets.contact_model.baseline, noise_std=0.0)
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.from_axis_angle([0, 1, 0], 0.4))
        j = int(assets.anchor_indices[0])
        surf = pose.apply(assets.model.points[j][None])[0]
        tips = [Pose(np.array([1.0, 1.0, 1.0]), Quaternion.identity())] * 5
        tips[0] = Pose(surf, Quaternion.identity())
        t = synth_tactile(pose, tips, assets, cm, 0.006, np.random.default_rng(0))
        from posefusion.geometry import quat_to_rotation
        n_cam = quat_to_rotation(pose.orientation) @ assets.normals[j]
        expected = cm.W @ np.concatenate([n_cam, [1.0]])  # zero distance, full pen
        np.testing.assert_allclose(t.electrodes[0] - t.baseline[0], expected, atol=1e-9)

    def test_bad_epsilon(self, assets):
        pose = Pose(np.array([0, 0, 0.55]), Quaternion.identity())
        tips = [Pose.identity()] * 5
        with pytest.raises(InvalidArgumentError):
            synth_tactile(pose, tips, assets, assets.contact_model, 0.0)


class TestGenerateSequence:
    def test_deterministic(self):
        cfg = SceneConfig(seed=21)
        a = generate_sequence(cfg, 8, sequence_seed=3)
        b = generate_sequence(cfg, 8, sequence_seed=3)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.rgb, fb.rgb)
            np.testing.assert_array_equal(fa.depth, fb.depth)
            np.testing.assert_array_equal(fa.tactile.electrodes, fb.tactile.electrodes)
            np.testing.assert_array_equal(fa.gt_pose.as_vector(), fb.gt_pose.as_vector())

    def test_different_seq_seeds_differ(self):
        cfg = SceneConfig(seed=21)
        a = generate_sequence(cfg, 5, sequence_seed=1)
        b = generate_sequence(cfg, 5, sequence_seed=2)
        assert not np.array_equal(a[0].gt_pose.as_vector(), b[0].gt_pose.as_vector())

    def test_frames_validate(self):
        for fr in generate_sequence(SceneConfig(seed=22), 20, sequence_seed=1):
            fr.validate()

    def test_flags_consistent_with_electrode_threshold(self):
        # geometric contact flags should agree with a signal-based detector
        cfg = SceneConfig(seed=23)
        frames = []
        for s in range(1, 5):
            frames.extend(generate_sequence(cfg, 40, sequence_seed=s))
        agree = 0
        thresh = 4.0 * cfg.tactile_noise
        for fr in frames:
            geo = fr.tactile.contact_flags.copy()
            t = fr.tactile.copy()
            contact_count(t, threshold=thresh)
            agree += int(np.array_equal(geo, t.contact_flags))
        assert agree / len(frames) >= 0.90

    def test_contact_count_distribution(self):
        # the schedule should produce a spread of counts including 0 and >=4
        cfg = SceneConfig(seed=24)
        counts = []
        for s in range(1, 9):
            counts.extend(fr.contact_count
                          for fr in generate_sequence(cfg, 50, sequence_seed=s))
        counts = np.asarray(counts)
        assert (counts <= 1).mean() > 0.1
        assert (counts >= 4).mean() > 0.1

    def test_occlusion_present_and_absent(self):
        cfg = SceneConfig(seed=25)
        rates = []
        for s in range(1, 7):
            rates.extend(fr.occlusion_rate
                         for fr in generate_sequence(cfg, 50, sequence_seed=s))
        rates = np.asarray(rates)
        assert (rates == 0.0).any()
        assert (rates > 0.25).any()


class TestGenerateDataset:
    def test_layout_and_summary(self, tmp_path):
        cfg = SceneConfig(seed=30)
        manifests = generate_dataset(cfg, 3, 6, tmp_path / "d")
        assert len(manifests) == 3
        assert (tmp_path / "d" / "summary.json").exists()
        summary = json.loads((tmp_path / "d" / "summary.json").read_text())
        assert summary["num_sequences"] == 3
        assert sum(summary["contact_count_hist"]) == 18
        assert SceneConfig.from_dict(summary["config"]).seed == 30

    def test_manifests_share_dataset_stats(self, tmp_path):
        cfg = SceneConfig(seed=31)
        manifests = generate_dataset(cfg, 2, 5, tmp_path / "d")
        s0, s1 = manifests[0].tactile_stats, manifests[1].tactile_stats
        np.testing.assert_array_equal(s0.mean, s1.mean)
        np.testing.assert_array_equal(s0.std, s1.std)

    def test_regeneration_byte_identical(self, tmp_path):
        cfg = SceneConfig(seed=32)
        generate_dataset(cfg, 2, 4, tmp_path / "a")
        generate_dataset(cfg, 2, 4, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel

    def test_bad_args(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            generate_dataset(SceneConfig(seed=0), 0, 5, tmp_path / "d")


class TestSceneConfig:
    def test_dict_roundtrip(self):
        cfg = SceneConfig(seed=7, shape="bottle", occluder_fraction=0.5)
        back = SceneConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_unknown_shape(self):
        with pytest.raises(InvalidArgumentError):
            SceneConfig(shape="torus")

    def test_all_shapes_build(self):
        for shape in ("box", "sphere", "bottle", "tool"):
            a = SceneAssets.build(SceneConfig(seed=1, shape=shape))
            assert a.model.num_points == 500
            assert np.isfinite(a.normals).all()
