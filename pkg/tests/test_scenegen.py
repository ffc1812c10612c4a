import os

import numpy as np
import pytest

from viewpose.scenegen import (ACTIVITY_NAMES, Camera, MultiViewClip,
                               SceneConfig, _look_at, _template_skeleton,
                               build_dataset, corrupt_poses, generate_procedure,
                               load_dataset, make_background, procedure_latent,
                               project_points, project_to_views,
                               render_view_frames, serialize_dataset)
from viewpose.tensorio import TensorIOError


def small_config(**kw) -> SceneConfig:
    base = dict(num_views=3, clip_len=4, frame_size=(32, 32), max_persons=2,
                imbalance_ratio=1.0, segment_rounds=1, base_segment_clips=2,
                seed=0)
    base.update(kw)
    return SceneConfig(**base)


class TestSceneConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            SceneConfig(num_views=0)
        with pytest.raises(ValueError):
            SceneConfig(max_persons=0)
        with pytest.raises(ValueError):
            SceneConfig(clip_len=0)
        with pytest.raises(ValueError):
            SceneConfig(num_classes=1)
        with pytest.raises(ValueError):
            SceneConfig(occlusion_prob=1.0)
        with pytest.raises(ValueError):
            SceneConfig(noise_std=-0.1)
        with pytest.raises(ValueError):
            SceneConfig(imbalance_ratio=0.5)

    def test_dict_round_trip(self):
        cfg = small_config(noise_std=0.02, occlusion_prob=0.1)
        assert SceneConfig.from_dict(cfg.to_dict()) == cfg


class TestGenerateProcedure:
    def test_determinism(self):
        cfg = small_config(num_classes=2)
        man_a, clips_a = generate_procedure(cfg, 0)
        man_b, clips_b = generate_procedure(cfg, 0)
        assert man_a.to_dict() == man_b.to_dict()
        for a, b in zip(clips_a, clips_b):
            assert np.array_equal(a.frames, b.frames)
            assert np.array_equal(a.poses2d, b.poses2d)
            assert np.array_equal(a.validity, b.validity)
            assert np.array_equal(a.track_ids, b.track_ids)

    def test_different_seeds_differ(self):
        cfg = small_config()
        _, clips_a = generate_procedure(cfg, 0)
        _, clips_b = generate_procedure(cfg, 1)
        assert not np.array_equal(clips_a[0].poses2d, clips_b[0].poses2d)

    def test_rejects_oversized_catalog(self):
        cfg = small_config(num_classes=len(ACTIVITY_NAMES) + 1)
        with pytest.raises(ValueError, match="catalog"):
            generate_procedure(cfg, 0)

    def test_manifest_segments_cover_procedure(self):
        cfg = small_config(segment_rounds=2)
        man, clips = generate_procedure(cfg, 3)
        assert man.num_clips == len(clips)
        cursor = 0
        durations = {k: 0 for k in range(cfg.num_classes)}
        for seg in man.segments:
            assert seg.start == cursor
            assert seg.end > seg.start
            assert 0 <= seg.label < cfg.num_classes
            durations[seg.label] += seg.end - seg.start
            cursor = seg.end
        assert cursor == man.num_clips
        assert durations == man.class_durations
        for seg in man.segments:
            for ci in range(seg.start, seg.end):
                assert clips[ci].label == seg.label

    def test_clip_tensor_invariants(self):
        cfg = small_config(noise_std=0.02, occlusion_prob=0.1)
        _, clips = generate_procedure(cfg, 1)
        h, w = cfg.frame_size
        for c in clips[:6]:
            assert c.frames.shape == (cfg.num_views, cfg.clip_len, 3, h, w)
            assert c.frames.min() >= 0.0 and c.frames.max() <= 1.0
            assert c.poses2d.shape == (cfg.num_views, cfg.clip_len,
                                       cfg.max_persons, 2, cfg.num_joints)
            valid_coords = c.poses2d[np.moveaxis(
                np.broadcast_to(c.validity[:, :, :, None, :], c.poses2d.shape), 0, 0)]
            if valid_coords.size:
                assert valid_coords.min() >= 0.0 and valid_coords.max() <= 1.0
            assert 0 <= c.label < cfg.num_classes

    def test_track_ids_consistent_within_view(self):
        cfg = small_config(max_persons=3, segment_rounds=2)
        _, clips = generate_procedure(cfg, 2)
        for c in clips:
            for view in range(cfg.num_views):
                ids = c.track_ids[view]  # (T, N_p)
                for s in range(cfg.max_persons):
                    assert len(set(ids[:, s].tolist())) == 1

    def test_single_person_gives_one_track_per_view(self):
        cfg = small_config(max_persons=1, segment_rounds=2)
        for seed in range(3):
            _, clips = generate_procedure(cfg, seed)
            for c in clips:
                for view in range(cfg.num_views):
                    valid_tracks = np.unique(c.track_ids[view][c.track_ids[view] >= 0])
                    assert valid_tracks.size == 1

    def test_imbalance_ratio_realized(self):
        cfg = small_config(num_views=1, frame_size=(16, 16), max_persons=1,
                           imbalance_ratio=10.0, base_segment_clips=4)
        totals = np.zeros(cfg.num_classes)
        for pid in range(20):
            man, _ = generate_procedure(cfg, pid)
            for k, v in man.class_durations.items():
                totals[k] += v
        assert totals.min() > 0
        assert totals.max() / totals.min() >= 8.0

    def test_imbalance_knob_monotone(self):
        realized = []
        for ratio in (1.0, 2.0, 4.0, 7.0, 10.0):
            cfg = small_config(num_views=1, frame_size=(16, 16), max_persons=1,
                               imbalance_ratio=ratio, segment_rounds=2,
                               base_segment_clips=4, seed=5)
            totals = np.zeros(cfg.num_classes)
            for pid in range(5):
                man, _ = generate_procedure(cfg, pid)
                for k, v in man.class_durations.items():
                    totals[k] += v
            realized.append(totals.max() / totals.min())
        for lo, hi in zip(realized, realized[1:]):
            assert hi >= lo - 1e-12

    def test_label_sufficiency_nearest_centroid(self):
        # a trivial classifier on the hidden 3D trajectories must separate
        # the activity classes: the benchmark labels are learnable
        cfg = small_config(num_views=1, frame_size=(16, 16), clip_len=8,
                           max_persons=3, segment_rounds=2)
        feats, labels = [], []
        pid = 0
        while len(feats) < 500:
            man, _ = generate_procedure(cfg, pid)
            latent = procedure_latent(cfg, pid)
            for si, seg in enumerate(man.segments):
                skels = latent.skeletons[si]
                for ci in range(seg.start, seg.end):
                    k = ci - seg.start
                    per_person = []
                    for sk in skels:
                        J = sk.joints3d[k * cfg.clip_len:(k + 1) * cfg.clip_len]
                        root = J[:, 11:13, :].mean(axis=1, keepdims=True)
                        centered = J - root
                        shoulder = J[0, 5] - J[0, 6]
                        yaw = np.arctan2(shoulder[1], shoulder[0]) - np.pi / 2
                        c, s = np.cos(-yaw), np.sin(-yaw)
                        rot = np.array([[c, -s], [s, c]])
                        canon = centered.copy()
                        canon[..., :2] = centered[..., :2] @ rot.T
                        speed = np.linalg.norm(
                            np.diff(J[:, 11:13, :2].mean(axis=1), axis=0), axis=-1)
                        per_person.append(
                            np.concatenate([canon.ravel(), 8.0 * speed.ravel()]))
                    feats.append(np.mean(per_person, axis=0))
                    labels.append(seg.label)
            pid += 1
        feats = np.array(feats)[:500]
        labels = np.array(labels)[:500]
        rng = np.random.default_rng(0)
        idx = rng.permutation(len(feats))
        half = len(feats) // 2
        tr, te = idx[:half], idx[half:]
        centroids = np.stack([feats[tr][labels[tr] == k].mean(axis=0)
                              for k in range(cfg.num_classes)])
        d2 = ((feats[te][:, None, :] - centroids[None]) ** 2).sum(-1)
        acc = (d2.argmin(1) == labels[te]).mean()
        assert acc > 0.9, f"nearest-centroid accuracy {acc:.3f}"


class TestProjection:
    def test_look_at_target_projects_to_center(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            pos = rng.uniform(-4, 4, size=3)
            pos[2] = rng.uniform(1.0, 4.0)
            target = rng.uniform(-0.5, 0.5, size=3)
            cam = Camera(pos, _look_at(pos, target), focal=0.75)
            uv, valid = project_points(target[None], cam)
            assert valid[0]
            np.testing.assert_allclose(uv[0], [0.5, 0.5], atol=0.05)

    def test_matches_closed_form_pinhole(self):
        # independent oracle: explicit rotate-translate-divide per point
        rng = np.random.default_rng(7)
        for _ in range(50):
            pos = rng.uniform(-4, 4, size=3)
            pos[2] = rng.uniform(1.5, 4.0)
            cam = Camera(pos, _look_at(pos, np.zeros(3)), focal=0.7)
            pt = rng.uniform(-1, 1, size=3)
            uv, valid = project_points(pt[None], cam)
            rel = cam.rotation @ (pt - pos)
            if rel[2] <= cam.near:
                assert not valid[0]
                continue
            u = 0.5 + cam.focal * rel[0] / rel[2]
            v = 0.5 + cam.focal * rel[1] / rel[2]
            if 0 <= u <= 1 and 0 <= v <= 1:
                assert valid[0]
                np.testing.assert_allclose(uv[0], [u, v], atol=1e-12)

    def test_point_behind_camera_invalid(self):
        pos = np.array([3.0, 0.0, 1.5])
        cam = Camera(pos, _look_at(pos, np.zeros(3)), focal=0.75)
        behind = pos + np.array([2.0, 0.0, 0.0])  # camera faces -x
        _, valid = project_points(behind[None], cam)
        assert not valid[0]

    def test_out_of_frame_invalid(self):
        pos = np.array([3.0, 0.0, 1.5])
        cam = Camera(pos, _look_at(pos, np.zeros(3)), focal=0.75)
        off = np.array([0.0, 50.0, 1.5])
        _, valid = project_points(off[None], cam)
        assert not valid[0]

    def test_degenerate_depth_does_not_raise(self):
        pos = np.zeros(3)
        cam = Camera(pos, np.eye(3), focal=0.75)
        uv, valid = project_points(np.zeros((4, 3)), cam)
        assert not valid.any()
        assert np.isfinite(uv).all()

    def test_cross_view_consistency_against_latent(self):
        # clean config: stored 2D poses must be exact reprojections of the
        # hidden 3D skeletons through the hidden cameras
        cfg = small_config(num_views=4, max_persons=2, segment_rounds=1)
        man, clips = generate_procedure(cfg, 4)
        latent = procedure_latent(cfg, 4)
        T = cfg.clip_len
        for si, seg in enumerate(man.segments):
            skels = latent.skeletons[si]
            poses, valid = project_to_views(skels, latent.cameras, cfg.max_persons)
            for ci in range(seg.start, seg.end):
                k = ci - seg.start
                clip = clips[ci]
                ref = poses[:, k * T:(k + 1) * T].astype(np.float32)
                ref_valid = valid[:, k * T:(k + 1) * T]
                assert np.array_equal(clip.validity, ref_valid)
                sel = np.broadcast_to(ref_valid[:, :, :, None, :], ref.shape)
                np.testing.assert_allclose(clip.poses2d[sel], ref[sel], atol=1e-7)

    def test_one_view_is_near_overhead(self):
        for seed in range(5):
            latent = procedure_latent(small_config(num_views=4), seed)
            overhead = latent.cameras[-1]
            forward = overhead.rotation[2]
            # elevation angle from straight-down within 15 degrees
            assert forward @ np.array([0.0, 0.0, -1.0]) > np.cos(np.radians(15))


class TestCorruptPoses:
    def test_zero_noise_is_identity(self):
        rng = np.random.default_rng(0)
        poses = rng.uniform(0, 1, size=(2, 4, 3, 2, 17))
        valid = rng.random((2, 4, 3, 17)) < 0.8
        out, out_valid = corrupt_poses(poses, valid, 0.0, 0.0, seed=1)
        assert np.array_equal(out, poses)
        assert np.array_equal(out_valid, valid)

    def test_occlusion_fraction_concentrates(self):
        valid = np.ones((100, 100), dtype=bool)  # 10^4 joints
        poses = np.full((100, 2, 100), 0.5)
        _, out_valid = corrupt_poses(poses, valid, 0.0, 0.5, seed=42)
        frac = 1.0 - out_valid.mean()
        assert 0.47 <= frac <= 0.53

    def test_noise_std_recovered(self):
        rng = np.random.default_rng(3)
        poses = rng.uniform(0.3, 0.7, size=(100, 2, 100))  # away from clipping
        valid = np.ones((100, 100), dtype=bool)
        out, _ = corrupt_poses(poses, valid, 0.02, 0.0, seed=11)
        disp = (out - poses).ravel()
        assert 0.018 <= disp.std() <= 0.022

    def test_clipping_to_unit_square(self):
        poses = np.full((50, 2, 17), 0.999)
        valid = np.ones((50, 17), dtype=bool)
        out, _ = corrupt_poses(poses, valid, 0.05, 0.0, seed=2)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_invalid_joints_not_jittered(self):
        poses = np.full((10, 2, 17), 0.5)
        valid = np.zeros((10, 17), dtype=bool)
        out, _ = corrupt_poses(poses, valid, 0.1, 0.0, seed=4)
        assert np.array_equal(out, poses)

    def test_pure_function_of_seed(self):
        poses = np.full((10, 2, 17), 0.5)
        valid = np.ones((10, 17), dtype=bool)
        a = corrupt_poses(poses, valid, 0.02, 0.3, seed=9)
        b = corrupt_poses(poses, valid, 0.02, 0.3, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestRendering:
    def test_empty_pose_set_renders_background(self):
        bg = make_background(32, 32, np.random.default_rng(5))
        poses = np.zeros((2, 1, 2, 17))
        valid = np.zeros((2, 1, 17), dtype=bool)
        tracks = np.full((2, 1), -1, dtype=np.int32)
        frames = render_view_frames(poses, valid, tracks, bg)
        expected = np.round(bg * 255).astype(np.float32).transpose(2, 0, 1) / 255.0
        for t in range(2):
            np.testing.assert_array_equal(frames[t], expected)

    def test_single_person_centroid_near_joints(self):
        tmpl = _template_skeleton()
        poses = np.zeros((1, 1, 2, 17))
        poses[0, 0, 0] = 0.5 + tmpl[:, 1] * 0.5
        poses[0, 0, 1] = 0.8 - tmpl[:, 2] * 0.35
        valid = np.ones((1, 1, 17), dtype=bool)
        tracks = np.zeros((1, 1), dtype=np.int32)
        bg = make_background(64, 64, np.random.default_rng(1))
        frames = render_view_frames(poses, valid, tracks, bg)
        bg_q = np.round(bg * 255).astype(np.float32).transpose(2, 0, 1) / 255.0
        mass = np.abs(frames[0] - bg_q).sum(axis=0)
        yy, xx = np.mgrid[0:64, 0:64]
        cx = (xx * mass).sum() / mass.sum()
        cy = (yy * mass).sum() / mass.sum()
        jx = (poses[0, 0, 0] * 63).mean()
        jy = (poses[0, 0, 1] * 63).mean()
        assert np.hypot(cx - jx, cy - jy) <= 3.0

    def test_values_quantized_to_255(self):
        cfg = small_config()
        _, clips = generate_procedure(cfg, 0)
        scaled = clips[0].frames * 255.0
        np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-4)

    def test_deterministic(self):
        bg = make_background(32, 32, np.random.default_rng(2))
        rng = np.random.default_rng(0)
        poses = rng.uniform(0.2, 0.8, size=(3, 2, 2, 17))
        valid = np.ones((3, 2, 17), dtype=bool)
        tracks = np.ones((3, 2), dtype=np.int32)
        a = render_view_frames(poses, valid, tracks, bg)
        b = render_view_frames(poses, valid, tracks, bg)
        np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = small_config(noise_std=0.01, occlusion_prob=0.05)
    path = str(root / "data")
    build_dataset(cfg, num_procedures=5, out_path=path,
                  split_fractions={"train": 0.6, "val": 0.2, "test": 0.2})
    return path


class TestDatasetIO:
    def test_round_trip_equality(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        cfg = ds.config
        for pid in list(ds.procedures)[:2]:
            _, clips = generate_procedure(cfg, pid)
            for ci in (0, len(clips) - 1):
                loaded = ds.get_clip(pid, ci)
                assert np.array_equal(loaded.frames, clips[ci].frames)
                assert np.array_equal(loaded.poses2d, clips[ci].poses2d)
                assert np.array_equal(loaded.validity, clips[ci].validity)
                assert np.array_equal(loaded.track_ids, clips[ci].track_ids)
                assert loaded.label == clips[ci].label

    def test_splits_cover_all_procedures(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        assigned = sorted(p for pids in ds.splits.values() for p in pids)
        assert assigned == sorted(ds.procedures)
        total = sum(m.num_clips for m in ds.procedures.values())
        assert sum(ds.num_clips(s) for s in ds.splits) == total
        assert len(ds.clip_ids("train")) == ds.num_clips("train")

    def test_truncated_tensor_error_names_file(self, dataset_dir, tmp_path):
        import shutil
        broken = tmp_path / "broken"
        shutil.copytree(dataset_dir, broken)
        pid = load_dataset(dataset_dir).splits["train"][0]
        target = broken / f"proc_{pid:04d}" / "poses.bin"
        data = target.read_bytes()
        target.write_bytes(data[:-8])
        with pytest.raises(TensorIOError, match="poses.bin"):
            load_dataset(str(broken))

    def test_corrupt_manifest_rejected(self, dataset_dir, tmp_path):
        import shutil
        broken = tmp_path / "badman"
        shutil.copytree(dataset_dir, broken)
        (broken / "manifest.json").write_text("{}")
        with pytest.raises(TensorIOError, match="manifest"):
            load_dataset(str(broken))

    def test_split_sum_mismatch_rejected(self, dataset_dir, tmp_path):
        import json
        import shutil
        broken = tmp_path / "badsplit"
        shutil.copytree(dataset_dir, broken)
        man = json.loads((broken / "manifest.json").read_text())
        man["splits"]["train"] = man["splits"]["train"][:-1] \
            if len(man["splits"]["train"]) > 1 else []
        (broken / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(TensorIOError, match="split"):
            load_dataset(str(broken))

    def test_labels_accessor(self, dataset_dir):
        ds = load_dataset(dataset_dir)
        labels = ds.labels("test")
        assert labels.shape == (ds.num_clips("test"),)
        assert ((labels >= 0) & (labels < ds.config.num_classes)).all()
